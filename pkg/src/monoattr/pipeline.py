"""End-to-end runs: cohort -> classifier -> SAE -> attributions -> optimizer -> metrics -> embeddings -> reports.

Every stage reads its inputs from, and writes its outputs to, the run
directory, so stages can also be run one at a time from the command line.
Layout::

    <output_dir>/manifest.json          checkpoint hashes per distribution
    <output_dir>/checkpoints/*.bin      trained on IID data only
    <output_dir>/<iid|ood>/...          per-distribution artifacts
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import traceback
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import embedding as emb
from . import metrics as M
from . import report as rep
from . import sae as sae_mod
from .attribution import SIX_METHODS
from .cohort import CLS_TEXT, SEQ_LEN, Cohort, ConfigError, export_csv, generate_cohort, ingest_csv, split_cohort
from .explain import ExplanationExample, MethodSettings, SampleExplainer, build_example, consensus
from .optimizer.deo import DeoModel
from .optimizer.loss import LossWeights
from .optimizer.teo import TeoConfig, TeoModel
from .optimizer.train import OptimizerConfig, explain, train_optimizer, write_curve_csv

log = logging.getLogger(__name__)

SETTINGS = ("no_sae", "sae")
METHOD_NAMES = [m.value for m in SIX_METHODS]
CLASS_NAMES = {"binary": ("Control", "Alzheimer's"), "three_class": ("Control", "MCI", "LMCI")}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class PreconditionError(RuntimeError):
    pass


# -- configuration -------------------------------------------------------------

@dataclass
class RunConfig:
    task: str = "binary"
    distribution: str = "iid"
    seed: int = 1
    n_samples: int = 200
    output_dir: str = "runs/default"
    classifier_epochs: int = 30
    classifier_lr: float = 2e-4
    classifier_batch_size: int = 16
    sae_variant: str = "topk"
    sae_expansion: int = 32
    sae_k: int = 16
    sae_steps: int = 500
    sae_lr: float = 1e-3
    optimizer_kind: str = "teo"
    optimizer_steps: int = 200
    optimizer_lr: float = 2e-4
    optimizer_batch_size: int = 1
    optimizer_init: str = "positional"
    optimizer_train_examples: int = 16
    optimizer_n_loss: int = 2
    loss_l1: float = 0.1
    loss_l2: float = 0.3
    loss_l3: float = 0.1
    loss_l4: float = 0.5
    loss_l5: float = 0.0
    loss_orientation: str = "literal"
    metrics_n_perturbations: int = 4
    metrics_p: float = 2.0
    umap_n_neighbors: int = 5
    umap_epochs: int = 200
    umap_lam5: float = 0.0
    pca_tau: float = 0.6
    export_fraction: float = 0.5
    report_heatmaps: int = 2

    def __post_init__(self):
        if self.task not in CLASS_NAMES:
            raise ConfigError(f"task must be binary or three_class, got {self.task!r}")
        if self.distribution not in ("iid", "ood"):
            raise ConfigError(f"distribution must be iid or ood, got {self.distribution!r}")
        if self.optimizer_kind not in ("teo", "deo"):
            raise ConfigError(f"optimizer.kind must be teo or deo, got {self.optimizer_kind!r}")
        if not 0 < self.export_fraction <= 1:
            raise ConfigError("export.fraction must lie in (0, 1]")
        sae_mod.Variant(self.sae_variant)

    # dotted keys in files, underscores in Python
    @staticmethod
    def key(name: str) -> str:
        head, _, rest = name.partition("_")
        return f"{head}.{rest}" if head in _SECTIONS else name

    def to_text(self) -> str:
        return "".join(f"{self.key(f.name)} = {getattr(self, f.name)}\n" for f in fields(self))

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def dist_dir(self) -> Path:
        return self.out / self.distribution

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_l1, self.loss_l2, self.loss_l3, self.loss_l4, self.loss_l5,
                           orientation=self.loss_orientation)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(kind=self.optimizer_kind, lr=self.optimizer_lr, steps=self.optimizer_steps,
                               batch_size=self.optimizer_batch_size, seed=self.seed,
                               teo=TeoConfig(init=self.optimizer_init))

    def stability_config(self) -> M.StabilityConfig:
        return M.StabilityConfig(p=self.metrics_p, n_perturbations=max(self.metrics_n_perturbations,
                                                                       self.optimizer_n_loss), seed=self.seed)


_SECTIONS = ("classifier", "sae", "optimizer", "loss", "metrics", "umap", "pca", "export", "report")
_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, text: str):
    kind = type(getattr(RunConfig, name))
    try:
        return kind(text) if kind is not bool else text.lower() in ("1", "true", "yes")
    except ValueError as exc:
        raise ConfigError(f"{RunConfig.key(name)}: cannot read {text!r} as {kind.__name__}") from exc


def parse_settings(lines) -> dict:
    """key = value pairs; blank lines and # comments ignored; unknown keys rejected."""
    out = {}
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        name = key.replace(".", "_").replace("-", "_")
        if name not in _FIELDS or RunConfig.key(name) != key.replace("-", "_"):
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = _coerce(name, value)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    values = parse_settings(Path(path).read_text().splitlines()) if path else {}
    values.update(parse_settings(overrides))
    return RunConfig(**values)


# -- files ---------------------------------------------------------------------

def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest_path(config: RunConfig) -> Path:
    return config.out / "manifest.json"


def read_manifest(config: RunConfig) -> dict:
    p = _manifest_path(config)
    return json.loads(p.read_text()) if p.exists() else {}


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")


def record_checkpoint(config: RunConfig, name: str) -> None:
    manifest = read_manifest(config)
    entry = manifest.setdefault("iid", {}).setdefault("checkpoints", {})
    entry[name] = sha256(config.out / "checkpoints" / name)
    _write_json(_manifest_path(config), manifest)


def _checkpoint(config: RunConfig, name: str) -> Path:
    """Path of an IID checkpoint whose hash matches the manifest."""
    path = config.out / "checkpoints" / name
    recorded = read_manifest(config).get("iid", {}).get("checkpoints", {}).get(name)
    if recorded is None or not path.exists():
        raise PreconditionError(f"missing IID checkpoint {name}: run the IID pipeline into {config.out} first")
    if sha256(path) != recorded:
        raise PreconditionError(f"checkpoint {name} does not match the hash recorded by the IID run")
    return path


def optimizer_name(config: RunConfig, setting: str) -> str:
    return f"{config.optimizer_kind}_{setting}.bin"


def load_optimizer(config: RunConfig, setting: str):
    path = _checkpoint(config, optimizer_name(config, setting))
    return (TeoModel if config.optimizer_kind == "teo" else DeoModel).load(path)


def _require_iid(config: RunConfig, stage: str) -> None:
    if config.distribution != "iid":
        raise PreconditionError(f"{stage} trains on IID data only; OOD runs reuse the IID checkpoints")


# -- cohort --------------------------------------------------------------------

def cohort_path(config: RunConfig) -> Path:
    return config.dist_dir / "cohort.csv"


def stage_generate(config: RunConfig) -> None:
    cohort = generate_cohort(config.seed, config.n_samples, config.task, config.distribution)
    export_csv(cohort, cohort_path(config))


def load_splits(config: RunConfig) -> dict[str, Cohort]:
    path = cohort_path(config)
    if not path.exists():
        raise PreconditionError(f"no cohort at {path}: run generate first")
    return split_cohort(ingest_csv(path), config.seed)


# -- training ------------------------------------------------------------------

def stage_train_classifier(config: RunConfig) -> None:
    _require_iid(config, "train-classifier")
    sp = load_splits(config)
    tc = clf.TrainConfig(lr=config.classifier_lr, epochs=config.classifier_epochs,
                         batch_size=config.classifier_batch_size, seed=config.seed)
    model, info = clf.train_classifier(sp["train"], sp["val"], tc)
    (config.out / "checkpoints").mkdir(exist_ok=True)
    model.save(config.out / "checkpoints" / "classifier.bin")
    record_checkpoint(config, "classifier.bin")
    _write_json(config.dist_dir / "classifier_metrics.json",
                {"val_accuracy": info["val_accuracy"], "train_accuracy": info["train_accuracy"],
                 "test_accuracy": clf.accuracy(model, sp["test"]), "steps": info["steps"],
                 "history": info["history"]})


def load_classifier(config: RunConfig) -> clf.ClassifierModel:
    return clf.ClassifierModel.load(_checkpoint(config, "classifier.bin"))


def stage_train_sae(config: RunConfig) -> None:
    _require_iid(config, "train-sae")
    sp = load_splits(config)
    model = load_classifier(config)
    acts = clf.batch_activations(model, sp["train"].token_matrix)
    sc = sae_mod.SaeTrainConfig(variant=config.sae_variant, expansion=config.sae_expansion, k=config.sae_k,
                                steps=config.sae_steps, lr=config.sae_lr, seed=config.seed)
    sae, curves = sae_mod.sae_train(acts, sc)
    sae.save(config.out / "checkpoints" / "sae.bin")
    record_checkpoint(config, "sae.bin")
    _write_json(config.dist_dir / "sae_metrics.json",
                {"initial_mse": curves["initial_mse"], "final_mse": curves["final_mse"],
                 "final_l0": curves["l0"][-1] if curves["l0"] else None})


def load_sae(config: RunConfig) -> sae_mod.SaeModel:
    return sae_mod.SaeModel.load(_checkpoint(config, "sae.bin"))


# -- attributions --------------------------------------------------------------

_ARRAY_FIELDS = ("stacked", "phi_bar", "mask", "signal", "pert_stacked", "dx", "df")


def save_examples(path, examples: list[ExplanationExample]) -> None:
    data = {"sample_id": np.array([e.sample_id for e in examples]),
            "target": np.array([e.target for e in examples]), "label": np.array([e.label for e in examples]),
            "x_norm": np.array([e.x_norm for e in examples]), "f_norm": np.array([e.f_norm for e in examples]),
            "n_pert": np.array([len(e.pert_stacked) for e in examples])}
    for name in _ARRAY_FIELDS:
        if name in ("pert_stacked", "dx", "df"):
            data[name] = np.concatenate([getattr(e, name) for e in examples])
        else:
            data[name] = np.stack([getattr(e, name) for e in examples])
    data["scores"] = np.stack([np.stack([e.scores[m] for m in SIX_METHODS]) for e in examples])
    np.savez(path, **data)


def load_examples(path) -> list[ExplanationExample]:
    if not Path(path).exists():
        raise PreconditionError(f"no attributions at {path}: run attribute first")
    d = np.load(path)
    bounds = np.concatenate([[0], np.cumsum(d["n_pert"])])
    out = []
    for i in range(len(d["sample_id"])):
        sl = slice(bounds[i], bounds[i + 1])
        out.append(ExplanationExample(
            sample_id=int(d["sample_id"][i]), stacked=d["stacked"][i], phi_bar=d["phi_bar"][i],
            mask=d["mask"][i].astype(bool), signal=d["signal"][i].astype(bool), target=int(d["target"][i]),
            label=int(d["label"][i]), x_norm=float(d["x_norm"][i]), f_norm=float(d["f_norm"][i]),
            pert_stacked=d["pert_stacked"][sl], dx=d["dx"][sl], df=d["df"][sl],
            scores={m: d["scores"][i, k] for k, m in enumerate(SIX_METHODS)}))
    return out


def examples_path(config: RunConfig, setting: str, split: str) -> Path:
    return config.dist_dir / f"examples_{setting}_{split}.npz"


def build_examples(model, samples, sae, weights, stability: M.StabilityConfig, n_draws: int,
                   first_id: int = 0) -> list[ExplanationExample]:
    settings = MethodSettings(seed=stability.seed)
    return [build_example(SampleExplainer(model, s, first_id + i, sae, settings), weights, stability, n_draws)
            for i, s in enumerate(samples)]


def stage_attribute(config: RunConfig) -> None:
    sp = load_splits(config)
    model = load_classifier(config)
    sae = load_sae(config)
    weights = config.optimizer_config().method_weights
    stab = config.stability_config()
    for setting in SETTINGS:
        use = sae if setting == "sae" else None
        if config.distribution == "iid":
            train = sp["train"].samples[: config.optimizer_train_examples]
            save_examples(examples_path(config, setting, "train"),
                          build_examples(model, train, use, weights, stab, config.optimizer_n_loss))
        test = build_examples(model, sp["test"].samples, use, weights, stab, config.metrics_n_perturbations)
        save_examples(examples_path(config, setting, "test"), test)


def stage_train_optimizer(config: RunConfig) -> None:
    _require_iid(config, "train-optimizer")
    for setting in SETTINGS:
        examples = load_examples(examples_path(config, setting, "train"))
        model, rec = train_optimizer(examples, config.loss_weights(), config.optimizer_config())
        name = optimizer_name(config, setting)
        model.save(config.out / "checkpoints" / name)
        record_checkpoint(config, name)
        write_curve_csv(config.dist_dir / f"{config.optimizer_kind}_{setting}_curve.csv", rec["curve"])
        _write_json(config.dist_dir / f"{config.optimizer_kind}_{setting}_loss.json",
                    {"initial": rec["initial"], "final": rec["final"],
                     "initial_components": rec["initial_components"],
                     "final_components": rec["final_components"]})


# -- evaluation ----------------------------------------------------------------

def optimized(model, examples: list[ExplanationExample], config: RunConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """Optimizer output for each example and for each of its perturbation draws."""
    oc = config.optimizer_config()
    stacked = np.stack([e.stacked for e in examples])
    masks = np.stack([e.mask for e in examples])
    phi = explain(model, stacked, masks, oc, seed=config.seed)
    pert = [explain(model, e.pert_stacked, np.broadcast_to(e.mask, (len(e.pert_stacked), SEQ_LEN)), oc,
                    seed=config.seed) if len(e.pert_stacked) else np.zeros((0, SEQ_LEN)) for e in examples]
    return phi, pert


def method_explanations(examples, phi_opt, pert_opt, weights, opt_label: str) -> dict[str, tuple]:
    """name -> (phi (B, T), [per-sample perturbed (N, T)]) for six methods, the consensus and the optimizer."""
    out = {}
    for k, name in enumerate(METHOD_NAMES):
        out[name] = (np.stack([e.stacked[:, k] for e in examples]), [e.pert_stacked[..., k] for e in examples])
    out["Weighted"] = (np.stack([e.phi_bar for e in examples]),
                       [np.stack([consensus(p, weights, e.mask) for p in e.pert_stacked])
                        if len(e.pert_stacked) else np.zeros((0, SEQ_LEN)) for e in examples])
    out[opt_label] = (phi_opt, pert_opt)
    return out


def span_mask(e: ExplanationExample) -> np.ndarray:
    span = e.mask.copy()
    span[0] = False
    return span


def recovery_auc(phi: np.ndarray, e: ExplanationExample) -> float:
    span = span_mask(e)
    return M.roc_auc(np.abs(phi)[span], e.signal[span])


def explanations_path(config: RunConfig, setting: str) -> Path:
    return config.dist_dir / f"explanations_{setting}.npz"


def stage_evaluate(config: RunConfig) -> None:
    weights = config.optimizer_config().method_weights
    stab = M.StabilityConfig(p=config.metrics_p, seed=config.seed)
    report = M.MetricReport()
    recovery: list[dict] = []
    opt_label = config.optimizer_kind.upper()
    for setting in SETTINGS:
        examples = load_examples(examples_path(config, setting, "test"))
        model = load_optimizer(config, setting)
        phi_opt, pert_opt = optimized(model, examples, config)
        np.savez(explanations_path(config, setting), phi=phi_opt,
                 sample_id=np.array([e.sample_id for e in examples]))
        for name, (phis, perts) in method_explanations(examples, phi_opt, pert_opt, weights, opt_label).items():
            aucs = []
            for e, phi, pert in zip(examples, phis, perts):
                m = e.mask
                try:
                    r = M.stability_from_draws(phi[m], pert[:, m], e.dx, e.x_norm, stab).value
                    o = M.stability_from_draws(phi[m], pert[:, m], e.df, e.f_norm, stab).value
                except M.EmptyNeighborhoodError:
                    r = o = float("nan")
                try:
                    g = M.gini_sparseness(phi[m])
                except M.UndefinedMetricError:
                    g = float("nan")
                report.add(config.task, setting, name, e.label, e.sample_id, g, r, o)
                aucs.append(recovery_auc(phi, e))
            recovery.append({"setting": setting, "method": name, "auc_mean": float(np.mean(aucs)),
                             "auc_std": float(np.std(aucs)), "n": len(aucs)})
    report.write_csv(config.dist_dir / "metrics.csv")
    _write_rows(config.dist_dir / "metric_rows.csv", report.rows,
                ["task", "setting", "method", "class", "sample_id", "sparseness", "ris", "ros"])
    _write_rows(config.dist_dir / "recovery.csv", recovery, ["setting", "method", "auc_mean", "auc_std", "n"])
    _write_rows(config.dist_dir / "stats.csv", paired_statistics(report, opt_label),
                ["setting", "metric", "method_a", "method_b", "n", "t_stat", "t_p", "wilcoxon_W", "wilcoxon_p",
                 "exact", "bh_q", "bh_reject", "flags"])


def paired_statistics(report: M.MetricReport, opt_label: str) -> list[dict]:
    """Optimizer vs each classical method, per setting and metric, BH-adjusted over the family."""
    rows = []
    for setting in SETTINGS:
        for metric in ("sparseness", "ris", "ros"):
            a = report.values(setting, opt_label, metric)
            for name in METHOD_NAMES:
                b = report.values(setting, name, metric)
                ids = [i for i in sorted(a) if i in b and np.isfinite(a[i]) and np.isfinite(b[i])]
                if len(ids) < 5:
                    continue
                res = M.paired_compare([a[i] for i in ids], [b[i] for i in ids])
                rows.append({"setting": setting, "metric": metric, "method_a": opt_label, "method_b": name,
                             "n": res.n, "t_stat": res.t_stat, "t_p": res.t_p, "wilcoxon_W": res.wilcoxon_W,
                             "wilcoxon_p": res.wilcoxon_p, "exact": res.exact, "flags": " ".join(res.flags)})
    if rows:
        fdr = M.bh_fdr([r["wilcoxon_p"] for r in rows])
        for r, adj, rej in zip(rows, fdr.adjusted, fdr.rejected):
            r["bh_q"], r["bh_reject"] = adj, bool(rej)
    return rows


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _write_rows(path: Path, rows: list[dict], columns: list[str]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


# -- embeddings ----------------------------------------------------------------

def load_explanations(config: RunConfig, setting: str) -> tuple[np.ndarray, np.ndarray]:
    path = explanations_path(config, setting)
    if not path.exists():
        raise PreconditionError(f"no optimized explanations at {path}: run evaluate first")
    d = np.load(path)
    return d["phi"], d["sample_id"]


def class_groups(config: RunConfig, cohort: Cohort) -> list[tuple[int, np.ndarray]]:
    labels = cohort.labels
    return [(c, np.flatnonzero(labels == c)) for c in range(len(CLASS_NAMES[config.task]))]


def stage_embed(config: RunConfig) -> None:
    test = load_splits(config)["test"]
    opt_label = config.optimizer_kind.upper()
    ucfg = emb.UmapConfig(n_neighbors=config.umap_n_neighbors, epochs=config.umap_epochs, seed=config.seed,
                          lam5=config.umap_lam5)
    reports, summary = {}, []
    for setting in SETTINGS:
        phi, ids = load_explanations(config, setting)
        label = opt_label + ("-SAE" if setting == "sae" else "")
        for c, rows in class_groups(config, test):
            if len(rows) <= ucfg.n_neighbors:
                log.warning("class %d has %d test samples; skipping its embedding", c, len(rows))
                continue
            matrix = phi[rows]
            fw = emb.featurewise_umap(matrix, ucfg)
            emb.write_embedding_csv(config.dist_dir / f"embedding_{setting}_class{c}.csv", fw, ids[rows])
            pca = emb.pca_top8(matrix)
            emb.write_pca_csv(config.dist_dir / f"pca_{setting}_class{c}.csv", pca)
            sub = test.subset(rows)
            group = f"{label} {CLASS_NAMES[config.task][c]}"
            reports[group] = emb.threshold_select(pca, sub, config.pca_tau)
            summary.append({"group": group, "top_subgroup": reports[group].top or "",
                            "n_selected": int(reports[group].selected.sum()),
                            "pc1_ratio": float(pca.ratios[0]) if len(pca.ratios) else 0.0,
                            "umap_residual_mean": float(fw.residuals.mean()),
                            "jittered_features": sum(1 for f in fw.flags if f)})
    emb.write_subgroup_csv(config.dist_dir / "subgroups.csv", reports)
    _write_rows(config.dist_dir / "embedding_summary.csv", summary,
                ["group", "top_subgroup", "n_selected", "pc1_ratio", "umap_residual_mean", "jittered_features"])


# -- exports -------------------------------------------------------------------

def _words(sample) -> list[str]:
    words = sample.chars.split()
    if not words or words[0] != CLS_TEXT:
        words = [CLS_TEXT] + words
    return words[:SEQ_LEN]


def stage_export(config: RunConfig) -> None:
    test = load_splits(config)["test"]
    examples = load_examples(examples_path(config, "no_sae", "test"))
    phi, _ = load_explanations(config, "no_sae")
    phi_sae, _ = load_explanations(config, "sae")
    opt_label = config.optimizer_kind.upper()
    records = []
    for e, s, p, ps in zip(examples, test.samples, phi, phi_sae):
        scores = {name: e.stacked[:, k] for k, name in enumerate(METHOD_NAMES)}
        scores["Weighted"] = e.phi_bar
        scores[opt_label] = p
        scores[opt_label + "-SAE"] = ps
        records.append(rep.HighlightRecord(e.sample_id, s.label, _words(s), scores))
    rep.export_highlight_csv(records, config.dist_dir, config.export_fraction)
    if records:
        _write_rows(config.dist_dir / "highlight_columns.csv",
                    [{"column": f"attr{i + 1}", "method": m} for i, m in enumerate(records[0].scores)],
                    ["column", "method"])
    heat = config.dist_dir / "heatmaps"
    heat.mkdir(exist_ok=True)
    for c, rows in class_groups(config, test):
        for i in rows[: config.report_heatmaps]:
            r = records[i]
            for name in (opt_label, opt_label + "-SAE", "Weighted"):
                svg = rep.render_heatmap(r.words, r.scores[name], f"sample {r.sample_id} class {c} {name}")
                (heat / f"sample{r.sample_id}_{name.replace(' ', '_')}.svg").write_text(svg)


# -- summary -------------------------------------------------------------------

def _read_csv(path: Path) -> list[dict]:
    import csv

    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def stage_report(config: RunConfig) -> None:
    d = config.dist_dir
    lines = [f"# Run report: {config.task}, {config.distribution}, seed {config.seed}", ""]
    info = d / "classifier_metrics.json"
    if info.exists():
        acc = json.loads(info.read_text())
        lines += [f"Classifier test accuracy: {acc['test_accuracy']:.4f}", ""]
    lines += ["## Metrics (mean over test samples)", "",
              "| setting | method | class | sparseness | RIS | ROS |", "|---|---|---|---|---|---|"]
    for r in _read_csv(d / "metrics.csv"):
        lines.append(f"| {r['setting']} | {r['method']} | {r['class']} | {float(r['sparseness_mean']):.4f} | "
                     f"{float(r['ris_mean']):.4g} | {float(r['ros_mean']):.4g} |")
    lines += ["", "## Planted-signal recovery (AUC of |attribution|)", "", "| setting | method | AUC |", "|---|---|---|"]
    for r in _read_csv(d / "recovery.csv"):
        lines.append(f"| {r['setting']} | {r['method']} | {float(r['auc_mean']):.4f} |")
    lines += ["", "## Subgroups selected on the first principal component", "",
              "| group | top subgroup | selected features |", "|---|---|---|"]
    for r in _read_csv(d / "embedding_summary.csv"):
        lines.append(f"| {r['group']} | {r['top_subgroup']} | {r['n_selected']} |")
    cols = _read_csv(d / "highlight_columns.csv")
    if cols:
        lines += ["", "Highlight columns: " + ", ".join(f"{c['column']} = {c['method']}" for c in cols)]
    ck = read_manifest(config).get("iid", {}).get("checkpoints", {})
    lines += ["", "## IID checkpoints", ""] + [f"- {k}: `{v[:16]}`" for k, v in sorted(ck.items())]
    (d / "report.md").write_text("\n".join(lines) + "\n")


# -- orchestration -------------------------------------------------------------

STAGES = {
    "generate": stage_generate,
    "train-classifier": stage_train_classifier,
    "train-sae": stage_train_sae,
    "attribute": stage_attribute,
    "train-optimizer": stage_train_optimizer,
    "evaluate": stage_evaluate,
    "embed": stage_embed,
    "export": stage_export,
    "report": stage_report,
}
TRAINING_STAGES = ("train-classifier", "train-sae", "train-optimizer")


def prepare(config: RunConfig) -> None:
    config.dist_dir.mkdir(parents=True, exist_ok=True)
    (config.out / "checkpoints").mkdir(exist_ok=True)
    (config.dist_dir / "resolved_config.txt").write_text(config.to_text())


def _check_ood(config: RunConfig) -> None:
    names = ["classifier.bin", "sae.bin"] + [optimizer_name(config, s) for s in SETTINGS]
    used = {n: sha256(_checkpoint(config, n)) for n in names}
    manifest = read_manifest(config)
    manifest["ood"] = {"checkpoints_used": used}
    _write_json(_manifest_path(config), manifest)


def run_stage(config: RunConfig, name: str) -> None:
    prepare(config)
    log.info("stage %s (%s)", name, config.distribution)
    try:
        if config.distribution == "ood":
            _check_ood(config)
        STAGES[name](config)
    except Exception as exc:
        (config.dist_dir / "error.log").write_text(f"stage: {name}\n{traceback.format_exc()}")
        raise StageError(name, exc) from exc


def run_pipeline(config: RunConfig) -> Path:
    """All stages for the configured distribution; OOD runs skip training and reuse IID checkpoints."""
    prepare(config)
    stale = config.dist_dir / "error.log"
    if stale.exists():
        stale.unlink()
    for name in STAGES:
        if config.distribution == "ood" and name in TRAINING_STAGES:
            continue
        run_stage(config, name)
    return config.dist_dir


def with_distribution(config: RunConfig, distribution: str) -> RunConfig:
    return dataclasses.replace(config, distribution=distribution)


# -- planted-signal replication -----------------------------------------------

@dataclass
class Replication:
    seed: int
    auc: dict[str, float]              # mean recovery AUC over test samples, per method
    top_subgroup: str | None
    fractions: dict[str, float]
    test_accuracy: float
    consensus_top_subgroup: str | None = None   # same selection run on the weighted consensus


def planted_signal_replication(seed: int, config: RunConfig | None = None) -> Replication:
    """One seed of the ground-truth recovery check, without the SAE and in memory.

    Trains the classifier and the optimizer with the run defaults, then scores
    |attribution| against the planted positions of the test split and runs the
    first-component subgroup selection on the optimizer's test explanations.
    """
    config = dataclasses.replace(config or RunConfig(), seed=seed)
    sp = split_cohort(generate_cohort(seed, config.n_samples, config.task, "iid"), seed)
    tc = clf.TrainConfig(lr=config.classifier_lr, epochs=config.classifier_epochs,
                         batch_size=config.classifier_batch_size, seed=seed)
    model, _ = clf.train_classifier(sp["train"], sp["val"], tc)
    oc = config.optimizer_config()
    stab = config.stability_config()
    train = build_examples(model, sp["train"].samples[: config.optimizer_train_examples], None,
                           oc.method_weights, stab, config.optimizer_n_loss)
    test = build_examples(model, sp["test"].samples, None, oc.method_weights, stab, 0)
    opt, _ = train_optimizer(train, config.loss_weights(), oc)
    phi = explain(opt, np.stack([e.stacked for e in test]), np.stack([e.mask for e in test]), oc, seed=seed)
    label = config.optimizer_kind.upper()
    explanations = method_explanations(test, phi, [np.zeros((0, SEQ_LEN))] * len(test), oc.method_weights, label)
    auc = {name: float(np.mean([recovery_auc(p, e) for p, e in zip(phis, test)]))
           for name, (phis, _) in explanations.items()}
    sel = emb.threshold_select(emb.pca_top8(phi), sp["test"], config.pca_tau)
    base = emb.threshold_select(emb.pca_top8(explanations["Weighted"][0]), sp["test"], config.pca_tau)
    return Replication(seed, auc, sel.top, sel.fractions, clf.accuracy(model, sp["test"]), base.top)
