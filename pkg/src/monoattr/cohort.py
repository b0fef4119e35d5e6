"""Synthetic pseudo-clinical text cohorts with nine tagged subgroups.

Each sample is rendered from a fixed nine-section template, so every
subgroup occupies the same token span in every sample.  Labels are planted
through signal words in a few designated sections; the positions of those
words form the ground-truth attribution mask.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

SEQ_LEN = 512
VOCAB_SIZE = 1024
CLS_ID, PAD_ID, UNK_ID = 0, 1, 2
CLS_TEXT = "[CLS]"


class ConfigError(ValueError):
    pass


class CohortParseError(ValueError):
    pass


class CohortValidationError(ValueError):
    pass


class EmptyCohortError(ValueError):
    pass


class SubgroupTag(str, Enum):
    DEM = "DEM"
    VS = "VS"
    CDT = "CDT"
    CCT = "CCT"
    AVLT1 = "AVLT1"
    CFA = "CFA"
    AVLT2 = "AVLT2"
    ANART = "ANART"
    FAQ = "FAQ"


TAGS = [t.value for t in SubgroupTag]

CLASS_SETS = {"binary": 2, "three_class": 3}

# Section templates.  "#" is a number slot, "~" a free filler word and
# "!" a planted signal slot.  IID and OOD share slot layout and length.
_TEMPLATES_IID = {
    "DEM": "demographics age # sex ~ education # years",
    "VS": "vitals pressure # over # pulse # weight #",
    "CDT": "clock drawing score # result !",
    "CCT": "clock copying score # result ~",
    "AVLT1": "learning trial one recall # words !",
    "CFA": "fluency animals named # in # seconds",
    "AVLT2": "learning trial two recall # words delayed #",
    "ANART": "reading errors # estimate #",
    "FAQ": "functional activities finances ! shopping ! cooking #",
}
_TEMPLATES_OOD = {
    "DEM": "profile years_old # gender ~ schooling # total",
    "VS": "signs systolic # diastolic # heart # mass #",
    "CDT": "drawn clock points # outcome !",
    "CCT": "copied clock points # outcome ~",
    "AVLT1": "memory list first recalled # items !",
    "CFA": "naming animal count # within # secs",
    "AVLT2": "memory list second recalled # items later #",
    "ANART": "lexical mistakes # iq #",
    "FAQ": "daily living money ! errands ! meals #",
}

# Designated signal subgroups (ground truth for attribution recovery).
SIGNAL_TAGS = ("CDT", "AVLT1", "FAQ")

SIGNAL_WORDS = (
    ("normal", "intact", "independent", "unremarkable"),
    ("impaired", "abnormal", "dependent", "declined"),
    ("reduced", "mild", "partial", "assisted"),
)

_NUMBERS = [str(i) for i in range(200)]


def _build_vocab(seed: int = 0) -> list[str]:
    words = ["[CLS]", "[PAD]", "[UNK]"]
    for templates in (_TEMPLATES_IID, _TEMPLATES_OOD):
        for text in templates.values():
            for w in text.split():
                if w not in "#~!" and w not in words:
                    words.append(w)
    for group in SIGNAL_WORDS:
        words.extend(w for w in group if w not in words)
    words.extend(n for n in _NUMBERS if n not in words)
    rng = np.random.default_rng(seed)
    consonants, vowels = "bdfgklmnprstvz", "aeiou"
    seen = set(words)
    while len(words) < VOCAB_SIZE:
        n = int(rng.integers(2, 4))
        w = "".join(consonants[rng.integers(len(consonants))] + vowels[rng.integers(len(vowels))]
                    for _ in range(n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


VOCAB: list[str] = _build_vocab()
WORD_TO_ID: dict[str, int] = {w: i for i, w in enumerate(VOCAB)}
VOCAB_HASH = hashlib.sha256("\n".join(VOCAB).encode()).hexdigest()[:16]
FILLER_IDS = [i for i, w in enumerate(VOCAB) if i >= WORD_TO_ID[_NUMBERS[-1]] + 1]


def tokenize(text: str) -> list[int]:
    """Whitespace word ids with a leading CLS, padded/truncated to 512."""
    words = text.split()
    if words and words[0] == CLS_TEXT:
        words = words[1:]
    ids = [CLS_ID] + [WORD_TO_ID.get(w, UNK_ID) for w in words[: SEQ_LEN - 1]]
    return ids + [PAD_ID] * (SEQ_LEN - len(ids))


@dataclass(frozen=True)
class Sample:
    tokens: tuple[int, ...]
    chars: str
    label: int
    subgroup_spans: tuple[tuple[str, int, int], ...]
    signal_positions: tuple[int, ...] = ()

    @property
    def length(self) -> int:
        """Number of non-pad tokens (CLS included)."""
        return int(np.sum(np.asarray(self.tokens) != PAD_ID))

    def tag_of(self) -> list[str | None]:
        tags: list[str | None] = [None] * SEQ_LEN
        for tag, start, end in self.subgroup_spans:
            for i in range(start, end):
                tags[i] = tag
        return tags

    def signal_mask(self) -> np.ndarray:
        mask = np.zeros(SEQ_LEN, dtype=bool)
        mask[list(self.signal_positions)] = True
        return mask


@dataclass(frozen=True)
class Cohort:
    samples: tuple[Sample, ...]
    distribution: str = "iid"
    class_set: str = "binary"
    split: str | None = None
    seed: int | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_classes(self) -> int:
        return CLASS_SETS[self.class_set]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def token_matrix(self) -> np.ndarray:
        return np.array([s.tokens for s in self.samples], dtype=np.int64)

    def subset(self, idx, split: str | None = None) -> "Cohort":
        return Cohort(tuple(self.samples[i] for i in idx), self.distribution, self.class_set,
                      split, self.seed)

    def metadata(self) -> dict:
        return {"seed": self.seed, "n": len(self), "class_set": self.class_set,
                "distribution": self.distribution, "vocab_hash": VOCAB_HASH}


def _render(label: int, rng: np.random.Generator, ood: bool):
    templates = _TEMPLATES_OOD if ood else _TEMPLATES_IID
    words: list[str] = []
    spans: list[tuple[str, int, int]] = []
    signal: list[int] = []
    # OOD shifts the numeric range and the filler-word pool.
    lo, hi = (60, 200) if ood else (0, 140)
    pool = FILLER_IDS[len(FILLER_IDS) // 2:] if ood else FILLER_IDS[: len(FILLER_IDS) // 2]
    for tag in TAGS:
        start = len(words) + 1
        for slot in templates[tag].split():
            if slot == "#":
                words.append(_NUMBERS[int(rng.integers(lo, hi))])
            elif slot == "~":
                words.append(VOCAB[pool[int(rng.integers(len(pool)))]])
            elif slot == "!":
                signal.append(len(words) + 1)
                group = SIGNAL_WORDS[label]
                words.append(group[int(rng.integers(len(group)))])
            else:
                words.append(slot)
        spans.append((tag, start, len(words) + 1))
    chars = " ".join([CLS_TEXT] + words)
    return Sample(tuple(tokenize(chars)), chars, label, tuple(spans), tuple(signal))


def generate_cohort(seed: int, n_samples: int, class_set: str = "binary",
                    distribution: str = "iid") -> Cohort:
    if class_set not in CLASS_SETS:
        raise ConfigError(f"unknown class_set {class_set!r}")
    if distribution not in ("iid", "ood"):
        raise ConfigError(f"unknown distribution {distribution!r}")
    k = CLASS_SETS[class_set]
    if n_samples < 10 * k:
        raise ConfigError(f"need at least 10 samples per class ({10 * k}), got {n_samples}")
    rng = np.random.default_rng([seed, 0 if distribution == "iid" else 1, k])
    labels = np.arange(n_samples) % k
    rng.shuffle(labels)
    samples = tuple(_render(int(y), rng, distribution == "ood") for y in labels)
    return Cohort(samples, distribution, class_set, None, seed)


def split_cohort(cohort: Cohort, seed: int = 0) -> dict[str, Cohort]:
    """Stratified 20% test hold-out, then 80/20 train/validation."""
    rng = np.random.default_rng([seed, 17])
    parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    labels = cohort.labels
    for c in range(cohort.n_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(0.2 * len(idx)))
        rest = idx[n_test:]
        n_val = int(round(0.2 * len(rest)))
        parts["test"].extend(idx[:n_test].tolist())
        parts["val"].extend(rest[:n_val].tolist())
        parts["train"].extend(rest[n_val:].tolist())
    return {name: cohort.subset(sorted(ix), name) for name, ix in parts.items()}


# -- CSV ----------------------------------------------------------------------


def _format_spans(spans) -> str:
    return ";".join(f"{t}:{s}-{e}" for t, s, e in spans)


def _parse_spans(text: str, row: int) -> tuple[tuple[str, int, int], ...]:
    spans = []
    for part in filter(None, text.split(";")):
        try:
            tag, rng = part.split(":")
            start, end = (int(v) for v in rng.split("-"))
        except ValueError as exc:
            raise CohortParseError(f"row {row}: malformed span {part!r}") from exc
        if tag not in TAGS:
            raise CohortValidationError(f"row {row}: unknown subgroup tag {tag!r}")
        spans.append((tag, start, end))
    prev = 1
    for tag, start, end in spans:
        if start < prev or end <= start or end > SEQ_LEN:
            raise CohortValidationError(f"row {row}: span {tag}:{start}-{end} out of order or range")
        prev = end
    return tuple(spans)


def export_csv(cohort: Cohort, path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["char", "label", "subgroup_spans", "signal_positions"])
    for s in cohort.samples:
        w.writerow([s.chars, s.label, _format_spans(s.subgroup_spans),
                    " ".join(map(str, s.signal_positions))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    meta = cohort.metadata() | {"split": cohort.split}
    Path(path).with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def ingest_csv(path: str | Path) -> Cohort:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"char", "label", "subgroup_spans"} - set(reader.fieldnames or [])
        if missing:
            raise CohortParseError(f"{path}: missing columns {sorted(missing)}")
        samples = []
        for row_no, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
            except ValueError as exc:
                raise CohortParseError(f"row {row_no}: bad label {row['label']!r}") from exc
            spans = _parse_spans(row["subgroup_spans"], row_no)
            signal = tuple(int(v) for v in (row.get("signal_positions") or "").split())
            chars = row["char"]
            samples.append(Sample(tuple(tokenize(chars)), chars, label, spans, signal))
    if not samples:
        raise EmptyCohortError(f"{path}: no rows")
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    class_set = meta.get("class_set") or ("three_class" if max(s.label for s in samples) > 1 else "binary")
    return Cohort(tuple(samples), meta.get("distribution", "iid"), class_set,
                  meta.get("split"), meta.get("seed"))


def token_histogram(cohort: Cohort) -> np.ndarray:
    counts = np.bincount(cohort.token_matrix.reshape(-1), minlength=VOCAB_SIZE).astype(np.float64)
    counts[PAD_ID] = 0.0
    return counts / counts.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = 1e-9) -> float:
    p = (p + eps) / (p + eps).sum()
    q = (q + eps) / (q + eps).sum()
    return float(np.sum(p * np.log(p / q)))
