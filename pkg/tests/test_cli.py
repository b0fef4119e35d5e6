import pytest

from monoattr import cli
from monoattr import pipeline as P
from monoattr.cohort import ConfigError


def test_show_config_lists_every_key(capsys):
    assert cli.main(["show-config", "optimizer.steps=7"]) == 0
    out = capsys.readouterr().out
    assert "optimizer.steps = 7\n" in out
    assert "loss.l2 = 0.3\n" in out and "seed = 1\n" in out
    assert P.load_config(None, out.splitlines()) == P.load_config(None, ["optimizer.steps=7"])


def test_config_file_with_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nseed = 3\n\nsae.variant = gated  # trailing note\n")
    cfg = P.load_config(path, ["seed=4"])
    assert cfg.seed == 4 and cfg.sae_variant == "gated"


@pytest.mark.parametrize("override", ["optimizer.stepz=3", "steps=3", "seed=abc", "task=four_class",
                                      "sae.variant=dense", "export.fraction=0", "no equals sign"])
def test_bad_config_exits_2(override, capsys):
    assert cli.main(["show-config", override]) == 2
    assert capsys.readouterr().err.startswith("error [config]")


def test_unknown_key_raises():
    with pytest.raises(ConfigError, match="unknown config key"):
        P.parse_settings(["optimizer.lr = 1", "loss.l9 = 2"])


def test_generate_stage(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["generate", f"output_dir={out}", "n_samples=40"]) == 0
    assert (out / "iid" / "cohort.csv").exists()
    assert (out / "iid" / "resolved_config.txt").read_text() == P.load_config(
        None, [f"output_dir={out}", "n_samples=40"]).to_text()
    assert capsys.readouterr().out.strip() == str(out / "iid")


def test_stage_without_inputs_exits_1(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train-classifier", f"output_dir={out}"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error [train-classifier]") and "generate" in err
    assert (out / "iid" / "error.log").read_text().startswith("stage: train-classifier")


def test_ood_needs_iid_checkpoints(tmp_path):
    cfg = P.load_config(None, [f"output_dir={tmp_path}", "distribution=ood"])
    with pytest.raises(P.StageError) as info:
        P.run_stage(cfg, "attribute")
    assert isinstance(info.value.cause, P.PreconditionError)


def test_ood_refuses_training_stage(tmp_path):
    cfg = P.load_config(None, [f"output_dir={tmp_path}", "distribution=ood"])
    with pytest.raises(P.PreconditionError, match="IID"):
        P.STAGES["train-classifier"](cfg)
