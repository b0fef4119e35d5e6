import pytest

from monoattr import classifier as clf
from monoattr.cohort import generate_cohort, split_cohort


@pytest.fixture(scope="session")
def splits():
    return split_cohort(generate_cohort(1, 200, "binary", "iid"), 1)


@pytest.fixture(scope="session")
def trained(splits):
    """Desk-scale classifier on the seed-1 binary cohort, with its training metrics."""
    return clf.train_classifier(splits["train"], splits["val"], clf.TrainConfig(seed=1))


@pytest.fixture(scope="session")
def teo_examples(trained, splits):
    """Optimizer training examples from the seed-1 classifier, built as the pipeline does."""
    from monoattr.pipeline import RunConfig, build_examples

    cfg = RunConfig(seed=1)
    model, _ = trained
    return build_examples(model, splits["train"].samples[: cfg.optimizer_train_examples], None,
                          cfg.optimizer_config().method_weights, cfg.stability_config(), cfg.optimizer_n_loss)


def pytest_terminal_summary(terminalreporter):
    import sys

    acc = sys.modules.get("test_acceptance")
    if acc is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        if n not in acc.RESULTS:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN")
            continue
        name, ok, note = acc.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}  ({note})")
