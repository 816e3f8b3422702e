import sys

import pytest


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Datasets and trained models for the shipped default scenario (a few minutes)."""
    from hybridloc.pipeline import ExperimentConfig, generate_datasets, train_models

    cfg = ExperimentConfig()
    out = tmp_path_factory.mktemp("default")
    data = generate_datasets(cfg, out, seed=cfg.evaluation.seed)
    models = train_models(cfg, data, out / "models")
    return cfg, data, out / "models", models


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    card = getattr(mod, "SCORECARD", None)
    if card:
        terminalreporter.section("acceptance criteria")
        for n in sorted(card):
            terminalreporter.write_line(card[n])
