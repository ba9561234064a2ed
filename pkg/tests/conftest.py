from dataclasses import replace

import pytest

from igvlab.config import default_config, save_config


def tiny(config=None, epochs=2):
    """Seconds-scale config for CLI and trainer tests."""
    config = config or default_config()
    return replace(
        config,
        splits=replace(config.splits, n_train=48, n_val=16, n_test=16),
        model=replace(config.model, d=8, d_prime=4, fusion_width=4, fusion_rank=2),
        optim=replace(config.optim, epochs=epochs, batch_size=16, lr=1e-3),
        igv=replace(config.igv, bank_capacity=64),
        run=replace(config.run, seeds=(0, 1)),
    )


@pytest.fixture
def tiny_config():
    return tiny()


@pytest.fixture
def config_file(tmp_path, monkeypatch, tiny_config):
    monkeypatch.setenv("IGVLAB_OUTPUT_ROOT", str(tmp_path))
    path = tmp_path / "run.yaml"
    save_config(tiny_config, path)
    return path


# acceptance outcomes, keyed by criterion number: (passed, detail)
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
