import pytest

from trainprove.bench import BenchmarkConfig, GridConfig, WorldConfig
from trainprove.learner import TrainConfig
from trainprove.verifier import VerificationConfig


def tiny_config(**changes) -> BenchmarkConfig:
    """A two-generator world small enough to sweep in a few seconds."""
    base = dict(
        world=WorldConfig(generators=["gen-a", "gen-b"], include_real=True),
        grid=GridConfig(hidden=[0, 16], epochs=6, n_per_class=40),
        verification=VerificationConfig(
            shadow_n_per_class=80, val_n_per_class=30, shadow_hidden=16,
            shadow_train=TrainConfig(epochs=8, batch_size=64, learning_rate=0.1, weight_decay=1e-3),
        ),
        seeds=[0, 1],
        workers=1,
    )
    base.update(changes)
    return BenchmarkConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


# acceptance criteria report: criterion number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
