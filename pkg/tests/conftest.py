import sys
import time
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from remseg.codec import AETrainConfig, Autoencoder, train_toy_autoencoder  # noqa: E402
from remseg.synth import SynthSpec, synth_dataset  # noqa: E402

AE_COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
AE_STEPS = 3000


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def ae_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("ae_data")
    train = synth_dataset(SynthSpec(n_clips=24, objects_per_clip=2, colors=AE_COLORS), root / "train", seed=1)
    held = synth_dataset(
        SynthSpec(n_clips=6, objects_per_clip=2, refer_all=True, colors=AE_COLORS, prefix="held"),
        root / "held",
        seed=2,
    )
    return train, held


@pytest.fixture(scope="session")
def trained_ae(ae_data):
    """The toy autoencoder every training-based test shares; trained once per session."""
    t0 = time.perf_counter()
    ae = train_toy_autoencoder(ae_data[0], AETrainConfig(steps=AE_STEPS, seed=0))
    ae.train_seconds = time.perf_counter() - t0
    return ae


@pytest.fixture
def tiny_ae():
    torch.manual_seed(0)
    return Autoencoder(4, (8, 8, 8)).freeze()


ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion: ``criterion(tag, passed, detail)``."""

    def record(tag: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} {tag}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
