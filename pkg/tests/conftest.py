import numpy as np
import pytest
import torch

from pointtrack.model import ModelConfig, TrackerModel

torch.set_num_threads(1)

TINY = ModelConfig(d=8, k=4, S=2, fnet_width=8, fnet_blocks=1, radius=1, p=8, corr_hidden=16,
                   width=16, layers=1, heads=2, n_proxy=4, fourier_bands=2, max_time_len=16,
                   iters_train=2, iters_eval=2)


def tiny_model(seed=0, randomize_heads=True, **over):
    """Tiny tracker; heads get small random weights so deltas are non-trivial."""
    torch.manual_seed(seed)
    cfg = ModelConfig(**{**TINY.__dict__, **over})
    m = TrackerModel(cfg)
    if randomize_heads:
        with torch.no_grad():
            for head in (m.transformer.track_head, m.transformer.cv_head):
                head.weight.normal_(0, 0.1)
                head.bias.normal_(0, 0.1)
    return m.eval()


def random_queries(rng, n, T, H, W):
    t = rng.integers(0, T, size=n).astype(np.float32)
    xy = rng.uniform(0, [W - 1, H - 1], size=(n, 2)).astype(np.float32)
    return np.concatenate([t[:, None], xy], axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
