import numpy as np
import pytest
import torch

from yieldmap.decoder import DecoderConfig
from yieldmap.encoder import EncoderConfig
from yieldmap.head import HeadConfig
from yieldmap.model import ModelConfig, YieldModel


def tiny_config(mode="PER_TIMESTEP", frames=2, chans=3, dropout=0.0, **enc) -> ModelConfig:
    """D=8, L=2, 4x4 token grid, fpn 8."""
    kw = dict(img_size=16, num_frames=frames, in_chans=chans, patch_size=4, embed_dim=8,
              depth=2, num_heads=2, tap_layers=(1, 1, 2, 2), mode=mode)
    kw.update(enc)
    return ModelConfig(
        encoder=EncoderConfig(**kw),
        decoder=DecoderConfig(fpn_channels=8),
        head=HeadConfig(dropout=dropout),
    )


def tiny_input(cfg: ModelConfig, batch=2, seed=0, dtype=torch.float32):
    e = cfg.encoder
    g = torch.Generator().manual_seed(seed)
    if e.mode.value == "PER_TIMESTEP":
        shape = (batch, e.num_frames, e.in_chans, e.img_size, e.img_size)
    else:
        shape = (batch, e.num_frames * e.in_chans, e.img_size, e.img_size)
    return torch.randn(shape, generator=g, dtype=dtype)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return YieldModel(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_gen_params(size=16, **kw):
    from yieldmap.chipstore import GenParams

    return GenParams(H=size, W=size, smoothing_radius=2.0, **kw)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four chips per year, 2018-2019 train, 2020 val, 16x16."""
    from yieldmap.chipstore import generate_dataset

    root = tmp_path_factory.mktemp("tiny_data")
    return generate_dataset(root, 4, (2018, 2019, 2020), (2020,), tiny_gen_params(), seed=3)


# ---------------------------------------------------------------------------
# Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        _CRITERIA[self.number] = (self.title, ok, detail)
        return False


@pytest.fixture(scope="session")
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
