import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mmprompt.backbone import BackboneConfig, ModalityEncoderConfig  # noqa: E402
from mmprompt.data import ModalitySpec, SyntheticConfig, generate_synthetic  # noqa: E402

TINY_BB = BackboneConfig(n_layers=3, d_t=32, n_heads=2, vocab=64, max_len=16, seed=1)
TINY_ENCODERS = [ModalityEncoderConfig("a", d_m=8), ModalityEncoderConfig("v", d_m=8)]


def tiny_synthetic(seed=0, **kw):
    base = dict(n_train=16, n_val=8, n_test=8, l_t=6, planted_offset=3,
                modalities={"a": ModalitySpec(True, 6, 8), "v": ModalitySpec(False, 5, 8)}, seed=seed)
    base.update(kw)
    return SyntheticConfig(**base)


@pytest.fixture
def tiny_splits():
    return generate_synthetic(tiny_synthetic(), TINY_BB)


_CRITERIA: dict = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    _CRITERIA[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
