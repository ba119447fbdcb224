import pytest

from vidcustom.backbone import build_backbone
from vidcustom.config import RunConfig


def tiny_config(**kw):
    """A model small enough for sub-second training steps."""
    base = dict(base_channels=16, channel_multipliers=(1,), attn_heads=2, text_dim=16, cond_dim=8, frames=4,
                ti_iterations=3, id_iterations=3, motion_iterations=3, analysis_iterations=3, probe_samples=4,
                ti_lr=1e-2, id_lr=1e-2, motion_lr=1e-2, analysis_lr=1e-2, sample_steps=3)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_backbone(tiny_cfg):
    return build_backbone(tiny_cfg, base=None)


ACCEPTANCE = []


def record(label, ok, detail, gating=True):
    """Log one acceptance line; non-gating misses are reported as WARN."""
    status = "PASS" if ok else ("FAIL" if gating else "WARN")
    line = f"{status}  {label}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
