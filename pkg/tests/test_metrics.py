import math

import numpy as np
import pytest

from vidcustom.metrics import (
    RandomProjectionProvider, aggregate, clip_i, clip_t, cosine, default_providers, dino_i, evaluate_run,
    evaluate_video, format_report, temporal_consistency,
)
from vidcustom.storage import save_tensor


class TableProvider:
    """Frames are keys into a table of hand-built vectors."""

    name = "table"

    def __init__(self, table, text=None):
        self.table = table
        self.text = text

    def image_embed(self, frame):
        return np.asarray(self.table[frame], dtype=np.float64)

    def text_embed(self, prompt):
        return np.asarray(self.text, dtype=np.float64)


def unit_at(c):
    """Unit vector whose cosine with e0 is c."""
    return [c, math.sqrt(1 - c * c)]


def test_clip_t_hand_vectors():
    p = TableProvider({"a": unit_at(0.2), "b": unit_at(0.6)}, text=[1.0, 0.0])
    assert abs(clip_t(["a", "b"], "x", p) - 0.4) <= 1e-9
    same = TableProvider({"a": [1.0, 0.0]}, text=[1.0, 0.0])
    assert clip_t(["a"], "x", same) == pytest.approx(1.0)
    ortho = TableProvider({"a": [0.0, 1.0]}, text=[1.0, 0.0])
    assert clip_t(["a"], "x", ortho) == pytest.approx(0.0)


def test_clip_i_hand_vectors():
    p = TableProvider({"f": [1.0, 0.0], "r0": [0.0, 1.0], "r1": [1.0, 0.0]})
    assert abs(clip_i(["f"], ["r0", "r1"], p) - 0.5) <= 1e-9
    assert clip_i(["f"], ["r1", "r0"], p) == clip_i(["f"], ["r0", "r1"], p)
    with pytest.raises(ValueError):
        clip_i(["f"], [], p)
    with pytest.raises(ValueError):
        dino_i(["f"], [], p)


def test_temporal_consistency_hand_vectors():
    # f0 . f1 = 0.9 and f1 . f2 = 0.7 with all three unit vectors in a plane
    a0, a1 = math.acos(0.9), math.acos(0.7)
    p = TableProvider({0: [1.0, 0.0], 1: [math.cos(a0), math.sin(a0)], 2: [math.cos(a0 + a1), math.sin(a0 + a1)]})
    assert abs(temporal_consistency([0, 1, 2], p) - 0.8) <= 1e-9
    assert temporal_consistency([2, 1, 0], p) == temporal_consistency([0, 1, 2], p)
    alt = TableProvider({0: [1.0, 0.0], 1: [0.0, 1.0]})
    assert temporal_consistency([0, 1, 0, 1], alt) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        temporal_consistency([0], p)


def test_zero_embedding_is_an_error():
    with pytest.raises(ValueError):
        cosine([0.0, 0.0], [1.0, 0.0])


def test_random_projection_provider_unit_and_deterministic():
    p, q = RandomProjectionProvider(seed=3), RandomProjectionProvider(seed=3)
    frame = np.random.default_rng(0).standard_normal((8, 8, 4))
    e = p.image_embed(frame)
    assert abs(np.linalg.norm(e) - 1) <= 1e-6
    assert np.array_equal(e, q.image_embed(frame))
    t = p.text_embed("a red dog")
    assert abs(np.linalg.norm(t) - 1) <= 1e-6 and np.array_equal(t, q.text_embed("a red dog"))


def test_metrics_bounded_and_dino_differs():
    rng = np.random.default_rng(1)
    frames, refs = rng.standard_normal((4, 8, 8, 4)), rng.standard_normal((2, 8, 8, 4))
    prov = default_providers()
    rec = evaluate_video("v", frames, "a dog", refs, prov)
    for v in (rec.clip_t, rec.clip_i, rec.dino_i, rec.temporal_consistency):
        assert -1 <= v <= 1
    assert rec.dino_i != rec.clip_i
    assert dino_i(frames, refs, prov["clip"]) == rec.clip_i
    assert clip_t(frames[::-1], "a dog", prov["clip"]) == pytest.approx(rec.clip_t, abs=1e-12)


def test_evaluate_run_report(tmp_path):
    import torch

    vids, refs = tmp_path / "videos", tmp_path / "refs"
    vids.mkdir()
    refs.mkdir()
    g = torch.Generator().manual_seed(0)
    save_tensor(vids / "v1.tensor", torch.randn(4, 8, 8, 4, generator=g))
    save_tensor(refs / "r0.tensor", torch.randn(8, 8, 4, generator=g))
    prompts = tmp_path / "prompts.txt"
    prompts.write_text("v1\ta dog running\n")
    records, agg = evaluate_run(vids, prompts, refs)
    assert len(records) == 1
    assert agg == aggregate(records) and agg["clip_t"] == records[0].clip_t
    r1 = format_report(records, agg, default_providers())
    r2 = format_report(*evaluate_run(vids, prompts, refs), default_providers())
    assert r1 == r2
    prompts.write_text("other\tx\n")
    with pytest.raises(ValueError, match="no prompt"):
        evaluate_run(vids, prompts, refs)
