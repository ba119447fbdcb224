import numpy as np
import pytest
import torch
from PIL import Image

from vidcustom.data import (
    MotionDataset, SubjectDataset, ingest_motion, ingest_subject, latent_to_pixels, pixels_to_latent, read_frame,
    read_video, stride_indices,
)
from vidcustom.storage import save_tensor


def test_stride_indices():
    assert stride_indices(16, 8) == [0, 2, 4, 6, 8, 10, 12, 14]
    assert stride_indices(8, 8) == list(range(8))
    with pytest.raises(ValueError):
        stride_indices(4, 8)


def test_pixel_stub_round_trip():
    g = torch.Generator().manual_seed(0)
    lat = torch.rand(8, 8, 4, generator=g) * 2 - 1
    lat[..., 3] = lat[..., :3].mean(-1)
    px = latent_to_pixels(lat)
    assert px.shape == (16, 16, 3) and px.dtype == np.uint8
    back = pixels_to_latent(px, 4)
    assert (back - lat).abs().max() <= 1.0 / 127.5


def test_subject_dataset_prompt_rules():
    ds = SubjectDataset(torch.zeros(3, 1, 8, 8, 4), "dog")
    assert ds.prompt("s*") == "a photo of a s* dog"
    with pytest.raises(ValueError):
        SubjectDataset(torch.zeros(3, 1, 8, 8, 4), "dog", prompt_template="a {class_word}").prompt("s*")
    with pytest.raises(ValueError):
        SubjectDataset(torch.zeros(3, 2, 8, 8, 4), "dog")


def test_motion_dataset_validation():
    v = torch.zeros(8, 8, 8, 4)
    assert MotionDataset([v], ["a bear"]).mode == "single_video"
    assert MotionDataset([v, v], ["a", "b"]).mode == "multi_video"
    with pytest.raises(ValueError):
        MotionDataset([v], [" "])
    with pytest.raises(ValueError):
        MotionDataset([v, torch.zeros(4, 8, 8, 4)], ["a", "b"])
    with pytest.raises(ValueError):
        MotionDataset([], [])


def _png(path, value):
    Image.fromarray(np.full((16, 16, 3), value, dtype=np.uint8)).save(path)


def test_ingest_subject_images(tmp_path):
    for i in range(3):
        _png(tmp_path / f"img{i}.png", 60 * i)
    ds = ingest_subject(tmp_path, (8, 8), 4, "dog")
    assert ds.images.shape == (3, 1, 8, 8, 4) and ds.names == ["img0", "img1", "img2"]
    assert ds.images[0].min().item() == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        ingest_subject(tmp_path / "none", (8, 8), 4, "dog")


def test_read_frame_rejects_garbage(tmp_path):
    bad = tmp_path / "x.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(ValueError):
        read_frame(bad, (8, 8), 4)
    with pytest.raises(ValueError):
        read_frame(tmp_path / "x.txt", (8, 8), 4)


def test_ingest_motion_strides_long_clips(tmp_path):
    clip = torch.arange(16, dtype=torch.float32)[:, None, None, None].expand(16, 8, 8, 4).contiguous()
    save_tensor(tmp_path / "walk.tensor", clip)
    (tmp_path / "captions.txt").write_text("walk\ta bear walking\n")
    ds = ingest_motion(tmp_path, 8, (8, 8), 4)
    assert ds.videos[0][:, 0, 0, 0].tolist() == [0, 2, 4, 6, 8, 10, 12, 14]
    assert ds.captions == ["a bear walking"]


def test_ingest_motion_needs_captions(tmp_path):
    save_tensor(tmp_path / "walk.tensor", torch.zeros(8, 8, 8, 4))
    with pytest.raises(ValueError, match="caption"):
        ingest_motion(tmp_path, 8, (8, 8), 4)


def test_read_video_frame_directory(tmp_path):
    for i in range(4):
        _png(tmp_path / f"f{i:02d}.png", 50 * i)
    v = read_video(tmp_path, (8, 8), 4)
    assert v.shape == (4, 8, 8, 4)
