import warnings

import numpy as np
import pytest
import torch
from PIL import Image

import remseg.inference as inf
from helpers import tiny_net
from remseg.data import MaskSequence, VideoClip
from remseg.errors import ParameterError
from remseg.inference import (
    HIGHLIGHT,
    Segmenter,
    overlay,
    render_overlay,
    segment_video,
    segment_window,
    window_starts,
    write_masks,
)


@pytest.fixture
def net():
    return tiny_net(dtype=torch.float32).eval()


def _clip(n=4, size=(32, 32), seed=0):
    rng = np.random.default_rng(seed)
    return VideoClip(rng.random((n,) + size + (3,), dtype=np.float32))


@pytest.mark.parametrize(
    "n, window, overlap, expected",
    [(12, 8, 4, [0, 4]), (8, 8, 4, [0]), (3, 8, 4, [0]), (13, 8, 4, [0, 4, 5]), (10, 4, 0, [0, 4, 6]), (5, 1, 0, [0, 1, 2, 3, 4])],
)
def test_window_starts(n, window, overlap, expected):
    assert window_starts(n, window, overlap) == expected


@pytest.mark.parametrize("window, overlap", [(0, 0), (4, 4), (4, -1)])
def test_window_preconditions(window, overlap):
    with pytest.raises(ParameterError):
        window_starts(10, window, overlap)


def test_segment_window_shape_and_determinism(net, tiny_ae):
    clip = _clip()
    a = segment_window(net, tiny_ae, clip, "the red square")
    b = segment_window(net, tiny_ae, clip, "the red square")
    assert len(a) == len(clip) and a.size == clip.size
    assert np.array_equal(a.masks, b.masks)
    assert a.masks.dtype == np.uint8


def test_long_window_warns(net, tiny_ae):
    with pytest.warns(UserWarning):
        segment_window(net, tiny_ae, _clip(6), "x", window=4)


def test_short_clip_equals_single_window(net, tiny_ae):
    clip = _clip(5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = segment_video(net, tiny_ae, clip, "the blue circle", window=8, overlap=4)
    b = segment_window(net, tiny_ae, clip, "the blue circle")
    assert np.array_equal(a.masks, b.masks)


def test_constant_clip_chunked_equals_unchunked(tiny_ae):
    per_frame = tiny_net(dtype=torch.float32, temporal=False).eval()
    clip = VideoClip(np.full((10, 32, 32, 3), 0.3, dtype=np.float32))
    chunked = segment_video(per_frame, tiny_ae, clip, "the hat", window=4, overlap=2)
    whole = segment_video(per_frame, tiny_ae, clip, "the hat", window=10)
    assert np.array_equal(chunked.masks, whole.masks)


def _fake_soft(values_by_start):
    def soft(net, ae, frames, expression, decoder):
        v = values_by_start.pop(0)
        return torch.full((len(frames), 3, 2, 2), v)
    return soft


def test_threshold_once_after_averaging(monkeypatch):
    # window 0 says 0.4 (background alone), window 1 says 0.7; frames 4-7 average to 0.55 -> foreground
    monkeypatch.setattr(inf, "_soft_window", _fake_soft([0.4, 0.7]))
    clip = VideoClip(np.zeros((12, 2, 2, 3), dtype=np.float32))
    out = segment_video(None, None, clip, "x", window=8, overlap=4).masks
    assert out[:4].sum() == 0
    assert out[4:].all()


@pytest.mark.parametrize("n, window, overlap", [(1, 1, 0), (7, 3, 1), (12, 8, 4), (20, 8, 7), (9, 8, 0)])
def test_output_length_matches_clip(monkeypatch, n, window, overlap):
    starts = window_starts(n, window, overlap)
    monkeypatch.setattr(inf, "_soft_window", _fake_soft([0.6] * len(starts)))
    clip = VideoClip(np.zeros((n, 2, 2, 3), dtype=np.float32))
    out = segment_video(None, None, clip, "x", window=window, overlap=overlap)
    assert len(out) == n and out.masks.all()


def test_segmenter_restores_resolution(net, tiny_ae):
    seg = Segmenter(net, tiny_ae, window=4)
    assert seg.working_size((30, 45)) == (32, 48)
    out = seg(_clip(3, (30, 45)), "the red square")
    assert out.masks.shape == (3, 30, 45)


def test_segmenter_cnn_needs_head(net, tiny_ae):
    with pytest.raises(ParameterError):
        Segmenter(net, tiny_ae, decoder="cnn")


def test_cnn_path_runs(tiny_ae):
    net = tiny_net(dtype=torch.float32, cnn_head=True).eval()
    out = Segmenter(net, tiny_ae, window=4, decoder="cnn")(_clip(4), "the hat")
    assert out.masks.shape == (4, 32, 32)


def test_overlay_formula():
    frame = np.random.default_rng(0).random((4, 5, 3), dtype=np.float32)
    mask = np.zeros((4, 5), dtype=np.uint8)
    mask[1:3, 2:4] = 1
    out = overlay(frame, mask)
    fg = mask.astype(bool)
    np.testing.assert_allclose(out[fg], 0.5 * frame[fg] + 0.5 * np.array(HIGHLIGHT), rtol=0, atol=1e-7)
    assert np.array_equal(out[~fg], frame[~fg])


def test_overlay_empty_and_full():
    frame = np.random.default_rng(1).random((4, 5, 3), dtype=np.float32)
    assert np.array_equal(overlay(frame, np.zeros((4, 5))), frame)
    full = overlay(frame, np.ones((4, 5)))
    assert np.all(full != frame)


def test_render_overlay_and_write_masks(tmp_path):
    clip = _clip(2, (8, 8))
    masks = MaskSequence(np.ones((2, 8, 8), dtype=np.uint8))
    paths = render_overlay(clip, masks, tmp_path / "ov")
    assert [p.name for p in paths] == ["00000.png", "00001.png"]
    written = write_masks(masks, tmp_path / "m", "clip_a", 3)
    assert written[0] == tmp_path / "m" / "clip_a" / "3" / "00000.png"
    assert np.unique(np.array(Image.open(written[1]))).tolist() == [255]
    with pytest.raises(ParameterError):
        render_overlay(clip, MaskSequence(np.ones((3, 8, 8), dtype=np.uint8)), tmp_path / "bad")
