from __future__ import annotations

import json

import numpy as np
import pytest

from wsirisk.explain import (
    Heatmap, blue_red, cam_batch, cam_from_maps, grad_cam, occlude_top, overlay, render_overlay, upsample,
)
from wsirisk.nn_core import Network, NetworkConfig
from wsirisk.slide_core import PatchRef, load_slide


def small_net(seed=0):
    return Network.init(NetworkConfig(input_size=32, stages=[(4, 3, 2), (6, 3, 2)], num_classes=3, embed_dim=0), seed)


def test_cam_from_maps_hand_computed():
    # one channel, identity-like head: gradient is uniform 0.25 on a 2x2 map
    a = np.array([[[1.0, -2.0], [3.0, 0.5]]])
    g = np.full((1, 2, 2), 0.25)
    cam = cam_from_maps(a, g)
    # weight 0.25 -> 0.25 * a, ReLU -> [0.25, 0, 0.75, 0.125], max-normalised by 0.75
    assert np.allclose(cam, [[1 / 3, 0.0], [1.0, 1 / 6]])


def test_cam_from_maps_two_channels():
    a = np.array([[[1.0, 0.0], [0.0, 0.0]], [[0.0, 2.0], [0.0, 0.0]]])
    g = np.stack([np.full((2, 2), 1.0), np.full((2, 2), -1.0)])
    assert np.allclose(cam_from_maps(a, g), [[1.0, 0.0], [0.0, 0.0]])


def test_zero_features_give_zero_map():
    assert not cam_from_maps(np.zeros((3, 2, 2)), np.ones((3, 2, 2))).any()


def test_grad_cam_shape_range_and_errors():
    net = small_net()
    patch = np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    hm = grad_cam(net, patch, 2)
    assert hm.shape == (net.config.feature_size,) * 2
    assert 0.0 <= hm.values.min() and hm.values.max() <= 1.0
    assert hm.values.max() in (0.0, 1.0)
    with pytest.raises(ValueError):
        grad_cam(net, patch, 3)
    with pytest.raises(ValueError):
        grad_cam(net, patch, -1)
    again = grad_cam(net, patch, 2)
    assert np.array_equal(hm.values, again.values)


def test_grad_cam_equals_weighted_feature_sum():
    net = small_net(1)
    patch = np.random.default_rng(1).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    fp = net.forward(patch[None].astype(np.float32) / 255)
    a = fp.features[0].astype(np.float64)
    cam = np.maximum(a @ net.params["cls.w"][:, 0].astype(np.float64), 0)
    expected = cam / cam.max() if cam.max() > 0 else cam
    assert np.allclose(grad_cam(net, patch, 0).values, expected, atol=1e-5)


def test_colormap_endpoints_and_overlay():
    assert blue_red(np.array([0.0, 1.0])).tolist() == [[0, 0, 255], [255, 0, 0]]
    patch = np.full((8, 8, 3), 100, dtype=np.uint8)
    out = overlay(patch, np.zeros((2, 2)))
    assert (out == np.array([60, 60, 162], dtype=np.uint8)).all()  # 0.6*100 + 0.4*(0, 0, 255)
    red = overlay(patch, np.ones((2, 2)), opacity=1.0)
    assert (red == np.array([255, 0, 0])).all()


def test_upsample_constant_stays_constant():
    up = upsample(np.full((4, 4), 0.7), (16, 16))
    assert up.shape == (16, 16)
    assert np.ptp(up) == 0 and up[0, 0] == pytest.approx(0.7, abs=1e-6)


def test_render_overlay_writes_png(tmp_path):
    patch = np.zeros((16, 16, 3), dtype=np.uint8)
    path = render_overlay(patch, Heatmap(np.eye(2), 0), tmp_path / "x" / "o.png")
    assert load_slide(path).shape == (16, 16, 3)


def test_occlude_top_decile():
    patch = np.zeros((10, 10, 3), dtype=np.uint8)
    values = np.zeros((10, 10))
    values[0, :] = 1.0
    out = occlude_top(patch, Heatmap(values, 0), (200, 200, 200))
    assert (out[0] == 200).all() and (out[1:] == 0).all()
    assert np.array_equal(occlude_top(patch, Heatmap(np.zeros((2, 2)), 0), (9, 9, 9)), patch)


def test_cam_batch_index(tmp_path):
    net = small_net()
    rng = np.random.default_rng(3)
    items = []
    for i in range(3):
        x = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        items.append((PatchRef("s", 32 * i, 0, 32), x, x))
    index = cam_batch(net, items, tmp_path)
    assert len(index) == 3
    assert json.loads((tmp_path / "index.json").read_text()) == index
    assert all((tmp_path / v).exists() for v in index.values())
