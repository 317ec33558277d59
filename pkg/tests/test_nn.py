import hashlib
import json
import os
import struct

import numpy as np
import pytest

from salcal.errors import CorruptCheckpoint, DimensionMismatch, HeadMismatch, ShapeMismatch, VersionMismatch
from salcal.losses import LossSpec
from salcal.nn import (
    Head,
    batch_msm,
    checkpoint_bytes,
    extract_msm,
    forward,
    load_checkpoint,
    load_checkpoint_bytes,
    loss_and_gradients,
    pack,
    predict,
    save_checkpoint,
    swap_head,
    tiny_cnn,
    unpack,
)
from oracles import (
    conv3x3_loops,
    dense_layer_loops,
    finite_difference_components,
    minmax_loops,
    relative_error,
    weighted_sum_loops,
)

DATA = os.path.join(os.path.dirname(__file__), "data")


def _batch(model, n=2, seed=0):
    return np.random.default_rng(seed).random((n, *model.input_dims, 3)).astype(np.float32)


def test_forward_matches_loop_oracle():
    m = tiny_cnn((8, 8), (2, 3), seed=1).astype(np.float64)
    m.head.offset, m.head.scale = 10.0, 2.0
    x = _batch(m, 1)[0].astype(np.float64)
    a = x
    for w, b in m.conv:
        z = np.maximum(conv3x3_loops(a, w, b), 0)
        a = np.array([[z[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean(axis=(0, 1)) for j in range(z.shape[1] // 2)]
                      for i in range(z.shape[0] // 2)])
    logit = dense_layer_loops(a.mean(axis=(0, 1)), m.head.weights, m.head.bias)
    fr = forward(m, x[None])
    np.testing.assert_allclose(fr.feature_maps[0], a, atol=1e-12)
    np.testing.assert_allclose(fr.prediction[0], 10.0 + 2.0 * logit, atol=1e-10)


def test_shapes_and_cam_dims():
    m = tiny_cnn()
    assert m.cam_dims == (8, 8)
    fr = forward(m, _batch(m, 3))
    assert fr.prediction.shape == (3, 1) and fr.feature_maps.shape == (3, 8, 8, 32)
    assert predict(m, _batch(m, 3)).shape == (3,)
    with pytest.raises(ShapeMismatch):
        forward(m, np.zeros((1, 32, 32, 3)))
    with pytest.raises(ShapeMismatch):
        tiny_cnn((20, 20))


def test_classifier_probabilities():
    m = tiny_cnn((16, 16), (4, 4), "classification", 5)
    p = predict(m, _batch(m, 4))
    assert p.shape == (4, 5)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_msm_matches_weighted_sum():
    m = tiny_cnn((16, 16), (4, 6), seed=2)
    fm = forward(m, _batch(m, 2)).feature_maps
    for a, s in zip(fm, batch_msm(fm, m.head)):
        oracle = minmax_loops(weighted_sum_loops(a.astype(np.float64), m.head.weights[:, 0].astype(np.float64)))
        np.testing.assert_allclose(s, oracle, atol=1e-9)
    single = extract_msm(fm[0], m.head)
    assert single.provenance == "model"
    np.testing.assert_allclose(single.values, batch_msm(fm, m.head)[0])


def test_msm_ignores_bias_and_output_affine():
    m = tiny_cnn((16, 16), (4, 6), seed=2)
    fm = forward(m, _batch(m, 2)).feature_maps
    before = batch_msm(fm, m.head)
    m.head.bias += 5
    m.head.offset, m.head.scale = 300.0, 80.0
    np.testing.assert_array_equal(batch_msm(fm, m.head), before)


def test_msm_needs_regression_head():
    m = tiny_cnn((16, 16), (4, 4), "classification", 3)
    fm = forward(m, _batch(m, 1)).feature_maps
    with pytest.raises(HeadMismatch):
        extract_msm(fm[0], m.head)


@pytest.mark.parametrize("spec", [LossSpec(), LossSpec.weighted(0.5), LossSpec.multiplied()])
def test_gradients_small_model(spec):
    m = tiny_cnn((8, 8), (2, 3), seed=4).astype(np.float64)
    m.head.offset, m.head.scale = 50.0, 20.0
    x = _batch(m, 2, seed=1).astype(np.float64)
    y = np.array([40.0, 75.0])
    hsms = np.random.default_rng(5).random((2, 2, 2))
    grads, lv, _ = loss_and_gradients(m, x, y, spec, hsms)
    d_m, d_c, valid = finite_difference_components(m, x, y, hsms)
    from salcal.losses import combine

    _, gm, gc = combine(spec, lv.saliency, lv.calorie)
    for name, g in grads.items():
        fd = gm * d_m[name] + gc * d_c[name]
        err = relative_error(g, fd, floor=1e-6)[valid[name]]
        assert err.max(initial=0) < 1e-4, name


def test_classification_gradients():
    m = tiny_cnn((8, 8), (2, 3), "classification", 3, seed=6).astype(np.float64)
    x = _batch(m, 3, seed=2).astype(np.float64)
    y = np.array([0, 2, 1])
    grads, lv, _ = loss_and_gradients(m, x, y, LossSpec("cross_entropy"))
    w = m.head.weights
    eps = 1e-6
    for idx in [(0, 0), (1, 2), (2, 1)]:
        old = w[idx]
        w[idx] = old + eps
        up = loss_and_gradients(m, x, y, LossSpec("cross_entropy"))[1].total
        w[idx] = old - eps
        dn = loss_and_gradients(m, x, y, LossSpec("cross_entropy"))[1].total
        w[idx] = old
        assert grads["head.weight"][idx] == pytest.approx((up - dn) / (2 * eps), rel=1e-5, abs=1e-9)


def test_swap_head_keeps_backbone():
    m = tiny_cnn((16, 16), (4, 8), "classification", 5, seed=3)
    out = swap_head(m, Head.regression(8, seed=1))
    assert out.backbone_checksum() == m.backbone_checksum()
    assert out.head.kind == "regression"
    for (w0, b0), (w1, b1) in zip(m.conv, out.conv):
        assert w0 is not w1 and np.array_equal(w0, w1)
    with pytest.raises(DimensionMismatch):
        swap_head(m, Head.regression(7))


def test_checkpoint_roundtrip(tmp_path):
    m = tiny_cnn((16, 16), (4, 8), seed=9)
    m.head.offset, m.head.scale = 120.5, 33.0
    m.metadata = {"task": "calories", "epoch": 3}
    p = str(tmp_path / "m.ckpt")
    sha = save_checkpoint(m, p)
    assert sha == hashlib.sha256(open(p, "rb").read()).hexdigest()
    back = load_checkpoint(p)
    x = _batch(m, 2)
    np.testing.assert_array_equal(predict(back, x), predict(m, x))
    assert back.metadata == m.metadata
    assert checkpoint_bytes(back) == checkpoint_bytes(m)


def test_checkpoint_layout():
    m = tiny_cnn((16, 16), (4,), seed=0)
    data = checkpoint_bytes(m)
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + n])
    assert header["format_version"] == 1
    assert len(data) - 8 - n == 4 * m.n_parameters()


def test_checkpoint_damage():
    data = checkpoint_bytes(tiny_cnn((16, 16), (4,), seed=0))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint_bytes(data[:-4])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint_bytes(b"abc")
    header, arrays = unpack(data)
    header["format_version"] = 99
    hb = json.dumps(header).encode()
    with pytest.raises(VersionMismatch):
        unpack(struct.pack("<Q", len(hb)) + hb + data[8 + struct.unpack("<Q", data[:8])[0]:])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint_bytes(pack({"kind": "ensemble"}, {}))


def test_golden_checkpoint():
    with open(os.path.join(DATA, "golden_expected.json")) as fh:
        expected = json.load(fh)
    path = os.path.join(DATA, "golden.ckpt")
    assert hashlib.sha256(open(path, "rb").read()).hexdigest() == expected["sha256"]
    m = load_checkpoint(path)
    x = (np.arange(2 * 16 * 16 * 3, dtype=np.float64).reshape(2, 16, 16, 3) % 97 / 96.0).astype(np.float32)
    np.testing.assert_allclose(predict(m, x), expected["prediction"], rtol=0, atol=1e-6)
    np.testing.assert_allclose(batch_msm(forward(m, x).feature_maps, m.head), expected["msm"], atol=1e-6)
