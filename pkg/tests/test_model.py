import numpy as np
import pytest

from tmsr.model import (
    BadMagicError,
    ManifestMismatchError,
    ModelConfig,
    PayloadLengthError,
    TmsrModel,
    build,
    count_params,
    upscale_plane,
)
from tmsr.tensor import gradient_check


def test_default_config_param_count():
    total, rows = count_params(ModelConfig())
    assert total == 1632
    # hand-summed per layer:
    # head 80+8, shrink 54+6, 2 blocks x (330+114+114+6), expand 56+8, up 292
    by_name = dict(rows)
    assert by_name["head.conv"] == 80
    assert by_name["head.act"] == 8
    assert by_name["shrink.conv"] == 54
    assert by_name["block0.branch0"] == 330
    assert by_name["block0.branch1"] == 114
    assert by_name["block0.branch2"] == 114
    assert by_name["expand.conv"] == 56
    assert by_name["upsample.conv"] == 292


def test_param_budget():
    total, _ = count_params(ModelConfig())
    assert total <= 2500


def test_count_matches_enumerated_arrays():
    m = build(ModelConfig(), seed=3)
    total, _ = count_params(m.config)
    assert sum(arr.size for _, arr in m.arrays()) == total
    assert m.get_flat().size == total


def test_single_conv_counts():
    # 1x1 conv 8->6 with bias = 54; 3x3 conv 6->6 = 330
    assert 8 * 6 + 6 == 54
    cfg = ModelConfig(num_blocks=1, branch_kernels=((3, 3),))
    by_name = dict(count_params(cfg)[1])
    assert by_name["block0.branch0"] == 6 * 6 * 9 + 6 == 330


def test_relu_drops_exactly_the_alphas():
    prelu_total, _ = count_params(ModelConfig(activation="prelu"))
    relu_total, _ = count_params(ModelConfig(activation="relu"))
    # per-channel alphas: 8 + 6 + 6 + 6 + 8
    assert prelu_total - relu_total == 34


def test_forward_shape_and_taps():
    m = build(ModelConfig(), seed=0)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(1, 1, 16, 16)).astype(np.float32)
    y, taps = m.forward(x)
    assert y.shape == (1, 1, 32, 32)
    # residual identity, exact: merged is computed as features + residual
    assert np.array_equal(taps.merged, taps.features + taps.residual)


@pytest.mark.parametrize("h,w", [(16, 16), (11, 17), (32, 24)])
def test_shape_law(h, w):
    m = build(ModelConfig(), seed=1)
    x = np.zeros((1, 1, h, w), dtype=np.float32)
    y, _ = m.forward(x)
    assert y.shape == (1, 1, 2 * h, 2 * w)


def test_zero_blocks_still_runs():
    m = build(ModelConfig(num_blocks=0), seed=0)
    y, _ = m.forward(np.zeros((1, 1, 8, 8), dtype=np.float32))
    assert y.shape == (1, 1, 16, 16)


def test_zero_upsample_weights_give_zero_output():
    m = build(ModelConfig(), seed=0)
    m.upsample_conv.params.weights[...] = 0.0
    m.upsample_conv.params.bias[...] = 0.0
    rng = np.random.default_rng(1)
    y, _ = m.forward(rng.uniform(0, 1, (1, 1, 12, 12)).astype(np.float32))
    assert not y.any()


def test_wrong_channel_count_rejected():
    m = build(ModelConfig(), seed=0)
    with pytest.raises(Exception):
        m.forward(np.zeros((1, 3, 8, 8), dtype=np.float32))


def test_full_graph_gradient_check():
    cfg = ModelConfig()
    m = build(cfg, seed=7).to_dtype(np.float64)
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 1, size=(1, 1, 16, 16))
    target = rng.uniform(0, 1, size=(1, 1, 32, 32))

    def loss_and_grad(flat):
        m.set_flat(flat)
        m.zero_grad()
        y, _ = m.forward(x, cache=True)
        diff = y - target
        m.backward(diff)
        return 0.5 * float(np.sum(diff * diff)), m.grads_flat()

    # eps 1e-5: small enough that PReLU kink crossings stop polluting the
    # difference quotient, far above the float64 noise floor
    report = gradient_check(loss_and_grad, m.get_flat(), eps=1e-5, tolerance=1e-3)
    assert report.passed, str(report)


def test_build_determinism():
    a = build(ModelConfig(), seed=5).get_flat()
    b = build(ModelConfig(), seed=5).get_flat()
    assert a.tobytes() == b.tobytes()
    c = build(ModelConfig(), seed=6).get_flat()
    assert a.tobytes() != c.tobytes()


def test_zero_init_flag():
    m = build(ModelConfig(init="zero"), seed=0)
    for name, arr in m.arrays():
        if name.endswith(".weight") or name.endswith(".bias"):
            assert not arr.any(), name


# ---------------------------------------------------------------------------
# weights file
# ---------------------------------------------------------------------------

def test_save_load_roundtrip_bitwise(tmp_path):
    m = build(ModelConfig(), seed=9)
    path = tmp_path / "m.tmsr"
    m.save(path)
    loaded = TmsrModel.load(path)
    assert loaded.get_flat().tobytes() == m.get_flat().tobytes()
    x = np.random.default_rng(2).uniform(0, 1, (1, 1, 10, 10)).astype(np.float32)
    y0, _ = m.forward(x)
    y1, _ = loaded.forward(x)
    assert y0.tobytes() == y1.tobytes()


def test_payload_length_equals_count(tmp_path):
    m = build(ModelConfig(), seed=0)
    path = tmp_path / "m.tmsr"
    m.save(path)
    raw = path.read_bytes()
    header_end = raw.index(b"payload")
    header = raw[:header_end].decode()
    payload = raw[raw.index(b"\n", header_end) + 1:]
    total, _ = count_params(m.config)
    assert len(payload) == 4 * total
    assert header.startswith("TMSR1\n")


def test_truncated_payload_rejected(tmp_path):
    m = build(ModelConfig(), seed=0)
    path = tmp_path / "m.tmsr"
    m.save(path)
    raw = path.read_bytes()
    (tmp_path / "bad.tmsr").write_bytes(raw[:-8])
    with pytest.raises(PayloadLengthError, match="length mismatch"):
        TmsrModel.load(tmp_path / "bad.tmsr")


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.tmsr"
    p.write_bytes(b"NOPE9\nconfig {}\npayload 0\n")
    with pytest.raises(BadMagicError):
        TmsrModel.load(p)


def test_header_payload_disagreement_rejected(tmp_path):
    m = build(ModelConfig(), seed=0)
    path = tmp_path / "m.tmsr"
    m.save(path)
    raw = path.read_bytes()
    # edit the config so the declared channel widths disagree with the payload
    edited = raw.replace(b'"feat_channels":8', b'"feat_channels":9', 1)
    assert edited != raw
    (tmp_path / "edited.tmsr").write_bytes(edited)
    with pytest.raises(ManifestMismatchError):
        TmsrModel.load(tmp_path / "edited.tmsr")


def test_upscale_plane_domain():
    m = build(ModelConfig(), seed=0)
    plane = np.random.default_rng(0).uniform(0, 255, (14, 18)).astype(np.float32)
    out = upscale_plane(m, plane)
    assert out.shape == (28, 36)
    assert out.min() >= 0.0 and out.max() <= 255.0
    assert out.dtype == np.float32
