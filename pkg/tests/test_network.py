import numpy as np
import pytest

from dva import layers as L
from dva import network as net
from dva import weights as wfile
from dva.errors import IntegrityError, ShapeError


def ref_conv(x, w, b, pad):
    """Direct stride-1 cross-correlation by kernel offsets (no im2col)."""
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    out = np.zeros((x.shape[0], w.shape[0], oh, ow)) + b[None, :, None, None]
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("nchw,oc->nohw", xp[:, :, i:i + oh, j:j + ow], w[:, :, i, j])
    return out


def ref_deconv(x, w, b):
    """k=4, s=2, p=1 transposed convolution by explicit scatter."""
    n, _, h, wd = x.shape
    full = np.zeros((n, w.shape[1], 2 * h + 2, 2 * wd + 2))
    for y in range(h):
        for xx in range(wd):
            full[:, :, 2 * y:2 * y + 4, 2 * xx:2 * xx + 4] += np.einsum("nc,cokl->nokl", x[:, :, y, xx], w)
    return full[:, :, 1:-1, 1:-1] + b[None, :, None, None]


def ref_pool(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def ref_forward(state, image):
    """Straight-line composition of the reference layers for the default topology."""
    spec, P = state.spec, state.params
    z, taps = image, {}
    for b, (count, _) in enumerate(spec.encoder_blocks, start=1):
        if b > 1:
            z = ref_pool(z)
        for i in range(1, count + 1):
            z = np.maximum(ref_conv(z, P[f"enc.conv{b}_{i}.w"], P[f"enc.conv{b}_{i}.b"], 1), 0)
            taps[f"conv{b}_{i}"] = z
    maps, logits = [], []
    for tap in spec.tap_points:
        y = taps[tap]
        for j in range(1, spec.tap_depth(tap) + 1):
            y = np.maximum(ref_deconv(y, P[f"dec.{tap}.deconv{j}.w"], P[f"dec.{tap}.deconv{j}.b"]), 0)
        a = ref_conv(y, P[f"cls.{tap}.w"], P[f"cls.{tap}.b"], 0)
        logits.append(a)
        maps.append(1 / (1 + np.exp(-a)))
    wf = P["fusion.w"]
    fused = 1 / (1 + np.exp(-(wf[-1] + sum(wf[m] * a for m, a in enumerate(logits)))))
    return maps, fused


def test_forward_matches_reference_composition():
    spec = net.tiny_spec()
    st = net.build(spec, 3)
    rng = np.random.default_rng(0)
    for v in st.params.values():
        v += rng.normal(0, 0.02, v.shape)
    image = rng.uniform(-0.5, 0.5, (1, 3, 32, 32))
    tr = net.forward(st, image)
    maps, fused = ref_forward(st, image)
    for got, want in zip(tr.branch_maps, maps):
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(tr.fused_map, fused, rtol=1e-10, atol=1e-12)


def test_default_channel_schedules_and_depths():
    spec = net.NetworkSpec()
    assert spec.schedule("conv3_3") == (64, 32)
    assert spec.schedule("conv4_3") == (128, 64, 32)
    assert spec.schedule("conv5_3") == (256, 128, 64, 32)
    shapes = spec.param_shapes()
    assert shapes["dec.conv4_3.deconv1.w"] == (512, 128, 4, 4)
    assert shapes["dec.conv5_3.deconv1.w"] == (512, 256, 4, 4)
    assert shapes["cls.conv3_3.w"] == (1, 32, 1, 1)
    assert shapes["fusion.w"] == (4,)
    assert len([k for k in shapes if k.startswith("enc.") and k.endswith(".w")]) == 13


def test_single_tap_spec():
    spec = net.NetworkSpec(tap_points=("conv3-3",), input_dims=(64, 64))
    assert spec.tap_depth("conv3_3") == 2
    assert spec.param_shapes()["fusion.w"] == (2,)


@pytest.mark.parametrize("kw", [dict(tap_points=("conv6_1",)), dict(tap_points=("conv3_3", "conv3_3")),
                                dict(fusion="max"), dict(decoder_channel_schedules={"conv3_3": (8,)}),
                                dict(input_dims=(40, 64))])
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        net.tiny_spec(**kw)


def test_build_deterministic_and_init_policy():
    a, b = net.build(net.tiny_spec(), 11), net.build(net.tiny_spec(), 11)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    np.testing.assert_array_equal(a.params["fusion.w"], [1 / 3, 1 / 3, 1 / 3, 0])
    assert not any(v.any() for k, v in a.params.items() if k.endswith(".b"))
    cls = a.params["cls.conv3_3.w"]
    assert abs(cls.std() - 0.01) < 0.01
    g = net.build(net.tiny_spec(encoder_init="gaussian"), 0).params["enc.conv3_1.w"]
    assert abs(g.std() - 0.01) < 0.002


def test_pretrained_encoder_is_loaded_and_checked(tmp_path):
    src = net.build(net.tiny_spec(), 5)
    path = tmp_path / "enc.dvaw"
    wfile.write_entries(path, {k: v for k, v in src.params.items() if k.startswith("enc.")})
    st = net.build(net.tiny_spec(), 0, pretrained=path)
    assert np.array_equal(st.params["enc.conv2_1.w"], src.params["enc.conv2_1.w"])
    wrong = {k: v for k, v in src.params.items() if k.startswith("enc.")}
    wrong["enc.conv2_1.w"] = np.zeros((3, 3, 3, 3))
    with pytest.raises(IntegrityError, match="conv2_1"):
        net.build(net.tiny_spec(), 0, pretrained=wrong)


@pytest.mark.parametrize("dims", [(32, 48), (48, 32), (16, 16)])
def test_resolution_and_range(dims):
    st = net.build(net.tiny_spec(), 0)
    tr = net.forward(st, np.random.default_rng(1).uniform(-1, 1, (1, 3, *dims)))
    for m in tr.branch_maps + [tr.fused_map]:
        assert m.shape == (1, 1, *dims)
        assert m.min() >= 0 and m.max() <= 1


def test_forward_rejects_bad_images():
    st = net.build(net.tiny_spec(), 0)
    with pytest.raises(ShapeError):
        net.forward(st, np.zeros((1, 3, 24, 32)))
    with pytest.raises(ShapeError):
        net.forward(st, np.zeros((1, 1, 32, 32)))
    fixed = net.build(net.tiny_spec(input_dims=(32, 32)), 0)
    with pytest.raises(ShapeError):
        net.forward(fixed, np.zeros((1, 3, 16, 16)))


def test_zero_decoder_gives_sigmoid_of_bias():
    st = net.build(net.tiny_spec(), 0)
    for k, v in st.params.items():
        if k.startswith(("dec.", "cls.")):
            v[...] = 0
    st.params["cls.conv4_3.b"][...] = 0.7
    tr = net.forward(st, np.random.default_rng(2).standard_normal((1, 3, 32, 32)))
    assert np.allclose(tr.branch_maps[1], 1 / (1 + np.exp(-0.7)))
    assert np.allclose(tr.branch_maps[0], 0.5)


def test_average_fusion_of_identical_maps_is_identity():
    st = net.build(net.tiny_spec(fusion="average"), 0)
    s = np.random.default_rng(3).uniform(0, 1, (1, 1, 8, 8))
    np.testing.assert_allclose(net.fuse(st, [s, s, s]), s, rtol=0, atol=1e-15)


def test_logit_fusion_with_unit_weight_selects_branch():
    st = net.build(net.NetworkSpec(encoder_blocks=((1, 2),), tap_points=("conv1_1",)), 0)
    st.params["fusion.w"][:] = [1.0, 0.0]
    a = np.random.default_rng(4).standard_normal((1, 1, 4, 4))
    np.testing.assert_allclose(net.fuse(st, [L.sigmoid(a)], [a]), L.sigmoid(a), rtol=0, atol=1e-15)


def test_backward_zero_upstream_gives_zero_grads():
    st = net.build(net.tiny_spec(), 0)
    tr = net.forward(st, np.random.default_rng(5).standard_normal((1, 3, 16, 16)))
    grads = net.backward(st, tr, None, None)
    assert set(grads) == set(st.params)
    assert not any(g.any() for g in grads.values())


def test_backward_rejects_stale_trace():
    st = net.build(net.tiny_spec(), 0)
    tr = net.forward(st, np.zeros((1, 3, 16, 16)))
    with pytest.raises(ShapeError):
        net.backward(st, tr, None, np.zeros((1, 1, 32, 32)))


def test_gradient_superposition():
    """Gradient from (branch + fused) upstream maps equals the sum of each path alone."""
    st = net.build(net.tiny_spec(), 1)
    rng = np.random.default_rng(6)
    tr = net.forward(st, rng.standard_normal((1, 3, 16, 16)))
    db = [rng.standard_normal((1, 1, 16, 16)) for _ in range(3)]
    df = rng.standard_normal((1, 1, 16, 16))
    both = net.backward(st, tr, db, df)
    only_b = net.backward(st, tr, db, None)
    only_f = net.backward(st, tr, None, df)
    for k in both:
        np.testing.assert_allclose(both[k], only_b[k] + only_f[k], rtol=1e-10, atol=1e-14)


def test_small_network_gradcheck():
    from dva import gradcheck as gc

    assert gc.check_network_small().max_rel_error < 1e-4


def test_weights_round_trip_bitwise(tmp_path):
    st = net.build(net.tiny_spec(), 9)
    path = tmp_path / "w.dvaw"
    net.save_weights(st, path)
    back = net.load_weights(path)
    assert back.spec.param_shapes() == st.spec.param_shapes()
    assert all(back.params[k].tobytes() == st.params[k].tobytes() for k in st.params)
    net.save_weights(back, tmp_path / "again.dvaw")
    assert path.read_bytes() == (tmp_path / "again.dvaw").read_bytes()


def test_spec_inferred_from_weights():
    for spec in (net.tiny_spec(), net.tiny_spec(upsampling="fixed_bilinear"),
                 net.NetworkSpec(encoder_blocks=((2, 4), (2, 4)), tap_points=("conv2_2",),
                                 decoder_channel_schedules={"conv2_2": (3,)})):
        st = net.build(spec, 0)
        again = net.spec_from_entries(st.params)
        assert again.param_shapes() == spec.param_shapes()
        assert again.upsampling == spec.upsampling


def test_truncated_and_foreign_files(tmp_path):
    st = net.build(net.tiny_spec(), 0)
    path = tmp_path / "w.dvaw"
    net.save_weights(st, path)
    blob = path.read_bytes()
    (tmp_path / "cut.dvaw").write_bytes(blob[:-100])
    with pytest.raises(IntegrityError, match="checksum"):
        net.load_weights(tmp_path / "cut.dvaw")
    other = net.build(net.tiny_spec(tap_points=("conv4_3",)), 0)
    with pytest.raises(IntegrityError, match="layer"):
        net.load_weights(path, spec=other.spec)
    widened = net.NetworkSpec(encoder_blocks=((2, 16), (2, 16), (3, 32), (3, 64), (3, 64)))
    with pytest.raises(IntegrityError, match="conv1_1"):
        net.load_weights(path, spec=widened)
