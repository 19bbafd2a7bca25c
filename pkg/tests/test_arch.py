import numpy as np
import pytest

from vineseg import nn
from vineseg.arch import (
    Layer,
    Model,
    SpecError,
    UNetSpec,
    build_model,
    build_unet,
    build_xception_unet,
    full_scale_unet_spec,
    full_scale_xception_spec,
    summarize,
    summary_rows,
)
from vineseg.tensor import Tensor


def _x(shape, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, shape).astype(np.float32))


def test_small_unet_output_shape():
    model = build_unet(UNetSpec((3, 64, 64), (8, 16), "dense_double", "add", 3))
    assert model(_x((1, 3, 64, 64))).shape == (1, 3, 64, 64)


def test_full_scale_specs_build_with_equal_spatial_shapes():
    for spec, variant in ((full_scale_unet_spec(), "unet"), (full_scale_xception_spec(), "xception")):
        model = build_model(spec, variant)
        shapes = model.output_shapes()
        assert shapes[model.output] == (3, 544, 800)
    assert full_scale_unet_spec().encoder_filters == (32, 64, 128, 256, 512)


@pytest.mark.parametrize("bad", [
    dict(input_shape=(3, 63, 64)),
    dict(encoder_filters=(16, 16, 32)),
    dict(num_classes=1),
    dict(block="dense_triple"),
    dict(skip_merge="mul"),
])
def test_spec_validation(bad):
    with pytest.raises(SpecError):
        UNetSpec(**bad)


def test_shape_schedule_matches_hand_derivation():
    model = build_unet(UNetSpec((3, 64, 64), (8, 16), "dense_double", "add", 3))
    rows = {name: shape for name, _, shape, _ in summary_rows(model)}
    assert rows == {
        "enc1.conv1": (8, 64, 64), "enc1.conv2": (8, 64, 64), "enc1.pool": (8, 32, 32),
        "bottleneck.conv1": (16, 32, 32), "bottleneck.conv2": (16, 32, 32),
        "dec1.up": (16, 64, 64), "dec1.proj": (8, 64, 64), "dec1.merge": (8, 64, 64),
        "dec1.conv1": (8, 64, 64), "dec1.conv2": (8, 64, 64), "logits": (3, 64, 64),
    }
    assert len(model.skips) == 1


def test_one_skip_per_level_and_mirrored_decoder():
    model = build_unet(UNetSpec((3, 32, 32), (4, 8, 16), "dense_double", "concat", 3))
    assert len(model.skips) == 2
    enc = [l.name for l in model.layers if l.name.startswith("enc") and l.name.endswith("conv2")]
    dec = [l.name for l in model.layers if l.name.startswith("dec") and l.name.endswith("conv2")]
    assert len(enc) == len(dec) == 2


def test_summary_totals_and_single_conv_model():
    conv = nn.Conv2d(3, 4, 1, activation=None)
    model = Model((3, 8, 8), [Layer("conv", conv, ("input",))], "conv")
    text = summarize(model)
    assert len(summary_rows(model)) == 1
    assert f"total params: {3 * 4 + 4}" in text
    big = build_unet(UNetSpec((3, 32, 32), (4, 8, 16)))
    assert sum(r[3] for r in summary_rows(big)) == big.num_params()
    assert f"total params: {big.num_params():,}" in summarize(big)


def test_merge_mode_changes_params_not_shape():
    add = build_unet(UNetSpec((3, 16, 16), (4, 8), skip_merge="add"))
    cat = build_unet(UNetSpec((3, 16, 16), (4, 8), skip_merge="concat"))
    assert add.num_params() != cat.num_params()
    x = _x((1, 3, 16, 16))
    assert add(x).shape == cat(x).shape


def test_fully_convolutional_over_sizes():
    model = build_unet(UNetSpec((3, 16, 16), (4, 8, 16)))
    assert model(_x((1, 3, 32, 16))).shape == (1, 3, 32, 16)


@pytest.mark.parametrize("variant,block", [("unet", "dense_double"), ("unet", "separable_double"), ("xception", "separable_double")])
def test_every_parameter_receives_gradient(variant, block):
    model = build_model(UNetSpec((3, 16, 16), (4, 8, 16), block), variant, seed=1)
    out = model(_x((2, 3, 16, 16), 1))
    assert np.isfinite(out.data).all()
    (out * out).sum().backward()
    for name, p in model.parameters().items():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name


def test_xception_requires_separable_block():
    with pytest.raises(SpecError):
        build_xception_unet(UNetSpec((3, 16, 16), (4, 8)))


def test_xception_fewer_params_than_dense_at_reference_widths():
    widths = (32, 64, 128)
    xc = build_xception_unet(UNetSpec((3, 64, 64), widths, "separable_double"))
    dense = build_unet(UNetSpec((3, 64, 64), widths, "dense_double"))
    assert xc.num_params() < dense.num_params()


def test_zero_residual_projections_reduce_to_plain_stack():
    spec = UNetSpec((3, 16, 16), (4, 8, 16), "separable_double")
    res = build_xception_unet(spec, seed=3)
    plain = build_xception_unet(spec, seed=4, residual=False)
    state = res.state_dict()
    for name in state:
        if ".proj." in name:
            state[name][...] = 0.0
    res.load_state_dict(state)
    plain.load_state_dict({k: v for k, v in state.items() if ".proj." not in k})
    x = _x((1, 3, 16, 16), 5)
    assert np.array_equal(res(x).data, plain(x).data)


def test_state_dict_round_trip_and_mismatch():
    spec = UNetSpec((3, 16, 16), (4, 8))
    a, b = build_unet(spec, seed=0), build_unet(spec, seed=1)
    b.load_state_dict(a.state_dict())
    x = _x((1, 3, 16, 16))
    assert np.array_equal(a(x).data, b(x).data)
    with pytest.raises(SpecError):
        b.load_state_dict({})


def test_seeded_builds_are_identical():
    spec = UNetSpec((3, 16, 16), (4, 8))
    a, b = build_unet(spec, seed=2).state_dict(), build_unet(spec, seed=2).state_dict()
    assert list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)
