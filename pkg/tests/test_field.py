import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psinvert import core, field
from psinvert.core import Tape
from psinvert.data import SynthSceneSpec, save_dataset, synth_scene
from psinvert.data import contour_directions as field_contour
from psinvert.errors import DegenerateVector, FileFormat, MissingGroundTruth, OutOfRange, ShapeMismatch
from psinvert.field import (
    LightTable,
    MlpSpec,
    PositionalEncoder,
    light_init,
    load_checkpoint,
    material_at,
    mlp_forward,
    normal_at,
    positional_encode,
    save_checkpoint,
)
from psinvert.shading import VIEW, Light, SpecularBasisBank, render_pixel

coord = st.floats(-1, 1, allow_nan=False)


def test_encoding_examples():
    f = positional_encode(0.0, 0.0)
    assert f.shape == (42,)
    sin_x, cos_x = f[2:12], f[12:22]
    assert np.all(sin_x == 0) and np.all(cos_x == 1)
    g = PositionalEncoder(10, include_raw=False)(np.array([1.0, 0.0]))
    sin_x, cos_x = g[0:10], g[10:20]
    assert abs(sin_x[0]) < 1e-15 and cos_x[0] == -1
    np.testing.assert_allclose(cos_x[1:], 1, atol=1e-12)
    assert PositionalEncoder(3, False).width == 12


def test_encoding_errors():
    with pytest.raises(OutOfRange):
        positional_encode(1.01, 0)
    with pytest.raises(ShapeMismatch):
        PositionalEncoder()(np.zeros((4, 3)))
    positional_encode(1 + 1e-10, -1)


@settings(max_examples=200)
@given(coord, coord, coord, coord)
def test_encoding_injective(x1, y1, x2, y2):
    if (x1, y1) != (x2, y2):
        assert not np.array_equal(positional_encode(x1, y1), positional_encode(x2, y2))


def test_pixel_coords_longest_side():
    mask = np.zeros((5, 9), bool)
    mask[1:4, 2:7] = True
    xy = field.pixel_coords(mask)
    assert xy[:, 0].min() == -1 and xy[:, 0].max() == 1
    assert xy[:, 1].max() == 0.5 and xy[:, 1].min() == -0.5
    # first mask pixel is the top-left one; y points up
    np.testing.assert_array_equal(xy[0], [-1, 0.5])


def test_mlp_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6))
    zero = [(np.zeros((6, 5)), np.zeros(5)), (np.zeros((5, 3)), np.array([0.1, -2.0, 3.0]))]
    np.testing.assert_array_equal(mlp_forward(zero, x), np.tile([0.1, -2.0, 3.0], (4, 1)))
    W, b = rng.normal(size=(6, 2)), rng.normal(size=2)
    np.testing.assert_allclose(mlp_forward([(W, b)], x), x @ W + b)
    neg = [(np.eye(6), -np.full(6, 100.0)), (np.ones((6, 1)), np.zeros(1))]
    np.testing.assert_array_equal(mlp_forward(neg, x), 0)
    with pytest.raises(ShapeMismatch):
        mlp_forward([(W, b)], rng.normal(size=(4, 7)))


def test_mlp_spec_shapes():
    spec = MlpSpec(42, 13, depth=12, hidden=256)
    layers = spec.init(np.random.default_rng(1))
    assert len(layers) == 12
    assert layers[0][0].shape == (42, 256) and layers[-1][0].shape == (256, 13)
    assert np.abs(layers[0][0]).max() <= 1 / math.sqrt(42)


def small_net(out_dim, seed=0, depth=3, levels=2):
    enc = PositionalEncoder(levels)
    return enc, MlpSpec(enc.width, out_dim, depth, 16).init(np.random.default_rng(seed))


@settings(max_examples=50)
@given(coord, coord, st.integers(0, 20))
def test_normal_at_is_unit_and_deterministic(x, y, seed):
    enc, params = small_net(3, seed)
    n = normal_at(params, x, y, enc)
    assert abs(np.linalg.norm(n) - 1) < 1e-6
    np.testing.assert_array_equal(n, normal_at(params, x, y, enc))


def test_normal_at_degenerate():
    enc, params = small_net(3)
    params[-1] = (np.zeros_like(params[-1][0]), np.zeros(3))
    with pytest.raises(DegenerateVector):
        normal_at(params, 0.1, 0.2, enc)


def test_material_map():
    enc, params = small_net(13)
    params[-1] = (np.zeros_like(params[-1][0]), np.zeros(13))
    m = material_at(params, 0.3, -0.2, enc)
    assert m.diffuse == pytest.approx(math.log(2))
    assert m.specular.shape == (12,)
    params[-1] = (np.zeros_like(params[-1][0]), np.full(13, -800.0))
    m = material_at(params, 0.3, -0.2, enc)
    assert 0 <= m.diffuse < 1e-300 or m.diffuse == 0


@settings(max_examples=30)
@given(st.integers(0, 100), coord, coord)
def test_material_nonnegative(seed, x, y):
    enc, params = small_net(5, seed)
    params = [(W * 50, b * 50) for W, b in params]
    m = material_at(params, x, y, enc)
    assert m.diffuse >= 0 and np.all(m.specular >= 0)


def test_grad_through_normal_field_and_render():
    enc = PositionalEncoder(2)
    spec = MlpSpec(enc.width, 3, 3, 6)
    layers = spec.init(np.random.default_rng(7))
    shapes = [a.shape for layer in layers for a in layer]
    flat = np.concatenate([a.ravel() for layer in layers for a in layer])
    feats = enc(np.array([[0.2, -0.4]]))
    bank = SpecularBasisBank(np.array([-30.0]))
    l = core.normalize(np.array([0.2, 0.3, 1.0]))

    def f(t, x):
        parts, o = [], 0
        for s in shapes:
            size = int(np.prod(s))
            parts.append(x[o : o + size].reshape(s))
            o += size
        params = list(zip(parts[::2], parts[1::2]))
        n = core.normalize(mlp_forward(params, feats))[0]
        return render_pixel(n, field.Material(0.4, np.array([0.6])), Light(l, 0.0), VIEW, bank, 1)

    err = core.grad_check(f, flat)
    assert err is None or err < 1e-4


def test_light_table_readout():
    lt = LightTable(np.array([[0, 0, 2.0], [3, 0, 4]]), np.array([0.0, math.log(2)]))
    np.testing.assert_allclose(lt.directions, [[0, 0, 1], [0.6, 0, 0.8]])
    np.testing.assert_allclose(lt.intensities, [1, 2])
    assert len(lt) == 2


def test_guard_directions_in_place():
    raw = np.array([[0.0, 0.0, 1e-8], [0.0, 1.0, 1.0]])
    prev = np.array([[0.0, 0.0, 2.0], [0.0, 1.0, 1.0]])
    assert field.guard_directions(raw, prev) == 1
    np.testing.assert_array_equal(raw[0], [0, 0, 2])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    ds = synth_scene(SynthSceneSpec(height=16, width=16, n_lights=5, seed=2))
    d = tmp_path_factory.mktemp("tiny")
    save_dataset(ds, d)
    return ds, d


def test_light_init_strategies(tiny):
    ds, d = tiny
    v = light_init("view-jitter:0", ds)
    np.testing.assert_array_equal(v.directions, np.tile([0, 0, 1.0], (5, 1)))
    np.testing.assert_array_equal(v.intensities, 1)
    j = light_init("view-jitter:5", ds, seed=3)
    assert np.degrees(np.arccos(j.directions[:, 2])).max() <= 5 + 1e-9
    g = light_init("gt-noise:70", ds, seed=3)
    ang = np.degrees(np.arccos(np.clip(np.sum(g.directions * ds.gt_lights.directions, 1), -1, 1)))
    assert ang.max() <= 70 + 1e-6 and np.all(g.intensities == 1)
    f = light_init(f"file:{d}", ds)
    assert np.degrees(np.arccos(np.clip(np.sum(f.directions * ds.gt_lights.directions, 1), -1, 1))).max() < 1e-6


def test_contour_lights_on_sphere():
    ds = synth_scene(SynthSceneSpec(material="two-region", n_lights=12, seed=6))
    est = light_init("contour", ds).directions
    ang = np.degrees(np.arccos(np.clip(np.sum(est * ds.gt_lights.directions, 1), -1, 1)))
    frontal = np.degrees(np.arccos(ds.gt_lights.directions[:, 2]))
    assert ang.mean() < 15 and ang.mean() < 0.5 * frontal.mean()
    np.testing.assert_allclose(np.linalg.norm(est, axis=1), 1)


def test_contour_lights_exact_for_lambertian_contour():
    # a synthetic contour whose intensities follow a . c exactly
    mask = np.zeros((41, 41), bool)
    yy, xx = np.mgrid[:41, :41]
    mask[(yy - 20) ** 2 + (xx - 20) ** 2 <= 15**2] = True
    idx, c = field_contour(mask)
    l = np.array([0.3, -0.4, np.sqrt(0.75)])
    img = np.zeros((41, 41))
    img[mask] = 1.0
    img.ravel()[idx] = np.maximum(c @ l[:2], 0)
    est = field.contour_lights(img[None], mask, peak_percentile=100)[0]
    assert np.degrees(np.arccos(min(1.0, est @ l))) < 1.0


def test_contour_lights_fallback_without_silhouette():
    ds = synth_scene(SynthSceneSpec(shape="heightfield", height=16, width=16, n_lights=4))
    np.testing.assert_array_equal(light_init("contour", ds).directions, np.tile([0, 0, 1.0], (4, 1)))
    dark = np.zeros((2, 16, 16))
    mask = np.zeros((16, 16), bool)
    mask[3:13, 3:13] = True
    np.testing.assert_array_equal(field.contour_lights(dark, mask), np.tile([0, 0, 1.0], (2, 1)))


def test_light_init_errors(tiny, tmp_path):
    ds, d = tiny
    bare = synth_scene(SynthSceneSpec(height=16, width=16, n_lights=5))
    bare.gt_lights = None
    with pytest.raises(MissingGroundTruth):
        light_init("gt-noise:30", bare)
    (tmp_path / "l.txt").write_text("0 0 1 1\n0 0 1\n")
    with pytest.raises(FileFormat):
        light_init(f"file:{tmp_path / 'l.txt'}", ds)
    with pytest.raises(ValueError):
        light_init("oracle", ds)


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(2.5), "c": np.zeros((0, 4))}
    save_checkpoint(tmp_path / "x.ckpt", arrays)
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:4] == b"PSCK"
    back = load_checkpoint(tmp_path / "x.ckpt")
    assert list(back) == ["a", "b", "c"]
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
        assert back[k].shape == arrays[k].shape
    (tmp_path / "bad.ckpt").write_bytes(raw[:-3])
    with pytest.raises(FileFormat):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    with pytest.raises(FileFormat):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_float32_leaves_reach_every_parameter():
    enc = PositionalEncoder(2)
    layers = MlpSpec(enc.width, 3, 3, 8).init(np.random.default_rng(0))
    t = Tape()
    leaves = [(t.leaf(W.astype(np.float32)), t.leaf(b.astype(np.float32))) for W, b in layers]
    feats = enc(np.random.default_rng(1).uniform(-1, 1, (32, 2))).astype(np.float32)
    out = core.normalize(mlp_forward(leaves, feats))
    loss = (out * np.float32(0.3)).sum()
    g = t.backward(loss)
    for W, b in leaves:
        assert g[W].dtype == np.float32 and np.any(g[W] != 0) and np.any(g[b] != 0)
