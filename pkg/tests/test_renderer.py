import numpy as np
import pytest
from hypothesis import given, strategies as st

from graspreenact.autodiff import Tensor, finite_diff_check
from graspreenact.geometry import Mesh, SimilarityTransform, make_primitive
from graspreenact.renderer import (FaceTexture, Mask, RasterImage, RenderError, TextureFitConfig, coverage,
                                   fit_texture, load_mask_png, load_png, load_texture, rasterize, render_mask,
                                   save_mask_png, save_png, save_texture, texture_loss, trilinear_weights)

IDENTITY = SimilarityTransform()
RED, GREEN, BLUE = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)


def tri(points, z=0.0):
    v = np.column_stack([np.asarray(points, dtype=np.float64), np.full(3, z)])
    return Mesh(v, [[0, 1, 2]])


def const(mesh, rgb):
    return (mesh, FaceTexture.constant(mesh.n_faces, rgb))


def white(meshes):
    return [const(m, (1.0, 1.0, 1.0)) for m in meshes]


def random_scene(rng, n_meshes=2):
    kinds = ["box", "sphere", "cylinder"]
    meshes = []
    for _ in range(n_meshes):
        kind = kinds[rng.integers(3)]
        res = {"box": 2, "sphere": 8, "cylinder": 12}[kind]
        size = {"box": rng.uniform(0.3, 1.0), "sphere": rng.uniform(0.2, 0.5),
                "cylinder": (rng.uniform(0.1, 0.4), rng.uniform(0.5, 1.0))}[kind]
        m = make_primitive(kind, res, size)
        meshes.append(m.translated(rng.uniform(-0.5, 0.5, size=3)))
    q = rng.normal(size=4)
    c2 = SimilarityTransform(rng.uniform(15, 30), tuple(rng.uniform(24, 40, size=2)), tuple(q))
    return meshes, c2


# rasterize ---------------------------------------------------------------------

def test_red_triangle_exact():
    m = tri([[4, 4], [28, 6], [10, 28]])
    img = rasterize([const(m, RED)], IDENTITY, 32)
    cov = img.depth < np.inf
    assert cov[16, 16]
    assert np.array_equal(img.rgb[cov], np.tile(RED, (cov.sum(), 1)))
    assert not img.rgb[~cov].any()


def test_background_black_and_empty_scene():
    assert render_mask([], IDENTITY, (8, 5)).count() == 0
    assert render_mask([], IDENTITY, (8, 5)).shape == (8, 5)
    with pytest.raises(RenderError):
        render_mask([], IDENTITY, 0)


@pytest.mark.parametrize("w,offset", [(40, (64.0, 64.0)), (37.3, (60.2, 63.9)), (11.0, (20.25, 30.5))])
def test_cube_silhouette_area(w, offset):
    cube = make_primitive("box", 1, 1.0)
    c2 = SimilarityTransform(w, offset)
    count = render_mask([cube], c2, 128).count()
    assert abs(count - w * w) <= 2 * 4 * w
    if w == 40:
        assert count == 1600  # pixel-centre sampling of an aligned square is exact


def test_depth_order_front_wins():
    back = tri([[2, 2], [30, 2], [2, 30]], z=2.0)
    front = tri([[30, 30], [2, 30], [30, 2]], z=1.0)
    for order in ([const(back, RED), const(front, GREEN)], [const(front, GREEN), const(back, RED)]):
        img = rasterize(order, IDENTITY, 32)
        assert tuple(img.rgb[20, 20]) == GREEN  # overlap region
        assert tuple(img.rgb[3, 3]) == RED
        assert img.depth[20, 20] == 1.0


def test_depth_ties_prefer_earlier_mesh():
    a = tri([[2, 2], [30, 2], [2, 30]])
    b = tri([[2, 2], [30, 2], [2, 30]])
    img = rasterize([const(a, RED), const(b, BLUE)], IDENTITY, 32)
    assert tuple(img.rgb[5, 5]) == RED


def test_shared_edge_covered_once():
    # two triangles tiling a square: top-left rule gives each pixel to exactly one face
    v = np.array([[0.0, 0, 0], [16, 0, 0], [16, 16, 0], [0, 16, 0]])
    square = Mesh(v, [[0, 1, 2], [0, 2, 3]])
    cov = coverage([square], IDENTITY, 16)
    assert cov.covered.all()
    diag = [cov.face_id[i, i] for i in range(16)]  # pixel centres on the shared diagonal
    assert len(set(diag)) == 1


def test_texture_face_count_mismatch():
    m = tri([[0, 0], [4, 0], [0, 4]])
    with pytest.raises(RenderError):
        rasterize([(m, FaceTexture.constant(2, RED))], IDENTITY, 8)
    with pytest.raises(RenderError):
        rasterize([m], IDENTITY, 8)


# mask ------------------------------------------------------------------------------

def test_mask_consistency_on_random_scenes(rng):
    for _ in range(20):
        meshes, c2 = random_scene(rng)
        mask = render_mask(meshes, c2, 64)
        img = rasterize(white(meshes), c2, 64)
        lit = img.rgb.any(axis=2)
        np.testing.assert_array_equal(mask.values.astype(bool), lit)
        np.testing.assert_array_equal(mask.values.astype(bool), np.isfinite(img.depth))


@given(st.integers(0, 2**31), st.integers(-6, 6), st.integers(-6, 6))
def test_integer_shift_moves_mask_bit_exactly(seed, dx, dy):
    # vertices on a 1/64 grid and power-of-two scale: projected coordinates stay exact under the shift
    rng = np.random.default_rng(seed)
    v = np.column_stack([rng.integers(-640, 640, size=(12, 2)) / 64.0, rng.uniform(0, 1, 12)])
    faces = [f for f in rng.integers(0, 12, size=(10, 3)) if len(set(f)) == 3] or [[0, 1, 2]]
    mesh = Mesh(v, faces)
    flip = (0.0, 1.0, 0.0, 0.0) if seed % 2 else (1.0, 0.0, 0.0, 0.0)
    base = render_mask([mesh], SimilarityTransform(2.0, (32.0, 32.0), flip), 64).values
    moved = render_mask([mesh], SimilarityTransform(2.0, (32.0 + dx, 32.0 + dy), flip), 64).values
    expected = np.zeros_like(base)
    H, W = base.shape
    expected[max(dy, 0):H + min(dy, 0), max(dx, 0):W + min(dx, 0)] = \
        base[max(-dy, 0):H + min(-dy, 0), max(-dx, 0):W + min(-dx, 0)]
    np.testing.assert_array_equal(moved, expected)


def test_mask_type_rejects_non_binary():
    with pytest.raises(RenderError):
        Mask(np.array([[0, 2]]))
    assert Mask(np.array([[0, 1], [1, 1]])).count() == 3


# shading ---------------------------------------------------------------------------

def test_trilinear_weights_partition_of_unity(rng):
    bary = rng.dirichlet(np.ones(3), size=200)
    idx, w = trilinear_weights(bary, 2)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert idx.min() >= 0 and idx.max() < 8
    # vertex k of a face samples the corner with coordinate k set
    idx, w = trilinear_weights(np.eye(3), 2)
    corners = idx[np.arange(3), np.argmax(w, axis=1)]
    assert list(corners) == [4, 2, 1]


def test_texture_linearity(rng):
    meshes, c2 = random_scene(rng)
    t1 = [FaceTexture.random(m.n_faces, rng) for m in meshes]
    t2 = [FaceTexture.random(m.n_faces, rng) for m in meshes]
    for a in (0.0, 0.3, 1.0):
        mix = [FaceTexture(a * x.values + (1 - a) * y.values) for x, y in zip(t1, t2)]
        r = rasterize(list(zip(meshes, mix)), c2, 48).rgb
        r1 = rasterize(list(zip(meshes, t1)), c2, 48).rgb
        r2 = rasterize(list(zip(meshes, t2)), c2, 48).rgb
        assert np.abs(r - (a * r1 + (1 - a) * r2)).max() < 1e-9


def _two_triangles():
    a = tri([[1, 1], [11, 2], [3, 10]], z=0.5)
    b = tri([[6, 4], [13, 12], [4, 13]], z=1.0)
    return [a, b]


def test_texture_loss_gradient(rng):
    meshes = _two_triangles()
    target = rng.uniform(size=(14, 14, 3))
    mask = render_mask(meshes, IDENTITY, 14).values.copy()
    mask[::3] = 0
    for _ in range(5):
        texels = rng.uniform(size=(2 * 8, 3))
        err = finite_diff_check(lambda t: texture_loss(meshes, t, IDENTITY, target, mask), texels)
        assert err < 1e-4
    # FaceTexture input and Tensor input agree
    tex = [FaceTexture(texels[:8].reshape(1, 2, 2, 2, 3)), FaceTexture(texels[8:].reshape(1, 2, 2, 2, 3))]
    a = float(texture_loss(meshes, tex, IDENTITY, target, mask).data)
    b = float(texture_loss(meshes, Tensor(texels), IDENTITY, target, mask).data)
    assert abs(a - b) < 1e-12


def test_rendering_deterministic_and_thread_invariant(rng):
    meshes, c2 = random_scene(rng, 3)
    items = [(m, FaceTexture.random(m.n_faces, rng)) for m in meshes]
    a = rasterize(items, c2, 64)
    for threads in (1, 2, 3, 7):
        b = rasterize(items, c2, 64, threads=threads)
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)


# texture fitting ---------------------------------------------------------------------

def test_fit_recovers_known_texture(rng):
    cube = make_primitive("box", 2, 1.0).translated((0.0, 0.0, -1.0))
    sphere = make_primitive("sphere", 10, 0.45).translated((0.35, 0.3, 0.0))
    meshes = [cube, sphere]
    c2 = SimilarityTransform(40.0, (32.0, 32.0), (0.9, 0.3, 0.2, 0.1))
    truth = [FaceTexture.random(m.n_faces, rng) for m in meshes]
    target = rasterize(list(zip(meshes, truth)), c2, 64)
    mask = render_mask(meshes, c2, 64)
    res = fit_texture(meshes, c2, target, mask)
    assert len(res.history) == 300
    assert res.loss < 1e-4
    again = rasterize(list(zip(meshes, res.textures)), c2, 64)
    assert np.abs(again.rgb - target.rgb).max() < 1e-2
    assert res.warnings == []
    other = fit_texture(meshes, c2, target, mask)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(res.textures, other.textures))


def test_fit_constant_green_triangle():
    m = tri([[3, 3], [28, 5], [8, 27]])
    mask = render_mask([m], IDENTITY, 32)
    target = np.zeros((32, 32, 3))
    target[..., 1] = 1.0
    res = fit_texture([m], IDENTITY, target, mask)
    cov = coverage([m], IDENTITY, 32)
    idx, w = trilinear_weights(cov.bary[cov.covered], 2)
    sampled = np.unique(idx[w > 0])
    values = res.textures[0].values.reshape(8, 3)[sampled]
    assert np.abs(values - np.array(GREEN)).max() < 1e-2


def test_fit_with_empty_mask_is_a_no_op():
    meshes = _two_triangles()
    target = np.random.default_rng(0).uniform(size=(14, 14, 3))
    res = fit_texture(meshes, IDENTITY, target, np.zeros((14, 14), np.uint8), TextureFitConfig(steps=20))
    assert res.loss == 0.0
    assert all(np.all(t.values == 0.5) for t in res.textures)
    assert len(res.warnings) == 2


def test_fit_warns_for_hidden_mesh():
    visible = tri([[1, 1], [12, 1], [1, 12]])
    hidden = tri([[100, 100], [110, 100], [100, 110]])
    mask = render_mask([visible, hidden], IDENTITY, 14)
    res = fit_texture([visible, hidden], IDENTITY, np.ones((14, 14, 3)), mask,
                      TextureFitConfig(steps=30, init_value=0.25))
    assert len(res.warnings) == 1 and "mesh 1" in res.warnings[0]
    assert np.all(res.textures[1].values == 0.25)


def test_fit_config_validation():
    for bad in ({"method": "sgd"}, {"init": "zeros"}, {"steps": -1}):
        with pytest.raises(RenderError):
            TextureFitConfig(**bad)


def test_adam_fit_reduces_loss(rng):
    meshes = _two_triangles()
    truth = [FaceTexture.random(1, rng) for _ in meshes]
    target = rasterize(list(zip(meshes, truth)), IDENTITY, 14)
    mask = render_mask(meshes, IDENTITY, 14)
    res = fit_texture(meshes, IDENTITY, target, mask, TextureFitConfig(method="adam", steps=100, init="random"))
    assert res.loss < 0.2 * res.history[0]


# files -------------------------------------------------------------------------------

def test_texture_file_round_trip_and_checksum(tmp_path, rng):
    tex = FaceTexture.random(7, rng)
    save_texture(tex, tmp_path / "t.tex")
    assert np.array_equal(load_texture(tmp_path / "t.tex").values, tex.values)
    raw = bytearray((tmp_path / "t.tex").read_bytes())
    raw[-3] ^= 0xFF
    (tmp_path / "bad.tex").write_bytes(bytes(raw))
    with pytest.raises(RenderError, match="checksum"):
        load_texture(tmp_path / "bad.tex")


def test_png_round_trips(tmp_path, rng):
    rgb = rng.integers(0, 256, size=(9, 11, 3)) / 255.0
    save_png(RasterImage(rgb), tmp_path / "x.png")
    np.testing.assert_array_equal(load_png(tmp_path / "x.png").rgb, rgb)
    mask = Mask(rng.integers(0, 2, size=(9, 11)))
    save_mask_png(mask, tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask_png(tmp_path / "m.png").values, mask.values)


def test_value_types_validate():
    with pytest.raises(RenderError):
        FaceTexture(np.zeros((2, 2, 2, 3)))
    assert FaceTexture(np.full((1, 2, 2, 2, 3), 3.0)).values.max() == 1.0
    with pytest.raises(RenderError):
        RasterImage(np.full((2, 2, 3), np.nan))
