"""Orthographic z-buffer rasterizer for meshes with per-face texture cubes.

Each face carries a ``T x T x T`` RGB grid.  A pixel's barycentric weights
``(w0, w1, w2)`` address the grid at ``(w0, w1, w2) * (T - 1)`` and the colour
is the trilinear interpolation there, so pixel colours are linear in the
texture values.  Gradients are provided w.r.t. texture values only.

Conventions: after applying ``c2`` a vertex ``(x, y, z)`` lands at column
``x`` and row ``y`` (pixel centres at ``+0.5``), and smaller ``z`` is closer.
Edge pixels follow the top-left rule; depth ties keep the earlier
mesh/face.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from PIL import Image

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .geometry import Mesh, SimilarityTransform, apply_similarity

log = logging.getLogger(__name__)

__all__ = [
    "TEXTURE_SIZE",
    "FaceTexture",
    "RasterImage",
    "Mask",
    "Coverage",
    "RenderError",
    "coverage",
    "rasterize",
    "render_mask",
    "shade",
    "texture_loss",
    "TextureFitConfig",
    "TextureFitResult",
    "fit_texture",
    "save_texture",
    "load_texture",
    "save_png",
    "load_png",
    "save_mask_png",
    "load_mask_png",
]

TEXTURE_SIZE = 2


class RenderError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FaceTexture:
    """Values of shape (n_faces, T, T, T, 3), clamped to [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 5 or v.shape[-1] != 3 or not (v.shape[1] == v.shape[2] == v.shape[3]):
            raise RenderError(f"texture must be (F, T, T, T, 3), got {v.shape}")
        if not np.isfinite(v).all():
            raise RenderError("texture values must be finite")
        v = np.clip(v, 0.0, 1.0)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_faces(self) -> int:
        return self.values.shape[0]

    @property
    def size(self) -> int:
        return self.values.shape[1]

    @classmethod
    def constant(cls, n_faces: int, rgb, size: int = TEXTURE_SIZE) -> "FaceTexture":
        return cls(np.broadcast_to(np.asarray(rgb, dtype=np.float64), (n_faces, size, size, size, 3)))

    @classmethod
    def random(cls, n_faces: int, rng, size: int = TEXTURE_SIZE) -> "FaceTexture":
        return cls(rng.uniform(0.0, 1.0, size=(n_faces, size, size, size, 3)))


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary image: 1 on foreground, 0 on background."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise RenderError("mask must be 2-D")
        if not np.isin(v, (0, 1)).all():
            raise RenderError("mask values must be exactly 0 or 1")
        v = v.astype(np.uint8)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True, eq=False)
class RasterImage:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray | None = None  # (H, W), +inf where empty

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.shape[0] == 0 or rgb.shape[1] == 0:
            raise RenderError(f"image must be (H, W, 3) with H, W > 0, got {rgb.shape}")
        if not np.isfinite(rgb).all():
            raise RenderError("image values must be finite")
        rgb = rgb.copy()
        rgb.setflags(write=False)
        object.__setattr__(self, "rgb", rgb)

    @property
    def shape(self):
        return self.rgb.shape[:2]


# ---------------------------------------------------------------------------
# coverage


@dataclass(frozen=True, eq=False)
class Coverage:
    """Per-pixel visible surface: mesh id, face id, barycentrics, depth."""

    mesh_id: np.ndarray  # (H, W) int, -1 where empty
    face_id: np.ndarray  # (H, W) int, -1 where empty
    bary: np.ndarray  # (H, W, 3) barycentric weights of the original vertex order
    depth: np.ndarray  # (H, W) float, +inf where empty

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0


def _geometry(item):
    if isinstance(item, tuple):
        item = item[0]
    if isinstance(item, Mesh):
        return item.vertices, item.faces
    raise RenderError(f"expected a Mesh or (Mesh, FaceTexture), got {type(item).__name__}")


def _raster_band(projected, row0, row1, width):
    """Z-buffer the rows [row0, row1) for all faces; pure per pixel."""
    h = row1 - row0
    depth = np.full((h, width), np.inf)
    mesh_id = np.full((h, width), -1, dtype=np.int64)
    face_id = np.full((h, width), -1, dtype=np.int64)
    bary = np.zeros((h, width, 3))
    for m_idx, (pts, faces) in enumerate(projected):
        tri = pts[faces]  # (F, 3, 3)
        lo = np.floor(tri[:, :, :2].min(axis=1) - 0.5).astype(np.int64) + 1
        hi = np.ceil(tri[:, :, :2].max(axis=1) - 0.5).astype(np.int64)
        for f_idx in range(len(faces)):
            c0, r0 = max(lo[f_idx, 0], 0), max(lo[f_idx, 1], row0)
            c1, r1 = min(hi[f_idx, 0], width - 1), min(hi[f_idx, 1], row1 - 1)
            if c0 > c1 or r0 > r1:
                continue
            v = tri[f_idx]
            area = (v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1]) - (v[1, 1] - v[0, 1]) * (v[2, 0] - v[0, 0])
            if area == 0:
                continue
            order = (0, 1, 2) if area > 0 else (0, 2, 1)
            area = abs(area)
            px = np.arange(c0, c1 + 1) + 0.5
            py = np.arange(r0, r1 + 1) + 0.5
            X, Y = np.meshgrid(px, py)
            inside = np.ones(X.shape, dtype=bool)
            weights = np.empty((3,) + X.shape)
            # edge opposite vertex order[k] runs order[k+1] -> order[k+2]
            for k in range(3):
                a = v[order[(k + 1) % 3]]
                b = v[order[(k + 2) % 3]]
                dx, dy = b[0] - a[0], b[1] - a[1]
                e = dx * (Y - a[1]) - dy * (X - a[0])
                top_left = dy < 0 or (dy == 0 and dx > 0)
                inside &= (e > 0) | ((e == 0) & top_left)
                weights[order[k]] = e / area
            if not inside.any():
                continue
            z = weights[0] * v[0, 2] + weights[1] * v[1, 2] + weights[2] * v[2, 2]
            sub = (slice(r0 - row0, r1 - row0 + 1), slice(c0, c1 + 1))
            win = inside & (z < depth[sub])
            if not win.any():
                continue
            depth[sub][win] = z[win]
            mesh_id[sub][win] = m_idx
            face_id[sub][win] = f_idx
            bary[sub][win] = np.moveaxis(weights, 0, -1)[win]
    return depth, mesh_id, face_id, bary


def coverage(meshes, c2: SimilarityTransform, image_size, threads: int = 1) -> Coverage:
    """Visible face per pixel for ``meshes`` (Mesh or (Mesh, texture) items)."""
    H, W = _image_size(image_size)
    projected = []
    for item in meshes:
        verts, faces = _geometry(item)
        projected.append((apply_similarity(verts, c2), faces))
    threads = max(1, int(threads))
    bands = np.linspace(0, H, min(threads, H) + 1).astype(int)
    spans = [(a, b) for a, b in zip(bands[:-1], bands[1:]) if b > a]
    if len(spans) == 1:
        parts = [_raster_band(projected, 0, H, W)]
    else:
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            parts = list(pool.map(lambda s: _raster_band(projected, s[0], s[1], W), spans))
    depth, mesh_id, face_id, bary = (np.concatenate([p[i] for p in parts]) for i in range(4))
    return Coverage(mesh_id, face_id, bary, depth)


def _image_size(image_size):
    if np.isscalar(image_size):
        H = W = int(image_size)
    else:
        H, W = (int(s) for s in image_size)
    if H <= 0 or W <= 0:
        raise RenderError("image dimensions must be positive")
    return H, W


# ---------------------------------------------------------------------------
# shading


def trilinear_weights(bary: np.ndarray, size: int = TEXTURE_SIZE):
    """Flat texel indices (P, 8) into a face's T^3 grid and their weights (P, 8)."""
    u = np.asarray(bary, dtype=np.float64) * (size - 1)
    base = np.minimum(np.floor(u), size - 2).astype(np.int64) if size > 1 else np.zeros(u.shape, np.int64)
    frac = u - base
    idx = np.empty((len(u), 8), dtype=np.int64)
    w = np.empty((len(u), 8))
    n = 0
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                i, j, k = base[:, 0] + di, base[:, 1] + dj, base[:, 2] + dk
                if size == 1:
                    i = j = k = np.zeros(len(u), np.int64)
                idx[:, n] = (i * size + j) * size + k
                wi = frac[:, 0] if di else 1 - frac[:, 0]
                wj = frac[:, 1] if dj else 1 - frac[:, 1]
                wk = frac[:, 2] if dk else 1 - frac[:, 2]
                w[:, n] = wi * wj * wk
                n += 1
    return idx, w


class _ShadingPlan:
    """Fixed linear map from stacked texture values to pixel colours."""

    def __init__(self, cov: Coverage, face_counts, size: int):
        self.shape = cov.face_id.shape
        self.size = size
        offsets = np.concatenate([[0], np.cumsum(face_counts)])
        self.pixels = np.flatnonzero(cov.covered.ravel())
        mids = cov.mesh_id.ravel()[self.pixels]
        fids = cov.face_id.ravel()[self.pixels]
        local, self.weights = trilinear_weights(cov.bary.reshape(-1, 3)[self.pixels], size)
        n3 = size ** 3
        self.texel_index = (offsets[mids] + fids)[:, None] * n3 + local
        # pixel -> row in [background, covered pixels...]
        self.lookup = np.zeros(self.shape[0] * self.shape[1], dtype=np.int64)
        self.lookup[self.pixels] = np.arange(1, len(self.pixels) + 1)
        self.mesh_of_pixel = mids

    def colors(self, texels):
        """``texels`` is an array or Tensor of shape (sum F * T^3, 3).

        Arrays are shaded as ``t_0 + sum_n w_n (t_n - t_0)`` so a constant
        texture reproduces its colour exactly despite rounding in the
        weights; Tensors go through the equivalent sparse matrix.
        """
        if isinstance(texels, Tensor):
            return ad.sparse_matmul(self.matrix(texels.shape[0]), texels)
        g = texels[self.texel_index]
        return g[:, 0, :] + ((g[:, 1:, :] - g[:, :1, :]) * self.weights[:, 1:, None]).sum(axis=1)

    def matrix(self, n_texels: int):
        if getattr(self, "_matrix", None) is None or self._matrix.shape[1] != n_texels:
            rows = np.repeat(np.arange(len(self.pixels)), 8)
            self._matrix = sp.csr_matrix((self.weights.ravel(), (rows, self.texel_index.ravel())),
                                         shape=(len(self.pixels), n_texels))
        return self._matrix

    def image(self, texels):
        col = self.colors(texels)
        if isinstance(col, Tensor):
            full = ad.concat([np.zeros((1, 3)), col], axis=0)
            return ad.take(full, self.lookup, axis=0).reshape(self.shape + (3,))
        full = np.concatenate([np.zeros((1, 3)), col])
        return full[self.lookup].reshape(self.shape + (3,))


def _textures_of(meshes, textures=None):
    out = []
    for i, item in enumerate(meshes):
        verts, faces = _geometry(item)
        tex = textures[i] if textures is not None else (item[1] if isinstance(item, tuple) else None)
        if tex is None:
            raise RenderError(f"mesh {i} has no texture")
        if tex.n_faces != len(faces):
            raise RenderError(f"texture of mesh {i} has {tex.n_faces} faces, mesh has {len(faces)}")
        out.append(tex)
    sizes = {t.size for t in out}
    if len(sizes) > 1:
        raise RenderError("all textures must share one grid size")
    return out


def _stack_texels(textures) -> np.ndarray:
    return np.concatenate([t.values.reshape(-1, 3) for t in textures]) if textures else np.zeros((0, 3))


def rasterize(meshes, c2: SimilarityTransform, image_size, threads: int = 1) -> RasterImage:
    """Render ``[(Mesh, FaceTexture), ...]``; background pixels are black."""
    textures = _textures_of(meshes)
    cov = coverage(meshes, c2, image_size, threads)
    size = textures[0].size if textures else TEXTURE_SIZE
    plan = _ShadingPlan(cov, [t.n_faces for t in textures], size)
    rgb = plan.image(_stack_texels(textures))
    return RasterImage(rgb, cov.depth)


def render_mask(meshes, c2: SimilarityTransform, image_size, threads: int = 1) -> Mask:
    """1 wherever some face covers the pixel."""
    cov = coverage(meshes, c2, image_size, threads)
    return Mask(cov.covered.astype(np.uint8))


def shade(meshes, c2, image_size, texels, threads: int = 1, cov: Coverage | None = None):
    """Differentiable render of stacked texels (Tensor (sum F*T^3, 3))."""
    cov = cov or coverage(meshes, c2, image_size, threads)
    counts = [len(_geometry(m)[1]) for m in meshes]
    size = round((ad.as_tensor(texels).shape[0] / max(sum(counts), 1)) ** (1 / 3))
    return _ShadingPlan(cov, counts, size).image(texels)


def texture_loss(meshes, textures, c2, target, mask, threads: int = 1) -> Tensor:
    """Squared error between the render and ``target * mask`` over mask pixels.

    ``textures`` is a list of FaceTexture or a stacked Tensor of texels.
    """
    target = np.asarray(getattr(target, "rgb", target), dtype=np.float64)
    mvals = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    if target.shape[:2] != mvals.shape:
        raise RenderError("target image and mask differ in size")
    if not isinstance(textures, Tensor):
        textures = Tensor(_stack_texels(_textures_of(meshes, textures)))
    img = shade(meshes, c2, mvals.shape, textures, threads)
    return ad.tsum(ad.square(img - target) * mvals[:, :, None])


# ---------------------------------------------------------------------------
# texture fitting


@dataclass(frozen=True)
class TextureFitConfig:
    """Texture fitting settings.

    ``method="accelerated"`` is projected gradient descent with a per-texel
    step ``1 / (2 * sum of that texel's pixel weights)`` and Nesterov
    momentum; the step is a Gershgorin bound on the curvature, so the plain
    iteration never overshoots.  ``method="adam"`` uses Adam with a
    log-linear learning-rate decay from ``lr`` to ``lr_final``.
    """

    steps: int = 300
    method: str = "accelerated"
    lr: float = 0.05
    lr_final: float = 0.001
    init_value: float = 0.5
    init: str = "constant"  # or "random"
    seed: int = 0
    size: int = TEXTURE_SIZE

    def __post_init__(self):
        if self.method not in ("accelerated", "adam"):
            raise RenderError(f"unknown texture fit method {self.method!r}")
        if self.init not in ("constant", "random"):
            raise RenderError(f"unknown texture init {self.init!r}")
        if self.steps < 0:
            raise RenderError("steps must be non-negative")


@dataclass
class TextureFitResult:
    textures: list
    loss: float
    history: list
    warnings: list = field(default_factory=list)


def fit_texture(meshes, c2: SimilarityTransform, target, mask, config: TextureFitConfig | None = None,
                threads: int = 1) -> TextureFitResult:
    """Fit per-face textures so the render matches ``target`` inside ``mask``.

    Minimizes the squared error over mask pixels with gradients taken on the
    tape; values are clamped to [0, 1] after every step.
    """
    config = config or TextureFitConfig()
    target = np.asarray(getattr(target, "rgb", target), dtype=np.float64)
    mvals = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    if target.shape[:2] != mvals.shape:
        raise RenderError("target image and mask differ in size")
    geo = [_geometry(m) for m in meshes]
    counts = [len(f) for _, f in geo]
    n3 = config.size ** 3
    if config.init == "random":
        rng = np.random.default_rng(config.seed)
        texels = rng.uniform(0.0, 1.0, size=(sum(counts) * n3, 3))
    else:
        texels = np.full((sum(counts) * n3, 3), config.init_value)

    cov = coverage([Mesh(v, f) for v, f in geo], c2, mvals.shape, threads)
    plan = _ShadingPlan(cov, counts, config.size)
    warnings = []
    visible = mvals.ravel()[plan.pixels] > 0
    for i in range(len(meshes)):
        if not (visible & (plan.mesh_of_pixel == i)).any():
            warnings.append(f"mesh {i} has no visible pixels inside the mask; texture left at initialisation")
            log.warning(warnings[-1])
    weight = mvals[:, :, None]
    masked_target = target * weight

    def loss_and_grad(t):
        leaf = Tensor(t, requires_grad=True)
        loss = ad.tsum(ad.square(plan.image(leaf) - masked_target) * weight)
        g = ad.backward(loss).get(leaf.id)
        return float(loss.data), (np.zeros_like(t) if g is None else g)

    history = []
    if config.method == "adam":
        opt = Adam(config.lr)
        for step in range(config.steps):
            loss, g = loss_and_grad(texels)
            history.append(loss)
            frac = step / max(config.steps - 1, 1)
            lr = config.lr * (config.lr_final / config.lr) ** frac
            texels = np.clip(opt.step({"t": texels}, {"t": g}, lr=lr)["t"], 0.0, 1.0)
    else:
        # curvature bound per texel from pixels that enter the loss
        pix_w = np.repeat(visible[:, None], 8, axis=1) * plan.weights
        colsum = np.bincount(plan.texel_index.ravel(), weights=pix_w.ravel(), minlength=len(texels))
        step_size = np.where(colsum > 0, 0.5 / np.where(colsum > 0, colsum, 1.0), 0.0)[:, None]
        y, k = texels, 1.0
        for _ in range(config.steps):
            loss, g = loss_and_grad(y)
            history.append(loss)
            nxt = np.clip(y - step_size * g, 0.0, 1.0)
            k_next = (1.0 + np.sqrt(1.0 + 4.0 * k * k)) / 2.0
            y = np.clip(nxt + ((k - 1.0) / k_next) * (nxt - texels), 0.0, 1.0)
            texels, k = nxt, k_next
    final = loss_and_grad(texels)[0]
    offsets = np.concatenate([[0], np.cumsum(counts)]) * n3
    textures = [FaceTexture(texels[a:b].reshape(-1, config.size, config.size, config.size, 3))
                for a, b in zip(offsets[:-1], offsets[1:])]
    return TextureFitResult(textures, final, history, warnings)


# ---------------------------------------------------------------------------
# files


TEXTURE_FORMAT = "graspreenact.face_texture/1"


def save_texture(texture: FaceTexture, path) -> None:
    """JSON header line followed by raw little-endian float64 values."""
    payload = texture.values.astype("<f8").tobytes()
    header = {
        "format": TEXTURE_FORMAT,
        "shape": list(texture.values.shape),
        "face_count": texture.n_faces,
        "dtype": "<f8",
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(payload)


def load_texture(path) -> FaceTexture:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    if header.get("format") != TEXTURE_FORMAT:
        raise RenderError(f"{path}: unsupported texture format {header.get('format')!r}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise RenderError(f"{path}: texture checksum mismatch")
    values = np.frombuffer(payload, dtype=header["dtype"]).reshape(header["shape"])
    if values.shape[0] != header["face_count"]:
        raise RenderError(f"{path}: face count does not match shape")
    return FaceTexture(values)


def _to_uint8(arr) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image, path) -> None:
    rgb = getattr(image, "rgb", image)
    Image.fromarray(_to_uint8(rgb), mode="RGB").save(path)


def load_png(path) -> RasterImage:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return RasterImage(arr)


def save_mask_png(mask: Mask, path) -> None:
    Image.fromarray((mask.values * 255).astype(np.uint8), mode="L").save(path)


def load_mask_png(path) -> Mask:
    arr = np.asarray(Image.open(path).convert("L"))
    return Mask((arr > 127).astype(np.uint8))
