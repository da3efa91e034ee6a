"""Skinned parametric hand: template, linear blend skinning and joint regressor.

The articulated pose ``theta`` holds 15 axis-angle rotations (45 values), one
per non-root joint, expressed in the parent's rest frame.  The wrist/root
rotation is not part of ``theta``; global placement is carried by the
similarity transforms of :class:`HandParams`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Mesh, SimilarityTransform, make_primitive

__all__ = [
    "HandModel",
    "HandParams",
    "HandModelError",
    "POSE_DIM",
    "SHAPE_DIM",
    "rodrigues",
    "pose_vertices",
    "lbs_forward",
    "regress_joints",
    "wrist_point",
    "make_toy_hand",
    "load_hand_model",
    "save_hand_model",
]

POSE_DIM = 45
SHAPE_DIM = 10
FINGER_NAMES = ("index", "middle", "ring", "pinky", "thumb")

# maps an axis-angle vector r to the row-major entries of its skew matrix [r]_x
_SKEW = np.zeros((3, 9))
_SKEW[2, 1], _SKEW[1, 2] = -1.0, 1.0
_SKEW[2, 3], _SKEW[0, 5] = 1.0, -1.0
_SKEW[1, 6], _SKEW[0, 7] = -1.0, 1.0


class HandModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HandModel:
    template_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    skinning_weights: np.ndarray  # (V, J), rows sum to 1
    joint_rest_positions: np.ndarray  # (J, 3)
    parents: tuple  # length J, root parent is None
    joint_regressor: np.ndarray  # (K, V), rows sum to 1
    wrist_index: int
    contact_indices: tuple  # default ContactSpec vertex ids
    shape_dirs: np.ndarray | None = None  # (B, V, 3)
    fingertip_indices: tuple = ()
    finger_joints: tuple = ()  # per finger, its joint ids from base to tip

    def __post_init__(self):
        arrays = {
            "template_vertices": np.array(self.template_vertices, dtype=np.float64),
            "faces": np.array(self.faces, dtype=np.int64),
            "skinning_weights": np.array(self.skinning_weights, dtype=np.float64),
            "joint_rest_positions": np.array(self.joint_rest_positions, dtype=np.float64),
            "joint_regressor": np.array(self.joint_regressor, dtype=np.float64),
        }
        if self.shape_dirs is not None:
            arrays["shape_dirs"] = np.array(self.shape_dirs, dtype=np.float64)
        for name, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "parents", tuple(None if p is None else int(p) for p in self.parents))
        object.__setattr__(self, "contact_indices", tuple(int(i) for i in self.contact_indices))
        object.__setattr__(self, "fingertip_indices", tuple(int(i) for i in self.fingertip_indices))
        object.__setattr__(self, "finger_joints", tuple(tuple(int(j) for j in c) for c in self.finger_joints))
        object.__setattr__(self, "wrist_index", int(self.wrist_index))
        self._validate()
        object.__setattr__(self, "_levels", self._build_levels())

    def _validate(self):
        V, J = self.n_vertices, self.n_joints
        Mesh(self.template_vertices, self.faces)
        w = self.skinning_weights
        if w.shape != (V, J):
            raise HandModelError(f"skinning weights must be ({V}, {J}), got {w.shape}")
        if (w < 0).any() or np.abs(w.sum(axis=1) - 1).max() > 1e-6:
            raise HandModelError("skinning weight rows must be non-negative and sum to 1")
        r = self.joint_regressor
        if r.ndim != 2 or r.shape[1] != V:
            raise HandModelError(f"joint regressor must be (K, {V}), got {r.shape}")
        if (r < 0).any() or np.abs(r.sum(axis=1) - 1).max() > 1e-6:
            raise HandModelError("joint regressor rows must be non-negative and sum to 1")
        if self.joint_rest_positions.shape != (J, 3):
            raise HandModelError("joint_rest_positions must be (J, 3)")
        roots = [j for j, p in enumerate(self.parents) if p is None]
        if roots != [0]:
            raise HandModelError("parents must have exactly one root, at index 0")
        for j in range(J):
            seen, k = set(), j
            while k is not None:
                if k in seen or not 0 <= k < J:
                    raise HandModelError(f"joint {j} is not connected to the root")
                seen.add(k)
                k = self.parents[k]
        if 3 * (J - 1) != POSE_DIM:
            raise HandModelError(f"model needs 16 joints for a {POSE_DIM}-dim pose, has {J}")
        if self.shape_dirs is not None and self.shape_dirs.shape[1:] != (V, 3):
            raise HandModelError("shape_dirs must be (B, V, 3)")
        if not 0 <= self.wrist_index < V:
            raise HandModelError(f"wrist index {self.wrist_index} out of range")
        if not self.contact_indices or not all(0 <= i < V for i in self.contact_indices):
            raise HandModelError("contact indices must be non-empty and valid")

    def _build_levels(self):
        depth = [0] * self.n_joints
        for j in range(1, self.n_joints):
            k, d = j, 0
            while self.parents[k] is not None:
                k, d = self.parents[k], d + 1
            depth[j] = d
        levels = []
        for d in range(1, max(depth) + 1):
            levels.append([j for j in range(self.n_joints) if depth[j] == d])
        return levels

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    @property
    def n_joints(self) -> int:
        return len(self.joint_rest_positions)

    @property
    def n_shape(self) -> int:
        return 0 if self.shape_dirs is None else len(self.shape_dirs)

    @property
    def rest_mesh(self) -> Mesh:
        return Mesh(self.template_vertices, self.faces)


@dataclass(frozen=True)
class HandParams:
    theta: tuple
    beta: tuple
    c1: SimilarityTransform = field(default_factory=SimilarityTransform)
    c2: SimilarityTransform = field(default_factory=SimilarityTransform)

    def __post_init__(self):
        theta = tuple(float(v) for v in np.ravel(self.theta))
        beta = tuple(float(v) for v in np.ravel(self.beta))
        if len(theta) != POSE_DIM:
            raise HandModelError(f"theta must have {POSE_DIM} values, got {len(theta)}")
        if len(beta) != SHAPE_DIM:
            raise HandModelError(f"beta must have {SHAPE_DIM} values, got {len(beta)}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def rest(cls, **kw) -> "HandParams":
        return cls(np.zeros(POSE_DIM), np.zeros(SHAPE_DIM), **kw)

    def to_dict(self) -> dict:
        return {"theta": list(self.theta), "beta": list(self.beta),
                "c1": self.c1.to_dict(), "c2": self.c2.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "HandParams":
        return cls(d["theta"], d["beta"], SimilarityTransform.from_dict(d["c1"]),
                   SimilarityTransform.from_dict(d["c2"]))


# ---------------------------------------------------------------------------
# skinning


def rodrigues(r):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3), differentiable.

    A tiny constant inside the angle keeps the zero-rotation case exact
    (identity) with a finite gradient.
    """
    r = ad.as_tensor(r)
    lead = r.shape[:-1]
    a = ad.sqrt(ad.tsum(ad.square(r), axis=-1, keepdims=True) + 1e-12)
    a = a.reshape(lead + (1, 1))
    k = (r @ _SKEW).reshape(lead + (3, 3))
    k2 = k @ k
    return np.eye(3) + (ad.sin(a) / a) * k + ((1.0 - ad.cos(a)) / ad.square(a)) * k2


def _shaped_template(model: HandModel, beta) -> Tensor:
    beta = ad.as_tensor(beta)
    if beta.shape[-1] != SHAPE_DIM:
        raise HandModelError(f"beta must have {SHAPE_DIM} values, got {beta.shape[-1]}")
    if model.shape_dirs is None:
        return ad.as_tensor(model.template_vertices)
    dirs = model.shape_dirs.reshape(model.n_shape, -1)
    b = beta if model.n_shape == SHAPE_DIM else beta[..., : model.n_shape]
    offset = (b @ dirs).reshape(beta.shape[:-1] + (model.n_vertices, 3))
    return model.template_vertices + offset


def pose_vertices(model: HandModel, theta, beta=None, root_rotation=None) -> Tensor:
    """Posed vertices as a Tensor, shape (..., V, 3) for theta of shape (..., 45).

    ``root_rotation`` optionally rotates the whole hand about the root joint
    (axis-angle); it is zero in normal use because global orientation lives
    in ``HandParams.c1``.
    """
    theta = ad.as_tensor(theta)
    if theta.shape[-1] != POSE_DIM:
        raise HandModelError(f"theta must have {POSE_DIM} values, got {theta.shape[-1]}")
    lead = theta.shape[:-1]
    if beta is None:
        beta = np.zeros(lead + (SHAPE_DIM,))
    verts = _shaped_template(model, beta)
    jr = model.joint_rest_positions
    J = model.n_joints

    local = rodrigues(theta.reshape(lead + (J - 1, 3)))  # joints 1..J-1
    if root_rotation is None:
        root_R = ad.as_tensor(np.broadcast_to(np.eye(3), lead + (1, 3, 3)))
    else:
        root_R = rodrigues(ad.as_tensor(root_rotation).reshape((1, 3)))
        if lead:
            root_R = root_R + np.zeros(lead + (1, 3, 3))
    root_t = ad.as_tensor(np.broadcast_to(jr[0], lead + (1, 3)))

    level_R, level_t, order = [root_R], [root_t], [0]
    pos_in_level = {0: 0}
    for joints in model._levels:
        prev_R, prev_t = level_R[-1], level_t[-1]
        pidx = [pos_in_level[model.parents[j]] for j in joints]
        pR = ad.take(prev_R, pidx, axis=-3)
        pt = ad.take(prev_t, pidx, axis=-2)
        R_loc = ad.take(local, [j - 1 for j in joints], axis=-3)
        offs = np.stack([jr[j] - jr[model.parents[j]] for j in joints])[..., None]
        level_R.append(pR @ R_loc)
        level_t.append((pR @ offs).reshape(pt.shape) + pt)
        for i, j in enumerate(joints):
            pos_in_level[j] = i
        order.extend(joints)

    world_R = ad.concat(level_R, axis=-3)
    world_t = ad.concat(level_t, axis=-2)
    perm = np.argsort(order)
    world_R = ad.take(world_R, perm, axis=-3)
    world_t = ad.take(world_t, perm, axis=-2)
    # transform that maps rest-pose points directly to posed points
    skin_t = world_t - (world_R @ jr[..., None]).reshape(world_t.shape)

    W = model.skinning_weights
    M = (W @ world_R.reshape(lead + (J, 9))).reshape(lead + (model.n_vertices, 3, 3))
    T = W @ skin_t
    rest = verts.reshape(verts.shape[:-1] + (1, 3))
    return ad.tsum(M * rest, axis=-1) + T


def lbs_forward(model: HandModel, theta, beta=None, root_rotation=None) -> Mesh:
    """Posed hand mesh (topology identical to the model)."""
    theta = np.asarray(ad.as_tensor(theta).data)
    if theta.shape != (POSE_DIM,):
        raise HandModelError(f"theta must have shape ({POSE_DIM},), got {theta.shape}")
    if beta is not None and np.shape(beta) != (SHAPE_DIM,):
        raise HandModelError(f"beta must have shape ({SHAPE_DIM},), got {np.shape(beta)}")
    v = pose_vertices(model, theta, beta, root_rotation)
    return Mesh(v.data, model.faces)


def regress_joints(model: HandModel, vertices):
    """Skeleton (K, 3) = joint_regressor @ vertices; Tensor in, Tensor out."""
    verts = vertices.vertices if isinstance(vertices, Mesh) else vertices
    if verts.shape[-2] != model.n_vertices:
        raise HandModelError(
            f"mesh has {verts.shape[-2]} vertices, model expects {model.n_vertices}")
    if isinstance(verts, Tensor):
        return model.joint_regressor @ verts
    return model.joint_regressor @ np.asarray(verts)


def wrist_point(model: HandModel, vertices) -> np.ndarray:
    verts = vertices.vertices if isinstance(vertices, Mesh) else np.asarray(vertices)
    if not 0 <= model.wrist_index < len(verts):
        raise HandModelError(f"wrist index {model.wrist_index} out of range for {len(verts)} vertices")
    return np.array(verts[model.wrist_index])


# ---------------------------------------------------------------------------
# procedural toy hand


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _tube(base, direction, ring_s, radius, tip_s, n_sides):
    """Closed tube along ``direction``: rings at arclengths ``ring_s`` plus
    an axial cap vertex at both ends.  Returns (verts, faces, s per vertex).
    """
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    e1 = np.array([0.0, 0.0, 1.0])
    e2 = np.cross(d, e1)
    verts, svals = [], []
    for s, r in zip(ring_s, radius):
        for j in range(n_sides):
            ang = 2 * math.pi * j / n_sides
            verts.append(base + s * d + r * (math.cos(ang) * e1 + math.sin(ang) * e2))
            svals.append(s)
    n_rings = len(ring_s)
    base_cap = len(verts)
    verts.append(base + ring_s[0] * d)
    svals.append(ring_s[0])
    tip = len(verts)
    verts.append(base + tip_s * d)
    svals.append(tip_s)

    def rv(k, j):
        return k * n_sides + j % n_sides

    faces = []
    for k in range(n_rings - 1):
        for j in range(n_sides):
            a, b, c, e = rv(k, j), rv(k, j + 1), rv(k + 1, j + 1), rv(k + 1, j)
            faces += [(a, c, b), (a, e, c)]
    for j in range(n_sides):
        faces.append((base_cap, rv(0, j), rv(0, j + 1)))
        faces.append((tip, rv(n_rings - 1, j + 1), rv(n_rings - 1, j)))
    return np.array(verts), np.array(faces), np.array(svals), tip


def make_toy_hand(seed: int = 0) -> HandModel:
    """Deterministic hand-like model with MANO-compatible pose layout.

    Palm: a 1 x 1 x 0.2 box centred at the origin, fingers extending along
    +y from its top edge, palm side facing +z (positive x-rotations curl
    fingers toward it).  Joint 0 is the wrist at the middle of the palm's
    bottom edge; joints 1..15 are three joints per finger in the order
    index, middle, ring, pinky, thumb.
    """
    rng = np.random.default_rng(seed)
    palm = make_primitive("box", (10, 10, 2), (1.0, 1.0, 0.2))
    pv = palm.vertices
    verts = [pv]
    faces = [palm.faces]
    n = len(pv)

    wrist_joint = np.array([0.0, -0.5, 0.0])
    joints = [wrist_joint]
    parents = [None]
    finger_joints = []
    fingertips = []
    weights_rows = [np.tile(np.eye(16)[0], (n, 1))]
    ring_centres = {}  # joint id -> vertex ids of the ring through it

    bases = {
        "index": ((-0.375, 0.5, 0.0), (0.0, 1.0, 0.0), (0.40, 0.28, 0.22)),
        "middle": ((-0.125, 0.5, 0.0), (0.0, 1.0, 0.0), (0.44, 0.30, 0.24)),
        "ring": ((0.125, 0.5, 0.0), (0.0, 1.0, 0.0), (0.42, 0.29, 0.22)),
        "pinky": ((0.375, 0.5, 0.0), (0.0, 1.0, 0.0), (0.32, 0.22, 0.20)),
        "thumb": ((-0.5, -0.15, 0.0), (-0.6, 0.8, 0.0), (0.34, 0.28, 0.24)),
    }
    blend = 0.04
    n_sides = 6
    for f_idx, name in enumerate(FINGER_NAMES):
        base, direction, seg = bases[name]
        base = np.asarray(base)
        seg = np.asarray(seg) * (1.0 + 0.05 * rng.uniform(-1.0, 1.0, size=3))
        d = np.asarray(direction) / np.linalg.norm(direction)
        bounds = np.concatenate([[0.0], np.cumsum(seg)])
        length = bounds[-1]
        j_ids = [1 + 3 * f_idx + k for k in range(3)]
        for k, jid in enumerate(j_ids):
            joints.append(base + bounds[k] * d)
            parents.append(0 if k == 0 else j_ids[k - 1])
        finger_joints.append(tuple(j_ids))

        rad0 = 0.075 if name != "thumb" else 0.085
        ring_s = []
        for k in range(3):
            m = max(2, int(math.ceil(seg[k] / 0.08)))
            ring_s += list(np.linspace(bounds[k], bounds[k + 1], m, endpoint=False))
        ring_s.append(length - 0.06)
        ring_s = np.array(ring_s)
        radius = rad0 * (1.0 - 0.25 * ring_s / length)
        tv, tf, ts, tip_local = _tube(base, d, ring_s, radius, length, n_sides)

        u0 = _smoothstep((ts + blend) / (2 * blend))
        u1 = _smoothstep((ts - bounds[1] + blend) / (2 * blend))
        u2 = _smoothstep((ts - bounds[2] + blend) / (2 * blend))
        w = np.zeros((len(tv), 16))
        w[:, 0] = 1.0 - u0
        w[:, j_ids[0]] = u0 - u1
        w[:, j_ids[1]] = u1 - u2
        w[:, j_ids[2]] = u2
        weights_rows.append(w)

        for k, jid in enumerate(j_ids):
            ring_k = int(np.argmin(np.abs(ring_s - bounds[k])))
            ring_centres[jid] = [n + ring_k * n_sides + j for j in range(n_sides)]
        fingertips.append(n + tip_local)
        verts.append(tv)
        faces.append(tf + n)
        n += len(tv)

    V = np.concatenate(verts)
    F = np.concatenate(faces)
    W = np.concatenate(weights_rows)
    W = np.maximum(W, 0.0)
    W /= W.sum(axis=1, keepdims=True)

    def nearest(p):
        return int(np.argmin(np.linalg.norm(pv - p, axis=1)))

    wrist_idx = nearest(wrist_joint)
    K = 16 + 5
    reg = np.zeros((K, len(V)))
    reg[0, nearest(wrist_joint + [-0.1, 0, 0])] = 1 / 3
    reg[0, wrist_idx] = 1 / 3
    reg[0, nearest(wrist_joint + [0.1, 0, 0])] = 1 / 3
    for jid, ids in ring_centres.items():
        reg[jid, ids] = 1.0 / len(ids)
    for k, tip in enumerate(fingertips):
        reg[16 + k, tip] = 1.0

    front = pv[:, 2] > 0.099
    palm_centre = np.array([0.0, 0.0, 0.1])
    palm_contacts = [nearest(palm_centre + off) for off in
                     ([-0.1, 0, 0], [0.1, 0, 0], [0, -0.1, 0], [0, 0.1, 0])]
    assert all(front[i] for i in palm_contacts)
    contacts = tuple(fingertips) + tuple(palm_contacts)

    # shape space: palm width, palm thickness, then smooth random fields
    dirs = np.zeros((SHAPE_DIM, len(V), 3))
    dirs[0, :, 0] = 0.05 * V[:, 0]
    dirs[1, :, 2] = 0.05 * V[:, 2]
    for b in range(2, SHAPE_DIM):
        freq = rng.normal(size=(3, 3)) * 1.5
        phase = rng.uniform(0, 2 * math.pi, size=3)
        dirs[b] = 0.01 * np.sin(V @ freq + phase)

    return HandModel(
        template_vertices=V,
        faces=F,
        skinning_weights=W,
        joint_rest_positions=np.array(joints),
        parents=tuple(parents),
        joint_regressor=reg,
        wrist_index=wrist_idx,
        contact_indices=contacts,
        shape_dirs=dirs,
        fingertip_indices=tuple(fingertips),
        finger_joints=tuple(finger_joints),
    )


# ---------------------------------------------------------------------------
# JSON


HAND_MODEL_FORMAT = "graspreenact.hand_model/1"


def save_hand_model(model: HandModel, path) -> None:
    doc = {
        "format": HAND_MODEL_FORMAT,
        "template_vertices": model.template_vertices.tolist(),
        "faces": model.faces.tolist(),
        "skinning_weights": model.skinning_weights.tolist(),
        "joint_rest_positions": model.joint_rest_positions.tolist(),
        "parents": list(model.parents),
        "joint_regressor": model.joint_regressor.tolist(),
        "wrist_index": model.wrist_index,
        "contact_indices": list(model.contact_indices),
        "fingertip_indices": list(model.fingertip_indices),
        "finger_joints": [list(c) for c in model.finger_joints],
        "shape_dirs": None if model.shape_dirs is None else model.shape_dirs.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_hand_model(path) -> HandModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != HAND_MODEL_FORMAT:
        raise HandModelError(f"{path}: unsupported hand model format {doc.get('format')!r}")
    return HandModel(
        template_vertices=doc["template_vertices"],
        faces=doc["faces"],
        skinning_weights=doc["skinning_weights"],
        joint_rest_positions=doc["joint_rest_positions"],
        parents=tuple(doc["parents"]),
        joint_regressor=doc["joint_regressor"],
        wrist_index=doc["wrist_index"],
        contact_indices=tuple(doc["contact_indices"]),
        fingertip_indices=tuple(doc.get("fingertip_indices", ())),
        finger_joints=tuple(tuple(c) for c in doc.get("finger_joints", ())),
        shape_dirs=doc.get("shape_dirs"),
    )
