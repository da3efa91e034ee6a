"""Loss functionals for hand meshes, object meshes and grasps.

All losses accept numpy arrays or :class:`~graspreenact.autodiff.Tensor`
vertex positions and return a scalar Tensor, so they can sit on a tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import SimilarityTransform, apply_similarity, directed_neighbors, uniform_laplacian

__all__ = [
    "ContactSpec",
    "LossError",
    "nearest_indices",
    "chamfer_loss",
    "edge_loss",
    "laplacian_loss",
    "object_loss",
    "hand_loss",
    "contact_loss",
    "centroid_loss",
    "critic_forward",
    "critic_input_gradient",
    "gradient_penalty",
    "BRUTE_FORCE_LIMIT",
]

BRUTE_FORCE_LIMIT = 5000


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class ContactSpec:
    """Hand vertices that should touch the object."""

    vertex_indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.vertex_indices)
        if not idx:
            raise LossError("contact spec needs at least one vertex")
        if min(idx) < 0:
            raise LossError("contact indices must be non-negative")
        object.__setattr__(self, "vertex_indices", idx)

    @classmethod
    def for_model(cls, model) -> "ContactSpec":
        return cls(model.contact_indices)

    def validate(self, n_vertices: int) -> None:
        if max(self.vertex_indices) >= n_vertices:
            raise LossError(f"contact index {max(self.vertex_indices)} out of range for {n_vertices} vertices")


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def nearest_indices(P, Q) -> np.ndarray:
    """Index into ``Q`` of the nearest point for each row of ``P``.

    Exact; ties go to the lowest index.  Small problems are brute force, large
    ones use a k-d tree followed by an exact rescan of all candidates within
    the nearest radius, which reproduces the brute-force choice.
    """
    p, q = _data(P), _data(Q)
    if len(p) == 0 or len(q) == 0:
        raise LossError("nearest neighbour of an empty point set")
    if len(p) <= BRUTE_FORCE_LIMIT and len(q) <= BRUTE_FORCE_LIMIT:
        chunk = max(1, 2_000_000 // len(q))
        out = [np.argmin(((p[i:i + chunk, None, :] - q[None, :, :]) ** 2).sum(axis=-1), axis=1)
               for i in range(0, len(p), chunk)]
        return np.concatenate(out)
    tree = cKDTree(q)
    dist, _ = tree.query(p)
    out = np.empty(len(p), dtype=np.intp)
    for i, (pt, r) in enumerate(zip(p, dist)):
        cand = np.array(sorted(tree.query_ball_point(pt, r * (1 + 1e-9) + 1e-300)))
        d = ((pt[None, :] - q[cand]) ** 2).sum(axis=-1)
        out[i] = cand[np.argmin(d)]
    return out


def _nn_sqdist(P, Q) -> Tensor:
    idx = nearest_indices(P, Q)
    diff = ad.as_tensor(P) - ad.take(ad.as_tensor(Q), idx, axis=0)
    return ad.tsum(ad.square(diff), axis=-1)


def chamfer_loss(P, Q) -> Tensor:
    """Sum of squared nearest-neighbour distances, both directions."""
    if len(P) == 0 or len(Q) == 0:
        raise LossError("chamfer loss of an empty point set")
    return ad.tsum(_nn_sqdist(P, Q)) + ad.tsum(_nn_sqdist(Q, P))


def edge_loss(vertices, faces) -> Tensor:
    """Squared lengths over directed one-ring pairs (each edge counted twice)."""
    d = directed_neighbors(faces)
    v = ad.as_tensor(vertices)
    diff = ad.take(v, d[:, 0], axis=0) - ad.take(v, d[:, 1], axis=0)
    return ad.tsum(ad.square(diff))


def laplacian_loss(vertices_before, vertices_after, faces) -> Tensor:
    """Squared change of uniform Laplacian coordinates, summed over vertices."""
    before = _data(vertices_before)
    if np.shape(vertices_after) != before.shape:
        raise LossError(
            f"topology mismatch: {before.shape} vs {np.shape(vertices_after)}")
    L = uniform_laplacian(faces, len(before))
    delta_before = L @ before
    delta_after = ad.sparse_matmul(L, vertices_after)
    return ad.tsum(ad.square(delta_after - delta_before))


def object_loss(pred_vertices, gt_points, before_vertices, faces,
                weights=(1.0, 1.0, 1.0)) -> Tensor:
    """Chamfer + edge + Laplacian; unit weights unless configured otherwise."""
    wc, we, wl = weights
    return (wc * chamfer_loss(pred_vertices, gt_points)
            + we * edge_loss(pred_vertices, faces)
            + wl * laplacian_loss(before_vertices, pred_vertices, faces))


def hand_loss(pred_vertices, gt_vertices, pred_skeleton, gt_skeleton,
              c1: SimilarityTransform, c2: SimilarityTransform, gt_skeleton_2d) -> Tensor:
    """L1 mesh term + squared 3D skeleton term + squared 2D skeleton term.

    ``pred_skeleton`` is the regressed skeleton of the predicted mesh; the 2D
    term compares the (x, y) part of its ``c2`` projection.
    """
    if np.shape(pred_vertices) != np.shape(gt_vertices):
        raise LossError("predicted and ground-truth meshes differ in shape")
    if np.shape(pred_skeleton) != np.shape(gt_skeleton):
        raise LossError("predicted and ground-truth skeletons differ in shape")
    if np.shape(gt_skeleton_2d) != (np.shape(pred_skeleton)[0], 2):
        raise LossError("2D skeleton must be (K, 2)")
    mesh_term = ad.tsum(ad.tabs(apply_similarity(ad.as_tensor(pred_vertices), c1)
                                - apply_similarity(_data(gt_vertices), c1)))
    skel = ad.as_tensor(pred_skeleton)
    skel3d = ad.tsum(ad.square(apply_similarity(skel, c1) - _data(gt_skeleton)))
    proj = apply_similarity(skel, c2)[:, :2]
    skel2d = ad.tsum(ad.square(proj - _data(gt_skeleton_2d)))
    return mesh_term + skel3d + skel2d


def contact_loss(hand_vertices, spec: ContactSpec, object_vertices) -> Tensor:
    """Mean Euclidean distance from contact vertices to their nearest object vertex."""
    if len(object_vertices) == 0:
        raise LossError("contact loss against an empty object")
    spec.validate(len(hand_vertices))
    contacts = ad.take(ad.as_tensor(hand_vertices), list(spec.vertex_indices), axis=0)
    idx = nearest_indices(contacts, object_vertices)
    diff = contacts - ad.take(ad.as_tensor(object_vertices), idx, axis=0)
    return ad.mean(ad.norm(diff, axis=-1))


def centroid_loss(object_vertices, hand_vertices) -> Tensor:
    """Half the squared distance between the two vertex centroids."""
    if len(object_vertices) == 0 or len(hand_vertices) == 0:
        raise LossError("centroid loss of an empty mesh")
    d = ad.mean(ad.as_tensor(object_vertices), axis=0) - ad.mean(ad.as_tensor(hand_vertices), axis=0)
    return 0.5 * ad.tsum(ad.square(d))


# ---------------------------------------------------------------------------
# critic family and gradient penalty
#
# The critic is an MLP with tanh hidden layers and a linear scalar output:
#   h_0 = theta, h_k = tanh(h_{k-1} W_k + b_k), D = h_L w + c.
# Its input gradient is built in closed form on the tape, so the penalty is
# differentiable w.r.t. critic weights without second-order autodiff.


def critic_forward(layers, theta) -> Tensor:
    """``layers`` is a list of (W, b) pairs; the last one is the linear head."""
    h = ad.as_tensor(theta)
    for W, b in layers[:-1]:
        h = ad.tanh(h @ W + b)
    W, b = layers[-1]
    return (h @ W + b).reshape(h.shape[:-1])


def critic_input_gradient(layers, theta) -> Tensor:
    """dD/dtheta for each sample, shape like ``theta``."""
    h = ad.as_tensor(theta)
    slopes = []
    for W, b in layers[:-1]:
        h = ad.tanh(h @ W + b)
        slopes.append(1.0 - ad.square(h))
    W_out = ad.as_tensor(layers[-1][0])
    g = ad.reshape(W_out, (W_out.shape[0],))  # (H_L,)
    g = g + np.zeros(h.shape)  # broadcast to every sample
    for (W, _), s in zip(reversed(layers[:-1]), reversed(slopes)):
        g = (g * s) @ ad.swapaxes(ad.as_tensor(W), 0, 1)
    return g


def gradient_penalty(layers, theta_samples, lam: float = 10.0) -> Tensor:
    """``lam * mean((||dD/dtheta|| - 1)^2)`` over the samples."""
    g = critic_input_gradient(layers, ad.as_tensor(theta_samples).reshape((-1, np.shape(theta_samples)[-1])))
    return lam * ad.mean(ad.square(ad.norm(g, axis=-1) - 1.0))
