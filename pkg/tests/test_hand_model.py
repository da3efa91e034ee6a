import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from graspreenact.autodiff import Tensor, finite_diff_check
from graspreenact import autodiff as ad
from graspreenact.hand_model import (POSE_DIM, SHAPE_DIM, HandModel, HandModelError, HandParams, lbs_forward,
                                     load_hand_model, make_toy_hand, pose_vertices, regress_joints,
                                     save_hand_model, wrist_point)


def fk_oracle(model, theta, beta=None):
    """Per-vertex weighted sum of per-joint rigid transforms, coded from scratch."""
    v = model.template_vertices.copy()
    if beta is not None:
        v = v + np.tensordot(beta, model.shape_dirs, axes=1)
    jr = model.joint_rest_positions
    J = model.n_joints
    R = [None] * J
    t = [None] * J

    def world(j):
        if R[j] is not None:
            return
        local = np.eye(3) if j == 0 else Rotation.from_rotvec(theta[3 * (j - 1):3 * j]).as_matrix()
        if model.parents[j] is None:
            R[j], t[j] = local, jr[j] - local @ jr[j]
        else:
            p = model.parents[j]
            world(p)
            # x -> R_p (R_l (x - j) + j) + t_p
            R[j] = R[p] @ local
            t[j] = R[p] @ (jr[j] - local @ jr[j]) + t[p]

    for j in range(J):
        world(j)
    out = np.zeros_like(v)
    for i in range(len(v)):
        for j in np.flatnonzero(model.skinning_weights[i]):
            out[i] += model.skinning_weights[i, j] * (R[j] @ v[i] + t[j])
    return out


def test_toy_hand_invariants(toy_hand):
    m = toy_hand
    assert np.abs(m.skinning_weights.sum(1) - 1).max() < 1e-6
    assert (m.skinning_weights >= 0).all()
    assert np.abs(m.joint_regressor.sum(1) - 1).max() < 1e-6
    assert m.n_joints == 16 and m.parents[0] is None
    assert len(m.fingertip_indices) == 5
    assert m.shape_dirs.shape == (SHAPE_DIM, m.n_vertices, 3)


def test_toy_hand_deterministic():
    a, b = make_toy_hand(0), make_toy_hand(0)
    for f in dataclasses.fields(HandModel):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, np.ndarray):
            np.testing.assert_array_equal(x, y)
        else:
            assert x == y
    c = make_toy_hand(1)
    assert not np.array_equal(a.joint_rest_positions, c.joint_rest_positions)


def test_rest_pose_identity(toy_hand):
    v = lbs_forward(toy_hand, np.zeros(POSE_DIM), np.zeros(SHAPE_DIM)).vertices
    assert np.abs(v - toy_hand.template_vertices).max() < 1e-9


def test_linear_shape_model(toy_hand):
    beta = np.eye(SHAPE_DIM)[0]
    v = lbs_forward(toy_hand, np.zeros(POSE_DIM), beta).vertices
    assert np.abs(v - (toy_hand.template_vertices + toy_hand.shape_dirs[0])).max() < 1e-9


def test_matches_per_vertex_fk_oracle(toy_hand, rng):
    for _ in range(3):
        theta = rng.normal(0, 0.5, POSE_DIM)
        beta = rng.normal(0, 1.0, SHAPE_DIM)
        got = lbs_forward(toy_hand, theta, beta).vertices
        assert np.abs(got - fk_oracle(toy_hand, theta, beta)).max() < 1e-9


def test_curling_first_finger_moves_tip_toward_palm(toy_hand):
    joints = toy_hand.finger_joints[0]
    theta = np.zeros(POSE_DIM)
    for j in joints:
        theta[3 * (j - 1)] = 1.2
    tip = toy_hand.fingertip_indices[0]
    rest = toy_hand.template_vertices[tip]
    posed = lbs_forward(toy_hand, theta).vertices[tip]
    base = toy_hand.joint_rest_positions[joints[0]]
    length = np.linalg.norm(rest - base)
    palm_centre = np.array([0.0, 0.0, 0.1])
    moved = np.linalg.norm(rest - palm_centre) - np.linalg.norm(posed - palm_centre)
    assert moved >= 0.2 * length
    assert posed[2] > rest[2]  # toward the palm side of the palm plane
    # other fingertips stay put
    others = list(toy_hand.fingertip_indices[1:])
    np.testing.assert_allclose(lbs_forward(toy_hand, theta).vertices[others],
                               toy_hand.template_vertices[others], atol=1e-12)


def test_root_rotation_equivariance(toy_hand, rng):
    theta = rng.normal(0, 0.4, POSE_DIM)
    r = rng.normal(0, 0.7, 3)
    R = Rotation.from_rotvec(r).as_matrix()
    j0 = toy_hand.joint_rest_positions[0]
    plain = lbs_forward(toy_hand, theta).vertices
    rotated = lbs_forward(toy_hand, theta, root_rotation=r).vertices
    assert np.abs(rotated - ((plain - j0) @ R.T + j0)).max() < 1e-9


def test_pose_and_shape_gradients(toy_hand, rng):
    w = rng.normal(size=(toy_hand.n_vertices, 3))
    beta0 = rng.normal(size=SHAPE_DIM)
    for _ in range(2):
        theta0 = rng.normal(0, 0.4, POSE_DIM)
        err = finite_diff_check(lambda t: ad.tsum(pose_vertices(toy_hand, t, beta0) * w), theta0)
        assert err < 1e-4
        err = finite_diff_check(lambda b: ad.tsum(pose_vertices(toy_hand, theta0, b) * w), beta0)
        assert err < 1e-4


def test_batched_pose_matches_single(toy_hand, rng):
    thetas = rng.normal(0, 0.3, (3, POSE_DIM))
    batch = pose_vertices(toy_hand, thetas).data
    for i in range(3):
        np.testing.assert_allclose(batch[i], lbs_forward(toy_hand, thetas[i]).vertices, atol=1e-12)


def test_topology_unchanged(toy_hand, rng):
    mesh = lbs_forward(toy_hand, rng.normal(0, 0.5, POSE_DIM))
    np.testing.assert_array_equal(mesh.faces, toy_hand.faces)


def test_dimension_errors(toy_hand):
    with pytest.raises(HandModelError):
        lbs_forward(toy_hand, np.zeros(44))
    with pytest.raises(HandModelError):
        lbs_forward(toy_hand, np.zeros(45), np.zeros(9))
    with pytest.raises(HandModelError):
        HandParams(np.zeros(45), np.zeros(3))
    with pytest.raises(HandModelError):
        regress_joints(toy_hand, np.zeros((10, 3)))


def test_invalid_models_rejected(toy_hand):
    bad_w = toy_hand.skinning_weights * 1.1
    with pytest.raises(HandModelError):
        dataclasses.replace(toy_hand, skinning_weights=bad_w)
    parents = list(toy_hand.parents)
    parents[2], parents[3] = 3, 2  # cycle
    with pytest.raises(HandModelError):
        dataclasses.replace(toy_hand, parents=tuple(parents))
    with pytest.raises(HandModelError):
        dataclasses.replace(toy_hand, wrist_index=toy_hand.n_vertices)


def test_regressor_one_hot_rows_select_vertices(toy_hand, rng):
    mesh = lbs_forward(toy_hand, rng.normal(0, 0.3, POSE_DIM))
    skel = regress_joints(toy_hand, mesh)
    np.testing.assert_array_equal(skel[16:], mesh.vertices[list(toy_hand.fingertip_indices)])


def test_regressor_translation_and_matmul_oracle(toy_hand, rng):
    reg = rng.uniform(size=(21, toy_hand.n_vertices))
    reg /= reg.sum(1, keepdims=True)
    m = dataclasses.replace(toy_hand, joint_regressor=reg)
    verts = rng.normal(size=(m.n_vertices, 3))
    naive = np.array([[sum(reg[k, i] * verts[i, c] for i in range(m.n_vertices)) for c in range(3)]
                      for k in range(21)])
    np.testing.assert_allclose(regress_joints(m, verts), naive, atol=1e-9)
    shift = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(regress_joints(m, verts + shift), naive + shift, atol=1e-9)
    g = regress_joints(m, Tensor(verts))
    assert isinstance(g, Tensor)


def test_wrist_point(toy_hand, rng):
    rest = toy_hand.rest_mesh
    np.testing.assert_array_equal(wrist_point(toy_hand, rest), toy_hand.template_vertices[toy_hand.wrist_index])
    np.testing.assert_allclose(wrist_point(toy_hand, rest.translated([1, 2, 3])),
                               wrist_point(toy_hand, rest) + [1, 2, 3])
    posed = lbs_forward(toy_hand, rng.normal(0, 0.3, POSE_DIM))
    np.testing.assert_array_equal(wrist_point(toy_hand, posed), posed.vertices[toy_hand.wrist_index])
    with pytest.raises(HandModelError):
        wrist_point(toy_hand, posed.vertices[:10])


def test_json_roundtrip(toy_hand, tmp_path):
    save_hand_model(toy_hand, tmp_path / "h.json")
    back = load_hand_model(tmp_path / "h.json")
    for f in dataclasses.fields(HandModel):
        x, y = getattr(toy_hand, f.name), getattr(back, f.name)
        if isinstance(x, np.ndarray):
            np.testing.assert_array_equal(x, y)
        else:
            assert x == y


def test_hand_params_roundtrip():
    p = HandParams.rest()
    assert HandParams.from_dict(p.to_dict()) == p


@given(arrays(np.float64, 3, elements=st.floats(-1, 1)))
def test_translation_invariant_displacements(toy_hand, shift):
    # skinning is affine: translating the template translates the output
    m = dataclasses.replace(toy_hand, template_vertices=toy_hand.template_vertices + shift,
                            joint_rest_positions=toy_hand.joint_rest_positions + shift)
    theta = np.linspace(-0.5, 0.5, POSE_DIM)
    np.testing.assert_allclose(lbs_forward(m, theta).vertices,
                               lbs_forward(toy_hand, theta).vertices + shift, atol=1e-9)
