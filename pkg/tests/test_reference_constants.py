"""Published constants the implementation is expected to carry."""

import dataclasses

import numpy as np
import pytest

from graspreenact.geometry import SimilarityTransform
from graspreenact.grasp_net import (RECONSTRUCTION_LOSS_WEIGHTS, GraspNetConfig, TrainConfig, baseline_config,
                                    init_grasp_net)
from graspreenact.hand_model import POSE_DIM
from graspreenact.renderer import TEXTURE_SIZE, TextureFitConfig


def test_parameter_totals():
    cog = init_grasp_net(GraspNetConfig()).count()
    mlp = init_grasp_net(baseline_config()).count()
    assert abs(cog - 0.49e6) <= 0.1 * 0.49e6
    assert abs(mlp - 0.97e6) <= 0.1 * 0.97e6
    assert mlp > cog


def test_texture_cube_size():
    assert TEXTURE_SIZE == 2
    assert TextureFitConfig().size == 2
    assert TextureFitConfig().steps == 300


def test_grasp_training_schedule():
    cfg = TrainConfig()
    assert cfg.epochs == 15
    assert cfg.betas == (0.5, 0.999)
    assert cfg.lr == cfg.critic_lr == 1e-5


def test_reconstruction_balance_weights():
    assert RECONSTRUCTION_LOSS_WEIGHTS == {"object": 1.0, "texture": 0.01, "refinement": 0.1}


def test_location_parameters_have_seven_scalars():
    fields = dataclasses.fields(SimilarityTransform)
    c = SimilarityTransform(2.0, (1.0, 2.0), (1.0, 0.0, 0.0, 0.0))
    sizes = [np.size(getattr(c, f.name)) for f in fields]
    assert sizes == [1, 2, 4] and sum(sizes) == 7


def test_pose_dimension():
    assert POSE_DIM == 45 == 15 * 3


@pytest.mark.parametrize("cfg", [GraspNetConfig(), baseline_config()])
def test_pose_in_and_out(cfg):
    p = init_grasp_net(cfg)
    assert p.arrays["fc_in.W"].shape[0] == 45
    assert p.arrays["out.W"].shape[1] == 45
