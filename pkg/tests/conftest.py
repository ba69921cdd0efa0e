"""Shared fixtures: the default models, a simple scene and a tiny dataset."""

import numpy as np
import pytest
import torch

from hoiprior.lib.custom_types import DTYPE
from hoiprior.lib.flow import FlowConfig
from hoiprior.lib.kinematics import InteractionModel, ObjectTemplate, StickBodyModel
from hoiprior.lib.models import BodyParams, CameraPose, Intrinsics, ObjectPose, SceneParams
from hoiprior.lib.synthetic import SyntheticFamilyConfig, synth_generate
from hoiprior.lib.util import rotation_about_axis

RIGHT_WRIST = 21


@pytest.fixture(scope="session")
def body() -> StickBodyModel:
    return StickBodyModel.default()


@pytest.fixture(scope="session")
def template() -> ObjectTemplate:
    return ObjectTemplate.box()


@pytest.fixture(scope="session")
def model(body, template) -> InteractionModel:
    return InteractionModel(body, template)


@pytest.fixture
def rest_body(body) -> BodyParams:
    return BodyParams.zeros(body.num_betas, body.num_articulated)


@pytest.fixture
def scene(body, rest_body) -> SceneParams:
    """The rest pose holding the box a little in front of the right wrist."""
    joints, _ = body.evaluate(rest_body)
    translation = joints[RIGHT_WRIST] + torch.tensor([0.0, 0.0, 0.25], dtype=DTYPE)
    return SceneParams(rest_body, ObjectPose(rotation_about_axis("y", 30.0), translation))


@pytest.fixture
def intr() -> Intrinsics:
    return Intrinsics(focal=1000.0, width=1000, height=1000)


@pytest.fixture
def front_camera() -> CameraPose:
    """A camera 3 m in front of the body, looking back at it."""
    return CameraPose.look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def tiny_flow_config() -> FlowConfig:
    return FlowConfig(depth=2, width=16, epochs=2, batch_size=8, lr=1e-3)


@pytest.fixture(scope="session")
def tiny_synth_config() -> SyntheticFamilyConfig:
    return SyntheticFamilyConfig(
        n_scenes=3,
        views_per_scene=6,
        body_jitter=0.005,
        object_jitter=0.005,
        mask_resolution=32,
        rng_seed=7,
    )


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_synth_config, body, template):
    """A synthetic dataset of 3 families of 6 views, written once per session."""
    directory = tmp_path_factory.mktemp("dataset")
    synth_generate(tiny_synth_config, body, template, directory)
    return directory


@pytest.fixture(scope="session")
def tiny_dataset(tiny_synth_config, body, template):
    return synth_generate(tiny_synth_config, body, template)
