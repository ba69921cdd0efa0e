import json
import math
from dataclasses import dataclass

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hoiprior.lib.custom_types import DTYPE
from hoiprior.lib.error import ConfigError
from hoiprior.lib.util import (
    axis_angle_to_matrix,
    canonical_json,
    config_from_dict,
    config_to_dict,
    content_hash,
    file_hash,
    geodesic_angle_deg,
    matrix_to_axis_angle,
    read_json_with_backup,
    rotation_about_axis,
    skew,
    stage_rng,
    torch_generator,
    write_json,
    write_with_backup,
)

vectors = st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3)


@given(vectors, vectors)
def test_skew_is_the_cross_product(a, b):
    a, b = torch.tensor(a, dtype=DTYPE), torch.tensor(b, dtype=DTYPE)
    assert torch.allclose(skew(a) @ b, torch.linalg.cross(a, b), atol=1e-12)


@given(vectors)
@settings(max_examples=50)
def test_axis_angle_matrix_is_a_rotation_and_inverts(vector):
    axis_angle = torch.tensor(vector, dtype=DTYPE) * 1.5
    rotation = axis_angle_to_matrix(axis_angle)
    assert torch.allclose(rotation.T @ rotation, torch.eye(3, dtype=DTYPE), atol=1e-12)
    assert float(torch.linalg.det(rotation)) == pytest.approx(1.0)
    assert torch.allclose(axis_angle_to_matrix(matrix_to_axis_angle(rotation)), rotation, atol=1e-10)


def test_rotation_about_z_turns_x_into_y():
    rotation = rotation_about_axis("z", 90.0)
    turned = rotation @ torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE)
    assert torch.allclose(turned, torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE), atol=1e-12)


def test_geodesic_angle():
    assert geodesic_angle_deg(torch.eye(3), rotation_about_axis("x", 30.0)) == pytest.approx(30.0)
    assert geodesic_angle_deg(rotation_about_axis("y", 10.0), rotation_about_axis("y", -170.0)) == pytest.approx(180.0)
    assert geodesic_angle_deg(np.eye(3), np.eye(3)) == 0.0


def test_stage_rng_streams_are_reproducible_and_independent():
    first = stage_rng(2024, "group").standard_normal(5)
    assert np.array_equal(first, stage_rng(2024, "group").standard_normal(5))
    assert not np.array_equal(first, stage_rng(2024, "optimize").standard_normal(5))
    assert not np.array_equal(first, stage_rng(2025, "group").standard_normal(5))


def test_torch_generator_is_seeded_from_the_stream():
    a = torch.randn(4, generator=torch_generator(stage_rng(1, "flow")))
    b = torch.randn(4, generator=torch_generator(stage_rng(1, "flow")))
    assert torch.equal(a, b)


def test_canonical_json_sorts_keys_and_refuses_nan():
    assert canonical_json({"b": 1, "a": [1.5, "x"]}) == '{"a":[1.5,"x"],"b":1}'
    assert content_hash({"a": 1, "b": 2}) == content_hash({"b": 2, "a": 1})
    with pytest.raises(ValueError, match="not JSON compliant"):
        canonical_json({"a": math.nan})


def test_write_json_is_byte_stable(tmp_path):
    path = tmp_path / "out.json"
    write_json(path, {"z": [1, 2], "a": {"c": 0.1}})
    first = file_hash(path)
    write_json(path, {"a": {"c": 0.1}, "z": [1, 2]})
    assert file_hash(path) == first
    assert read_json_with_backup(path) == {"a": {"c": 0.1}, "z": [1, 2]}


def test_corrupt_json_is_restored_from_its_backup(tmp_path):
    path = tmp_path / "state.json"
    write_json(path, {"version": 1})
    write_json(path, {"version": 2})
    path.write_text("{not json", encoding="utf-8")
    assert read_json_with_backup(path) == {"version": 1}
    assert json.loads(path.read_text(encoding="utf-8")) == {"version": 1}


def test_failed_write_keeps_the_previous_file(tmp_path):
    path = tmp_path / "state.json"
    write_json(path, {"ok": True})

    def broken(target):
        target.write_text("partial", encoding="utf-8")
        msg = "disk full"
        raise OSError(msg)

    with pytest.raises(OSError, match="disk full"):
        write_with_backup(path, broken)
    assert read_json_with_backup(path) == {"ok": True}


def test_interrupted_write_keeps_the_previous_file(tmp_path):
    path = tmp_path / "state.json"
    write_json(path, {"ok": True})

    def interrupted(target):
        target.write_text("partial", encoding="utf-8")
        raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        write_with_backup(path, interrupted)
    assert json.loads(path.read_text(encoding="utf-8")) == {"ok": True}


@dataclass(frozen=True)
class _Settings:
    alpha: float = 1.0
    name: str = "x"


def test_config_from_dict_matches_keys_case_insensitively():
    cfg = config_from_dict(_Settings, {"ALPHA": 2.5})
    assert cfg == _Settings(alpha=2.5)
    assert config_to_dict(cfg) == {"alpha": 2.5, "name": "x"}
    assert config_from_dict(_Settings, None) == _Settings()


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="BETA"):
        config_from_dict(_Settings, {"BETA": 1})
