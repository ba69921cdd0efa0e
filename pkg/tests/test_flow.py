import numpy as np
import pytest
import torch

from hoiprior.lib.custom_types import DTYPE
from hoiprior.lib.error import ConfigError, DatasetFormatError, DimensionMismatchError, EmptyInputError
from hoiprior.lib.flow import (
    ConditionalFlow,
    FlowConfig,
    checkpoint_dict,
    condition_from_keypoints,
    flow_forward,
    flow_inverse,
    flow_from_checkpoint_dict,
    load_checkpoint,
    log_prob,
    log_prob_flat,
    sample,
    sample_flat,
    save_checkpoint,
    train_on_samples,
)
from hoiprior.lib.models import Intrinsics, Keypoints2D, Rep25D
from hoiprior.lib.projection import rep25d_from_3d

DIM = 9
COND = 4


@pytest.fixture
def flow():
    """A small conditioned flow with every layer moved off the identity."""
    generator = torch.Generator().manual_seed(0)
    flow = ConditionalFlow(FlowConfig(depth=3, width=8, input_dim=DIM, cond_dim=COND), generator)
    flow.initialize(torch.randn(16, DIM, generator=generator, dtype=DTYPE), torch.zeros(COND, dtype=DTYPE))
    with torch.no_grad():
        for parameter in flow.parameters():
            parameter.add_(0.1 * torch.randn(parameter.shape, generator=generator, dtype=DTYPE))
    return flow


@pytest.fixture
def cond():
    return torch.tensor([0.1, -0.2, 0.3, 0.05], dtype=DTYPE)


def test_flow_config_validation():
    with pytest.raises(ConfigError):
        FlowConfig(input_dim=1)
    with pytest.raises(ConfigError):
        FlowConfig(depth=0)
    with pytest.raises(ConfigError):
        ConditionalFlow(FlowConfig())
    assert FlowConfig.from_dict({"DEPTH": 2, "WIDTH": 4}) == FlowConfig(depth=2, width=4)


def test_fresh_couplings_are_the_identity():
    flow = ConditionalFlow(FlowConfig(depth=1, width=4, input_dim=4))
    coupling = flow.layers[2]
    x = torch.randn(5, 4, dtype=DTYPE)
    y, log_det = coupling(x)
    assert torch.equal(y, x)
    assert torch.equal(log_det, torch.zeros(5, dtype=DTYPE))
    assert not flow.initialized


def test_inverse_undoes_forward(flow, cond):
    x = torch.randn(12, DIM, dtype=DTYPE)
    z, _ = flow_forward(flow, x, cond)
    assert torch.allclose(flow_inverse(flow, z, cond), x, atol=1e-10)
    single, _ = flow_forward(flow, x[0], cond)
    assert single.shape == (DIM,)
    assert torch.allclose(single, z[0])


def test_log_determinant_matches_the_jacobian(flow, cond):
    x = torch.randn(DIM, dtype=DTYPE)
    jacobian = torch.autograd.functional.jacobian(lambda v: flow(v, cond)[0], x)
    _, log_det = flow(x, cond)
    assert float(log_det) == pytest.approx(float(torch.linalg.slogdet(jacobian)[1]), abs=1e-9)


def test_log_prob_gradient_matches_finite_differences(flow, cond):
    x = torch.randn(DIM, dtype=DTYPE, requires_grad=True)
    assert torch.autograd.gradcheck(lambda v: log_prob_flat(flow, v, cond), (x,))


def test_condition_changes_the_density(flow, cond):
    x = torch.randn(DIM, dtype=DTYPE)
    assert float(log_prob_flat(flow, x, cond)) != pytest.approx(float(log_prob_flat(flow, x, -cond)))


def test_dimension_checks(flow, cond):
    with pytest.raises(DimensionMismatchError, match="dimensions"):
        log_prob_flat(flow, torch.zeros(DIM + 3), cond)
    with pytest.raises(DimensionMismatchError, match="condition"):
        log_prob_flat(flow, torch.zeros(DIM), None)
    with pytest.raises(DimensionMismatchError, match="length"):
        log_prob_flat(flow, torch.zeros(DIM), torch.zeros(COND + 1))


def test_samples_are_reproducible_representations(flow, cond):
    rep = sample(flow, cond, np.random.Generator(np.random.Philox(9)))
    again = sample(flow, cond, np.random.Generator(np.random.Philox(9)))
    assert isinstance(rep, Rep25D)
    assert rep.n == 2
    assert torch.allclose(torch.linalg.norm(rep.directions, dim=1), torch.ones(2, dtype=DTYPE))
    assert torch.equal(rep.flatten(), again.flatten())
    assert sample_flat(flow, cond, np.random.Generator(np.random.Philox(9)), 5).shape == (5, DIM)
    assert torch.isfinite(log_prob(flow, rep, cond))


def test_condition_from_keypoints():
    kps = Keypoints2D([[320.0, -240.0], [0.0, 120.0]])
    f = condition_from_keypoints(kps, Intrinsics(500.0, 640, 480))
    assert torch.allclose(f, torch.tensor([1.0, -1.0, 0.0, 0.5], dtype=DTYPE))


def test_checkpoint_round_trip(tmp_path, flow, cond):
    path = tmp_path / "flow.json"
    save_checkpoint(flow, path)
    loaded = load_checkpoint(path)
    x = torch.randn(3, DIM, dtype=DTYPE)
    assert torch.equal(log_prob_flat(loaded, x, cond), log_prob_flat(flow, x, cond))
    assert loaded.initialized


def test_tampered_checkpoint_is_refused(flow):
    checkpoint = checkpoint_dict(flow)
    checkpoint["layers"][0]["values"][0] += 1.0
    with pytest.raises(DatasetFormatError, match="hash"):
        flow_from_checkpoint_dict(checkpoint)
    with pytest.raises(DatasetFormatError, match="version"):
        flow_from_checkpoint_dict({**checkpoint_dict(flow), "version": 99})


def _toy_samples():
    rng = np.random.default_rng(4)
    samples = []
    for _ in range(12):
        points = torch.as_tensor(rng.normal(size=(2, 3)) * 0.2 + [0.0, 0.0, 3.0], dtype=DTYPE)
        cond = torch.as_tensor(rng.normal(size=COND), dtype=DTYPE)
        reps = [rep25d_from_3d(points, torch.as_tensor(rng.normal(size=3) * 0.1, dtype=DTYPE)) for _ in range(3)]
        samples.append((cond, reps))
    return samples


def test_training_fills_in_the_dimensions_and_lowers_the_loss(tiny_flow_config):
    cfg = FlowConfig(depth=2, width=16, epochs=15, batch_size=8, lr=5e-3)
    result = train_on_samples(_toy_samples(), cfg)
    assert (result.flow.cfg.input_dim, result.flow.cfg.cond_dim) == (DIM, COND)
    assert not result.diverged
    assert len(result.loss_curve) == 15
    assert result.loss_curve[-1] < result.loss_curve[0]
    assert result.flow.initialized

    again = train_on_samples(_toy_samples(), tiny_flow_config)
    repeat = train_on_samples(_toy_samples(), tiny_flow_config)
    assert again.loss_curve == repeat.loss_curve


def test_training_needs_samples(tiny_flow_config):
    with pytest.raises(EmptyInputError):
        train_on_samples([], tiny_flow_config)
    with pytest.raises(EmptyInputError):
        train_on_samples([(None, [])], tiny_flow_config)
    with pytest.raises(DimensionMismatchError):
        train_on_samples(_toy_samples(), FlowConfig(depth=1, input_dim=12, cond_dim=COND))


def test_unconditioned_density_integrates_to_one():
    generator = torch.Generator().manual_seed(4)
    flow = ConditionalFlow(FlowConfig(depth=2, width=8, input_dim=2), generator)
    flow.initialize(torch.randn(64, 2, generator=generator, dtype=DTYPE))
    with torch.no_grad():
        for parameter in flow.parameters():
            parameter.add_(0.05 * torch.randn(parameter.shape, generator=generator, dtype=DTYPE))

    step = 0.05
    axis = torch.arange(-6.0, 6.0 + step / 2, step, dtype=DTYPE)
    grid = torch.cartesian_prod(axis, axis)
    with torch.no_grad():
        mass = float(torch.exp(log_prob_flat(flow, grid, None)).sum()) * step**2
    assert mass == pytest.approx(1.0, abs=0.02)
