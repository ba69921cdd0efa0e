"""Conditional normalizing flow over flattened 2.5D representations.

Each step of the flow is an actnorm layer, an invertible linear map in LU
form and an affine coupling layer whose conditioner sees the kept half of the
input and the condition vector. Everything runs in double precision on the
CPU.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
from torch import nn

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_types import DTYPE, ConditionVector, Tensor, as_array, as_tensor
from hoiprior.lib.error import (
    ConfigError,
    DatasetFormatError,
    DimensionMismatchError,
    EmptyInputError,
    NumericalDivergenceError,
)
from hoiprior.lib.models import Intrinsics, KeypointSet, Keypoints2D, Rep25D
from hoiprior.lib.projection import rep25d_from_2d, rep25d_from_3d
from hoiprior.lib.util import (
    config_from_dict,
    config_to_dict,
    content_hash,
    read_json_with_backup,
    torch_generator,
    write_json,
)

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))

CHECKPOINT_FORMAT = "hoiprior-flow"
CHECKPOINT_VERSION = 1
LOG_SCALE_BOUND = math.log(4.0)
ACTNORM_EPS = 1e-6


@dataclass(frozen=True)
class FlowConfig:
    """Settings for building and training the flow.

    Attributes
    ----------
    depth : int
        Number of flow steps, default 8.
    width : int
        Hidden units of each coupling conditioner, default 64.
    input_dim : int
        Length of the flattened representation, 3(n + 1). 0 means it is
        taken from the training data.
    cond_dim : int
        Length of the condition vector, 0 for an unconditioned flow. Set from
        the training data when input_dim is.
    dequant_sigma : float
        Std of the training noise, default 0.01.
    lr : float
        Adam learning rate, default 1e-4.
    epochs : int
        Training epochs, default 30.
    batch_size : int
        Samples per step, default 64.
    rng_seed : int
        Seed of initialisation and batch sampling, default 0.

    """

    depth: int = 8
    width: int = 64
    input_dim: int = 0
    cond_dim: int = 0
    dequant_sigma: float = 0.01
    lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 64
    rng_seed: int = 0

    def __post_init__(self) -> None:
        """Validate the settings."""
        if self.depth < 1 or self.width < 1 or self.epochs < 0 or self.batch_size < 1:
            msg = "depth, width and batch_size must be positive and epochs nonnegative"
            raise ConfigError(msg)
        if self.input_dim == 1 or self.input_dim < 0 or self.cond_dim < 0:
            msg = f"input_dim must be 0 or at least 2 and cond_dim nonnegative, got {self.input_dim}, {self.cond_dim}"
            raise ConfigError(msg)
        if self.dequant_sigma < 0 or self.lr < 0:
            msg = "dequant_sigma and lr must be nonnegative"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, values: dict | None) -> FlowConfig:
        """Create from a config file section."""
        return config_from_dict(cls, values)


# Layers ------------------------------------------------------------------------


def _check_finite(tensor: Tensor, where: str) -> None:
    if not torch.isfinite(tensor).all():
        msg = f"Non-finite values in the flow at {where}"
        raise NumericalDivergenceError(msg)


class ActNorm(nn.Module):
    """Per-dimension affine normalisation, y = (x - loc) exp(log_scale).

    The first batch seen through initialize sets loc and log_scale so the
    output has zero mean and unit variance per dimension.
    """

    def __init__(self, dim: int) -> None:
        """Create an identity actnorm layer."""
        super().__init__()
        self.loc = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.log_scale = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.register_buffer("initialized", torch.tensor(0.0, dtype=DTYPE))

    @torch.no_grad()
    def initialize(self, x: Tensor) -> None:
        """Set the parameters from a batch of inputs."""
        self.loc.copy_(x.mean(dim=0))
        std = x.std(dim=0) if x.shape[0] > 1 else torch.ones_like(x[0])
        self.log_scale.copy_(-torch.log(std + ACTNORM_EPS))
        self.initialized.fill_(1.0)

    def forward(self, x: Tensor, _cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Apply the layer, returning the output and log-determinant."""
        y = (x - self.loc) * torch.exp(self.log_scale)
        return y, self.log_scale.sum().expand(x.shape[0])

    def inverse(self, y: Tensor, _cond: Tensor | None = None) -> Tensor:
        """Undo the layer."""
        return y * torch.exp(-self.log_scale) + self.loc


class InvertibleLinear(nn.Module):
    """An invertible linear map y = x W with W = P L U.

    P is a fixed permutation, L is unit lower triangular and U is upper
    triangular with its diagonal stored as sign and log-magnitude, so the
    log-determinant is the sum of the log-magnitudes. W starts as a random
    rotation.
    """

    def __init__(self, dim: int, generator: torch.Generator) -> None:
        """Create the layer from a random orthogonal matrix."""
        super().__init__()
        weight = torch.randn(dim, dim, generator=generator, dtype=DTYPE)
        q, _ = torch.linalg.qr(weight)
        p, lower, upper = scipy.linalg.lu(q.numpy())
        diagonal = np.diag(upper)

        self.register_buffer("perm", torch.as_tensor(p, dtype=DTYPE))
        self.register_buffer("sign_s", torch.as_tensor(np.sign(diagonal), dtype=DTYPE))
        self.register_buffer("lower_mask", torch.tril(torch.ones(dim, dim, dtype=DTYPE), -1))
        self.register_buffer("eye", torch.eye(dim, dtype=DTYPE))
        self.lower = nn.Parameter(torch.as_tensor(lower, dtype=DTYPE))
        self.upper = nn.Parameter(torch.as_tensor(np.triu(upper, 1), dtype=DTYPE))
        self.log_s = nn.Parameter(torch.as_tensor(np.log(np.abs(diagonal)), dtype=DTYPE))

    def _factors(self) -> tuple[Tensor, Tensor]:
        lower = self.lower * self.lower_mask + self.eye
        upper = self.upper * self.lower_mask.T + torch.diag(self.sign_s * torch.exp(self.log_s))
        return lower, upper

    def weight(self) -> Tensor:
        """Get the full matrix W."""
        lower, upper = self._factors()
        return self.perm @ lower @ upper

    def forward(self, x: Tensor, _cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Apply the layer, returning the output and log-determinant."""
        return x @ self.weight(), self.log_s.sum().expand(x.shape[0])

    def inverse(self, y: Tensor, _cond: Tensor | None = None) -> Tensor:
        """Undo the layer with two triangular solves."""
        lower, upper = self._factors()
        x = torch.linalg.solve_triangular(upper, y, upper=True, left=False)
        x = torch.linalg.solve_triangular(lower, x, upper=False, left=False, unitriangular=True)
        return x @ self.perm.T


class AffineCoupling(nn.Module):
    """Affine coupling: the second half is scaled and shifted by a function
    of the first half and the condition.

    The log-scales are squashed into (-log 4, log 4) and the final layer of
    the conditioner starts at zero, so a fresh layer is the identity.
    """

    def __init__(self, dim: int, cond_dim: int, width: int) -> None:
        """Create the layer."""
        super().__init__()
        self.split = (dim + 1) // 2
        transformed = dim - self.split
        self.net = nn.Sequential(
            nn.Linear(self.split + cond_dim, width, dtype=DTYPE),
            nn.Tanh(),
            nn.Linear(width, 2 * transformed, dtype=DTYPE),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def _scale_shift(self, kept: Tensor, cond: Tensor | None) -> tuple[Tensor, Tensor]:
        inputs = kept if cond is None else torch.cat([kept, cond], dim=1)
        raw_scale, shift = self.net(inputs).chunk(2, dim=1)
        return LOG_SCALE_BOUND * torch.tanh(raw_scale), shift

    def forward(self, x: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Apply the layer, returning the output and log-determinant."""
        kept, moved = x[:, : self.split], x[:, self.split :]
        log_s, shift = self._scale_shift(kept, cond)
        return torch.cat([kept, moved * torch.exp(log_s) + shift], dim=1), log_s.sum(dim=1)

    def inverse(self, y: Tensor, cond: Tensor | None = None) -> Tensor:
        """Undo the layer."""
        kept, moved = y[:, : self.split], y[:, self.split :]
        log_s, shift = self._scale_shift(kept, cond)
        return torch.cat([kept, (moved - shift) * torch.exp(-log_s)], dim=1)


class ConditionalFlow(nn.Module):
    """The flow: depth steps of actnorm, invertible linear and coupling.

    This module is the flow's parameter set; the functions below operate on
    it.
    """

    def __init__(self, cfg: FlowConfig, generator: torch.Generator | None = None) -> None:
        """Create a freshly initialised flow.

        Parameters
        ----------
        cfg : FlowConfig
            The settings, with input_dim set.
        generator : torch.Generator | None
            The generator for the random rotations, seeded from cfg.rng_seed
            if not given.

        """
        super().__init__()
        if cfg.input_dim < 2:  # noqa: PLR2004
            msg = "The flow needs input_dim of at least 2"
            raise ConfigError(msg)
        if generator is None:
            generator = torch.Generator().manual_seed(cfg.rng_seed)
        self.cfg = cfg
        layers: list[nn.Module] = []
        for _ in range(cfg.depth):
            layers += [
                ActNorm(cfg.input_dim),
                InvertibleLinear(cfg.input_dim, generator),
                AffineCoupling(cfg.input_dim, cfg.cond_dim, cfg.width),
            ]
        self.layers = nn.ModuleList(layers)

    @property
    def initialized(self) -> bool:
        """Whether the actnorm layers have seen data."""
        return all(bool(layer.initialized) for layer in self.layers if isinstance(layer, ActNorm))

    def _prepare(self, x: Tensor, cond: Tensor | None) -> tuple[Tensor, Tensor | None, bool]:
        x = as_tensor(x)
        single = x.ndim == 1
        if x.shape[-1] != self.cfg.input_dim:
            msg = f"Flow input must have {self.cfg.input_dim} dimensions, got {x.shape[-1]}"
            raise DimensionMismatchError(msg)
        x = x.reshape(-1, self.cfg.input_dim)
        if self.cfg.cond_dim == 0:
            return x, None, single
        if cond is None:
            msg = f"The flow needs a condition vector of length {self.cfg.cond_dim}"
            raise DimensionMismatchError(msg)
        cond = as_tensor(cond)
        if cond.shape[-1] != self.cfg.cond_dim:
            msg = f"Condition vector must have length {self.cfg.cond_dim}, got {cond.shape[-1]}"
            raise DimensionMismatchError(msg)
        cond = cond.reshape(-1, self.cfg.cond_dim).expand(x.shape[0], -1)
        return x, cond, single

    @torch.no_grad()
    def initialize(self, x: Tensor, cond: Tensor | None = None) -> None:
        """Initialise every uninitialised actnorm layer from a batch.

        Parameters
        ----------
        x : Tensor
            A (B, input_dim) batch.
        cond : Tensor | None
            The matching conditions.

        """
        h, cond, _ = self._prepare(x, cond)
        for layer in self.layers:
            if isinstance(layer, ActNorm) and not bool(layer.initialized):
                layer.initialize(h)
            h, _ = layer(h, cond)

    def forward(self, x: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Map data to latents.

        Parameters
        ----------
        x : Tensor
            A (input_dim,) vector or a (B, input_dim) batch.
        cond : Tensor | None
            The condition vector(s).

        Returns
        -------
        tuple[Tensor, Tensor]
            The latents and the log-determinant of the Jacobian.

        """
        h, cond, single = self._prepare(x, cond)
        log_det = torch.zeros(h.shape[0], dtype=DTYPE)
        for i, layer in enumerate(self.layers):
            h, layer_log_det = layer(h, cond)
            log_det = log_det + layer_log_det
            _check_finite(h, f"layer {i} ({type(layer).__name__})")
        return (h[0], log_det[0]) if single else (h, log_det)

    def inverse(self, z: Tensor, cond: Tensor | None = None) -> Tensor:
        """Map latents to data, layer by layer in reverse."""
        h, cond, single = self._prepare(z, cond)
        for i, layer in reversed(list(enumerate(self.layers))):
            h = layer.inverse(h, cond)
            _check_finite(h, f"inverse of layer {i} ({type(layer).__name__})")
        return h[0] if single else h


FlowParams = ConditionalFlow


# Density -----------------------------------------------------------------------


def flow_forward(params: ConditionalFlow, x: Tensor, f: ConditionVector | None) -> tuple[Tensor, Tensor]:
    """Get z = F(x; f) and log|det dF/dx|."""
    return params(x, f)


def flow_inverse(params: ConditionalFlow, z: Tensor, f: ConditionVector | None) -> Tensor:
    """Get x = F^-1(z; f)."""
    return params.inverse(z, f)


def standard_normal_log_density(z: Tensor) -> Tensor:
    """Get the log density of a standard normal, summed over the last axis."""
    return -0.5 * (z**2).sum(dim=-1) - 0.5 * z.shape[-1] * math.log(2 * math.pi)


def log_prob_flat(params: ConditionalFlow, x: Tensor, f: ConditionVector | None) -> Tensor:
    """Get the log density of flattened representations.

    Parameters
    ----------
    params : ConditionalFlow
        The flow.
    x : Tensor
        A (input_dim,) vector or (B, input_dim) batch.
    f : ConditionVector | None
        The condition vector(s).

    Returns
    -------
    Tensor
        log q(F(x)) + log|det dF/dx|, a scalar or (B,) tensor.

    """
    z, log_det = params(x, f)
    return standard_normal_log_density(z) + log_det


def log_prob(params: ConditionalFlow, x25: Rep25D, f: ConditionVector | None) -> Tensor:
    """Get the log density of a 2.5D representation.

    Parameters
    ----------
    params : ConditionalFlow
        The flow.
    x25 : Rep25D
        The representation.
    f : ConditionVector | None
        The condition vector.

    Returns
    -------
    Tensor
        The scalar log density.

    """
    return log_prob_flat(params, x25.flatten(), f)


def sample_flat(params: ConditionalFlow, f: ConditionVector | None, rng: np.random.Generator, count: int) -> Tensor:
    """Draw raw samples in the flattened data space.

    Parameters
    ----------
    params : ConditionalFlow
        The flow.
    f : ConditionVector | None
        The condition vector.
    rng : np.random.Generator
        The random generator.
    count : int
        The number of samples.

    Returns
    -------
    Tensor
        The (count, input_dim) samples.

    """
    z = torch.as_tensor(rng.standard_normal((count, params.cfg.input_dim)), dtype=DTYPE)
    with torch.no_grad():
        return params.inverse(z, f)


def sample(params: ConditionalFlow, f: ConditionVector | None, rng: np.random.Generator) -> Rep25D:
    """Draw a 2.5D representation, re-normalising the ray directions.

    Parameters
    ----------
    params : ConditionalFlow
        The flow.
    f : ConditionVector | None
        The condition vector.
    rng : np.random.Generator
        The random generator.

    Returns
    -------
    Rep25D
        The sample.

    """
    return Rep25D.from_flat(sample_flat(params, f, rng, 1)[0])


def condition_from_keypoints(kps: Keypoints2D, intr: Intrinsics) -> ConditionVector:
    """Get the default condition vector of an image.

    Parameters
    ----------
    kps : Keypoints2D
        The image's 2D keypoints.
    intr : Intrinsics
        The image's intrinsics.

    Returns
    -------
    ConditionVector
        The keypoints divided by half the image size, flattened.

    """
    half = torch.tensor([intr.width / 2, intr.height / 2], dtype=DTYPE)
    return (kps.points.detach() / half).reshape(-1)


def rep25d_from_scene_views(kps: KeypointSet, cameras: list) -> list[Rep25D]:
    """Get the 2.5D representations of one 3D keypoint set seen from several cameras.

    Parameters
    ----------
    kps : KeypointSet
        The ground truth 3D keypoints.
    cameras : list[CameraPose]
        The cameras.

    Returns
    -------
    list[Rep25D]
        One representation per camera.

    """
    return [rep25d_from_3d(kps, cam.translation) for cam in cameras]


# Training ----------------------------------------------------------------------


@dataclass
class TrainingResult:
    """The outcome of training: the flow, the mean loss of each epoch and
    whether training stopped on a non-finite loss.
    """

    flow: ConditionalFlow
    loss_curve: list[float] = field(default_factory=list)
    diverged: bool = False


def clusters_to_samples(clusters: list) -> list[tuple[ConditionVector, list[Rep25D]]]:
    """Turn (condition, cluster) pairs into (condition, representations) pairs.

    Empty clusters are skipped.

    Parameters
    ----------
    clusters : list[tuple[ConditionVector, Cluster]]
        The training clusters.

    Returns
    -------
    list[tuple[ConditionVector, list[Rep25D]]]
        The representations of every retained neighbor.

    """
    samples = []
    for cond, cluster in clusters:
        if cluster.is_empty:
            continue
        reps = [rep25d_from_2d(e.keypoints, e.camera, e.intrinsics) for e in cluster.entries]
        samples.append((cond, reps))
    return samples


def train(clusters: list, cfg: FlowConfig) -> TrainingResult:
    """Train a flow on clusters of neighboring views.

    Parameters
    ----------
    clusters : list[tuple[ConditionVector, Cluster]]
        The condition of each image with its cluster.
    cfg : FlowConfig
        The settings.

    Returns
    -------
    TrainingResult
        The trained flow and its loss curve.

    """
    return train_on_samples(clusters_to_samples(clusters), cfg)


def train_on_samples(samples: list[tuple[ConditionVector | None, list[Rep25D]]], cfg: FlowConfig) -> TrainingResult:
    """Train a flow by maximum likelihood on (condition, representations) pairs.

    Each step draws a batch of images, one random representation per image,
    adds Gaussian dequantisation noise and takes an Adam step on the mean
    negative log-likelihood. The actnorm layers are initialised from the first
    batch. A non-finite loss stops training and restores the parameters of
    the last completed epoch.

    Parameters
    ----------
    samples : list[tuple[ConditionVector | None, list[Rep25D]]]
        The training data; every representation list must be nonempty.
    cfg : FlowConfig
        The settings. input_dim and cond_dim are filled in from the data when
        they are 0.

    Returns
    -------
    TrainingResult
        The trained flow and its loss curve.

    """
    samples = [(cond, reps) for cond, reps in samples if reps]
    if not samples:
        msg = "No training samples with nonempty clusters"
        raise EmptyInputError(msg)

    conditions = [None if cond is None else as_tensor(cond).reshape(-1) for cond, _ in samples]
    flat = [torch.stack([rep.flatten().detach() for rep in reps]) for _, reps in samples]
    input_dim = flat[0].shape[1]
    cond_dim = 0 if conditions[0] is None else conditions[0].shape[0]
    if cfg.input_dim == 0:
        cfg = replace(cfg, input_dim=input_dim, cond_dim=cond_dim)
    if (cfg.input_dim, cfg.cond_dim) != (input_dim, cond_dim):
        msg = f"Training data has dims ({input_dim}, {cond_dim}) but the config says ({cfg.input_dim}, {cfg.cond_dim})"
        raise DimensionMismatchError(msg)

    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    flow = ConditionalFlow(cfg, torch_generator(rng))
    optimizer = torch.optim.Adam(flow.parameters(), lr=cfg.lr)
    cond_matrix = None if cond_dim == 0 else torch.stack(conditions)

    total = sum(f.shape[0] for f in flat)
    steps_per_epoch = max(1, math.ceil(total / cfg.batch_size))
    result = TrainingResult(flow)
    last_good = copy.deepcopy(flow.state_dict())

    LOGGER.info(
        "Training flow: %d images, %d representations, dim %d, cond %d, %d epochs",
        len(samples),
        total,
        input_dim,
        cond_dim,
        cfg.epochs,
    )
    for epoch in range(cfg.epochs):
        order = rng.permutation(np.resize(rng.permutation(len(samples)), steps_per_epoch * cfg.batch_size))
        losses = []
        try:
            for step in range(steps_per_epoch):
                batch = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
                x = torch.stack([flat[i][rng.integers(flat[i].shape[0])] for i in batch])
                x = x + cfg.dequant_sigma * torch.as_tensor(rng.standard_normal(x.shape), dtype=DTYPE)
                cond = None if cond_matrix is None else cond_matrix[batch]
                if not flow.initialized:
                    flow.initialize(x, cond)
                    last_good = copy.deepcopy(flow.state_dict())
                loss = -log_prob_flat(flow, x, cond).mean()
                _check_finite(loss, "the training loss")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(float(loss))
        except NumericalDivergenceError:
            LOGGER.exception("Flow training diverged in epoch %d, restoring the last finite parameters", epoch + 1)
            flow.load_state_dict(last_good)
            result.diverged = True
            break
        last_good = copy.deepcopy(flow.state_dict())
        result.loss_curve.append(float(np.mean(losses)))
        LOGGER.info("Epoch %d/%d: mean NLL %.4f", epoch + 1, cfg.epochs, result.loss_curve[-1])

    return result


# Checkpoints -------------------------------------------------------------------


def checkpoint_dict(flow: ConditionalFlow) -> dict:
    """Get the checkpoint container of a flow.

    The layers are listed in state_dict order, each with its name, shape and
    flattened values, and the hash covers the config and the layers.

    Parameters
    ----------
    flow : ConditionalFlow
        The flow.

    Returns
    -------
    dict
        The checkpoint.

    """
    config = config_to_dict(flow.cfg)
    layers = [
        {"name": name, "shape": list(tensor.shape), "values": as_array(tensor).reshape(-1).tolist()}
        for name, tensor in flow.state_dict().items()
    ]
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "layers": layers,
        "sha256": content_hash({"config": config, "layers": layers}),
    }


def flow_from_checkpoint_dict(checkpoint: dict) -> ConditionalFlow:
    """Rebuild a flow from its checkpoint container.

    Parameters
    ----------
    checkpoint : dict
        The checkpoint written by checkpoint_dict.

    Returns
    -------
    ConditionalFlow
        The flow.

    """
    if checkpoint.get("format") != CHECKPOINT_FORMAT or checkpoint.get("version") != CHECKPOINT_VERSION:
        msg = f"Not a version {CHECKPOINT_VERSION} flow checkpoint"
        raise DatasetFormatError(msg)
    if content_hash({"config": checkpoint["config"], "layers": checkpoint["layers"]}) != checkpoint["sha256"]:
        msg = "Flow checkpoint hash does not match its content"
        raise DatasetFormatError(msg)
    flow = ConditionalFlow(FlowConfig(**checkpoint["config"]))
    state = {
        layer["name"]: torch.as_tensor(layer["values"], dtype=DTYPE).reshape(layer["shape"])
        for layer in checkpoint["layers"]
    }
    flow.load_state_dict(state)
    return flow


def save_checkpoint(flow: ConditionalFlow, path: str | Path) -> None:
    """Write a flow checkpoint, keeping a backup of any previous one."""
    write_json(path, checkpoint_dict(flow))
    LOGGER.info("Saved flow checkpoint to %s", path)


def load_checkpoint(path: str | Path) -> ConditionalFlow:
    """Load a flow checkpoint written by save_checkpoint."""
    return flow_from_checkpoint_dict(read_json_with_backup(path))
