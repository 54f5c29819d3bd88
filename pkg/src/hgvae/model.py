"""The hierarchical graph-convolutional VAE.

The encoder contracts the ``N_nodes x coefficients`` input graph stage by stage,
leaving one feature graph per latent layer. The decoder walks the latent layers
top-down along a deterministic route: each layer reads its prior from the route,
its posterior from the route concatenated with the matching encoder features,
samples ``z`` with the reparameterisation trick and adds a projection of ``z``
back into the route through a zero-initialised weight. The route is finally
mapped to the mean and log-scale of a diagonal Gaussian over the input.

Parameter names are dotted paths such as ``enc.2.gcb0.W1`` or ``dec.0.inject.S``.
"""

import logging
import sys
from collections.abc import Mapping, Sequence
from typing import Protocol

import numpy as np
from pydantic import ConfigDict, model_validator
from scipy.special import logsumexp

from .base import BaseHGVAEObject
from .config import BaselineConfig, ModelConfig
from .constants import LOG_2PI, LOG_SCALE_MAX, LOG_SCALE_MIN
from .dct import dct_forward, dct_inverse
from .enums import DecodeMode, PosteriorObjective
from .errors import ConditioningError, NonFiniteError, ShapeError
from .graph import (
    GcbParams,
    GclParams,
    RngLike,
    as_rng,
    gcb_forward,
    gcl_forward,
    init_gcb,
    init_gcl,
)
from .tensor import Tensor, clip, concat, default_dtype, exp, precision, square

if sys.version_info[1] >= 11:
    from typing import Self
else:
    from typing_extensions import Self  # pragma: no cover

logger = logging.getLogger(__name__)

BUFFER_PREFIX = "buffer."


class GaussianParams(BaseHGVAEObject):
    """A diagonal Gaussian; ``log_scale`` is already clamped."""

    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    mean: Tensor
    log_scale: Tensor

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        if self.mean.shape != self.log_scale.shape:
            raise ShapeError("gaussian", self.mean.shape, self.log_scale.shape)
        return self

    @classmethod
    def from_head(cls, out: Tensor, features: int) -> Self:
        """Split a head of width ``2 * features`` into mean and clamped log-scale."""
        if out.shape[-1] != 2 * features:
            raise ShapeError("gaussian head", out.shape, (2 * features,))
        return cls(
            mean=out[..., :features],
            log_scale=clamp_log_scale(out[..., features:]),
        )

    @classmethod
    def standard(cls, shape: tuple[int, ...]) -> Self:
        zeros = Tensor(np.zeros(shape))
        return cls(mean=zeros, log_scale=zeros)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    def scale(self) -> Tensor:
        return exp(self.log_scale)

    def sample(self, temperature: float, eps: np.ndarray | None) -> Tensor:
        """``mean + temperature * scale * eps``; the mean itself when there is no noise."""
        if temperature == 0.0 or eps is None:
            return self.mean
        return self.mean + (temperature * self.scale()) * Tensor(eps, dtype=self.mean.dtype)

    def log_density(self, x: Tensor) -> Tensor:
        return gaussian_log_density(x, self.mean, self.log_scale)


class ObservationParams(GaussianParams):
    """``p(x | z)`` over the ``N_nodes x coefficients`` input graph."""


class LatentLayer(BaseHGVAEObject):
    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    z: Tensor
    prior: GaussianParams
    posterior: GaussianParams | None = None


class LatentStack(BaseHGVAEObject):
    """Samples and distributions of every latent layer, top of the hierarchy first."""

    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    layers: list[LatentLayer]

    def __len__(self) -> int:
        return len(self.layers)

    def _posteriors(self) -> list[GaussianParams]:
        posteriors = [layer.posterior for layer in self.layers]
        if any(p is None for p in posteriors):
            raise ValueError("the stack was decoded in prior mode and has no posteriors")
        return [p for p in posteriors if p is not None]

    def kl(self) -> list[Tensor]:
        """Per-layer ``KL(q || p)`` summed within each datapoint, each of shape ``(batch,)``."""
        return [
            per_datapoint(gaussian_kl(q, layer.prior))
            for q, layer in zip(self._posteriors(), self.layers, strict=True)
        ]

    def log_prior(self) -> Tensor:
        return sum_terms([per_datapoint(layer.prior.log_density(layer.z)) for layer in self.layers])

    def log_posterior(self) -> Tensor:
        return sum_terms(
            [
                per_datapoint(q.log_density(layer.z))
                for q, layer in zip(self._posteriors(), self.layers, strict=True)
            ]
        )


class ElboTerms(BaseHGVAEObject):
    """Batch-averaged loss terms of one ELBO evaluation."""

    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    objective: Tensor
    """``-recon + kl_weight * sum(kl)``, the quantity minimised."""
    recon: Tensor
    kl: list[Tensor]
    """One scalar per latent layer, top first."""
    evidence_bound: Tensor
    """Per-datapoint ELBO at full KL weight, shape ``(batch,)``."""
    kl_weight: float

    @property
    def total_kl(self) -> float:
        return float(sum(k.item() for k in self.kl))


class MotionModel(Protocol):
    """What training, imputation and checkpointing need from a model."""

    @property
    def config(self) -> ModelConfig | BaselineConfig: ...

    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    training: bool

    @property
    def dtype(self) -> np.dtype: ...

    @property
    def layer_count(self) -> int: ...

    @property
    def conditional(self) -> bool: ...

    def features(self, trajectories: np.ndarray) -> np.ndarray: ...

    def trajectory_features(self, trajectories: Tensor) -> Tensor: ...

    def elbo(
        self,
        x: Tensor | np.ndarray,
        kl_weight: float,
        rng: RngLike = None,
        labels: np.ndarray | None = None,
    ) -> ElboTerms: ...

    def log_joint_at_posterior_means(
        self,
        x: Tensor | np.ndarray,
        objective: PosteriorObjective | str | None = None,
        labels: np.ndarray | None = None,
    ) -> Tensor: ...

    def generate(
        self,
        count: int,
        temperature: float = 1.0,
        class_id: int | None = None,
        rng: RngLike = None,
    ) -> np.ndarray: ...

    def parameter_count(self) -> int: ...

    def named_tensors(self) -> dict[str, np.ndarray]: ...

    def load_named(self, arrays: Mapping[str, np.ndarray]) -> None: ...


def clamp_log_scale(log_scale: Tensor) -> Tensor:
    return clip(log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX)


def gaussian_log_density(x: Tensor, mean: Tensor, log_scale: Tensor) -> Tensor:
    """Elementwise ``log N(x | mean, exp(log_scale)^2)``."""
    z = (x - mean) * exp(-log_scale)
    return (-0.5 * LOG_2PI) - log_scale - 0.5 * square(z)


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Elementwise closed-form ``KL(q || p)`` between diagonal Gaussians."""
    log_ratio = q.log_scale - p.log_scale
    diff = (q.mean - p.mean) * exp(-p.log_scale)
    return 0.5 * (exp(2.0 * log_ratio) + square(diff) - 1.0) - log_ratio


def per_datapoint(t: Tensor) -> Tensor:
    """Sum over every axis except the leading batch axis."""
    return t.sum(axis=tuple(range(1, t.ndim)))


def sum_terms(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ConditioningError(f"class ids must lie in [0, {classes}), got {sorted(set(labels.tolist()))}")
    return np.eye(classes)[labels]


class ParameterStore:
    """Named parameters and buffers shared by every model."""

    config: ModelConfig | BaselineConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        with precision(self.config.precision):
            return default_dtype()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def named_tensors(self) -> dict[str, np.ndarray]:
        named = {name: p.numpy() for name, p in self.params.items()}
        named.update({BUFFER_PREFIX + name: b for name, b in self.buffers.items()})
        return named

    def load_named(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Replace parameters and buffers; names and shapes must match the architecture."""
        params, buffers = split_named(arrays)
        check_named(self.params, params)
        self.params = {
            name: Tensor(params[name], requires_grad=True, dtype=self.dtype, name=name)
            for name in self.params
        }
        self.buffers.update(buffers)


class HGVAE(ParameterStore):
    """Ladder VAE over skeleton graphs.

    ``params`` maps names to tensors and is replaced wholesale by the optimiser;
    ``buffers`` holds non-trainable arrays such as the training-set feature means.
    """

    config: ModelConfig

    def __init__(
        self,
        config: ModelConfig,
        params: Mapping[str, Tensor] | None = None,
        buffers: Mapping[str, np.ndarray] | None = None,
    ) -> None:
        self.config = config
        self.training = True
        with precision(config.precision):
            fresh = self._init_params(as_rng(config.seed))
        if params is not None:
            missing = sorted(set(fresh) - set(params))
            unexpected = sorted(set(params) - set(fresh))
            if missing or unexpected:
                raise ValueError(f"parameter names differ: missing {missing}, unexpected {unexpected}")
            fresh = dict(params)
        self.params: dict[str, Tensor] = fresh
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})

    def __repr__(self) -> str:
        return f"HGVAE(layers={self.config.latent_shapes}, parameters={self.parameter_count()})"

    @property
    def layer_count(self) -> int:
        return self.config.n_layers

    @property
    def conditional(self) -> bool:
        return self.config.condition_classes is not None

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        cfg = self.config
        width = cfg.hidden_width
        coefficients = cfg.n_coefficients
        nodes = [n for n, _ in cfg.latent_shapes]
        last = cfg.n_layers - 1
        params: dict[str, Tensor] = {}

        def put(prefix: str, record: GclParams | GcbParams) -> None:
            params.update(record.named(prefix))

        put("enc.stem", init_gcl(cfg.n_nodes, coefficients, nodes[last], width, rng))
        for layer in reversed(range(cfg.n_layers)):
            if layer < last:
                put(f"enc.{layer}.down", init_gcl(nodes[layer + 1], width, nodes[layer], width, rng))
            for k in range(cfg.gcbs_per_stage):
                put(f"enc.{layer}.gcb{k}", init_gcb(nodes[layer], width, rng))

        params["dec.init"] = Tensor(np.zeros((nodes[0], width)), requires_grad=True)
        for layer, (n, f) in enumerate(cfg.latent_shapes):
            if layer > 0:
                put(f"dec.{layer}.prior", init_gcl(n, width, n, 2 * f, rng))
            put(f"dec.{layer}.posterior", init_gcl(n, 2 * width, n, 2 * f, rng))
            z_width = cfg.top_width if layer == 0 else f
            put(f"dec.{layer}.inject", init_gcl(n, z_width, n, width, rng))
            params[f"dec.{layer}.beta"] = Tensor(cfg.latent_gate_init, requires_grad=True)
            for k in range(cfg.gcbs_per_stage):
                put(f"dec.{layer}.gcb{k}", init_gcb(n, width, rng))
            if layer < last:
                put(f"dec.{layer}.up", init_gcl(n, width, nodes[layer + 1], width, rng))
        put("dec.out", init_gcl(nodes[last], width, cfg.n_nodes, width, rng))
        put("dec.obs", init_gcl(cfg.n_nodes, width, cfg.n_nodes, 2 * coefficients, rng))
        for name, tensor in params.items():
            tensor.name = name
        return params

    def _gcl(self, prefix: str) -> GclParams:
        return GclParams.from_named(self.params, prefix)

    def _gcb(self, prefix: str) -> GcbParams:
        return GcbParams.from_named(self.params, prefix)

    def _input(self, x: Tensor | np.ndarray) -> Tensor:
        cfg = self.config
        tensor = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        if tensor.ndim != 3 or tensor.shape[1:] != (cfg.n_nodes, cfg.n_coefficients):
            raise ShapeError("hgvae input", tensor.shape, (-1, cfg.n_nodes, cfg.n_coefficients))
        return tensor

    def features(self, trajectories: np.ndarray) -> np.ndarray:
        """DCT coefficients of centered ``(batch, nodes, frames)`` trajectories."""
        return dct_forward(np.asarray(trajectories, dtype=self.dtype), self.config.frequency_crop)

    def trajectory_features(self, trajectories: Tensor) -> Tensor:
        return dct_forward(trajectories, self.config.frequency_crop)

    def _condition(self, labels: np.ndarray | None, batch: int) -> np.ndarray | None:
        classes = self.config.condition_classes
        if classes is None:
            if labels is not None:
                raise ConditioningError("class labels given to a model trained without conditioning")
            return None
        if labels is None:
            raise ConditioningError(f"the model is conditioned on {classes} classes; labels are required")
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape != (batch,):
            raise ConditioningError(f"expected {batch} labels, got {labels.shape[0]}")
        n0 = self.config.latent_shapes[0][0]
        return np.broadcast_to(one_hot(labels, classes)[:, None, :], (batch, n0, classes))

    def encode_bottom_up(self, x: Tensor | np.ndarray) -> list[Tensor]:
        """Deterministic feature graphs, bottom latent layer first."""
        cfg = self.config
        with precision(cfg.precision):
            a = gcl_forward(self._input(x), self._gcl("enc.stem"))
            features: list[Tensor] = []
            for layer in reversed(range(cfg.n_layers)):
                if layer < cfg.n_layers - 1:
                    a = gcl_forward(a, self._gcl(f"enc.{layer}.down"))
                for k in range(cfg.gcbs_per_stage):
                    a = gcb_forward(a, self._gcb(f"enc.{layer}.gcb{k}"), cfg.rezero_on_branch)
                features.append(a)
        return features

    def decode_top_down(
        self,
        mode: DecodeMode | str,
        features: Sequence[Tensor] | None = None,
        temperature: float = 1.0,
        rng: RngLike = None,
        labels: np.ndarray | None = None,
        batch: int | None = None,
    ) -> tuple[LatentStack, ObservationParams]:
        """Top-down pass; ``features`` come from :meth:`encode_bottom_up` in posterior mode.

        In prior mode ``batch`` sets the number of samples.
        """
        cfg = self.config
        mode = DecodeMode(mode)
        if temperature < 0:
            raise ValueError(f"temperature must be non-negative, got {temperature}")
        if mode is DecodeMode.POSTERIOR:
            if features is None or len(features) != cfg.n_layers:
                raise ValueError("posterior decoding needs one encoder feature graph per latent layer")
            batch = features[0].shape[0]
        elif batch is None or batch < 1:
            raise ValueError("prior decoding needs a positive batch size")
        condition = self._condition(labels, batch)
        gen = as_rng(rng) if temperature > 0 else None
        width = cfg.hidden_width
        last = cfg.n_layers - 1

        with precision(cfg.precision):
            route = self.params["dec.init"] + Tensor(np.zeros((batch, cfg.latent_shapes[0][0], width)))
            layers: list[LatentLayer] = []
            for layer, (n, f) in enumerate(cfg.latent_shapes):
                try:
                    if layer == 0:
                        prior = GaussianParams.standard((batch, n, f))
                    else:
                        head = gcl_forward(route, self._gcl(f"dec.{layer}.prior"), activate=False)
                        prior = GaussianParams.from_head(head, f)
                    posterior = None
                    source = prior
                    if features is not None and mode is DecodeMode.POSTERIOR:
                        joint = concat([route, features[last - layer]], axis=-1)
                        head = gcl_forward(joint, self._gcl(f"dec.{layer}.posterior"), activate=False)
                        posterior = source = GaussianParams.from_head(head, f)
                    eps = None if gen is None else gen.standard_normal((batch, n, f))
                    z = source.sample(temperature, eps)
                    injected = z
                    if layer == 0 and condition is not None:
                        injected = concat([z, Tensor(condition)], axis=-1)
                    projection = gcl_forward(injected, self._gcl(f"dec.{layer}.inject"))
                    route = route + self.params[f"dec.{layer}.beta"] * projection
                    for k in range(cfg.gcbs_per_stage):
                        route = gcb_forward(route, self._gcb(f"dec.{layer}.gcb{k}"), cfg.rezero_on_branch)
                    if layer < last:
                        route = gcl_forward(route, self._gcl(f"dec.{layer}.up"))
                except NonFiniteError as exc:
                    raise NonFiniteError(f"latent layer {layer} ({exc.where})") from exc
                layers.append(LatentLayer(z=z, prior=prior, posterior=posterior))
            hidden = gcl_forward(route, self._gcl("dec.out"))
            head = gcl_forward(hidden, self._gcl("dec.obs"), activate=False)
            observation = ObservationParams.from_head(head, cfg.n_coefficients)
        return LatentStack(layers=layers), observation

    def elbo(
        self,
        x: Tensor | np.ndarray,
        kl_weight: float,
        rng: RngLike = None,
        labels: np.ndarray | None = None,
    ) -> ElboTerms:
        """Reparameterised ELBO averaged over the batch and ``num_samples`` draws."""
        if not 0.0 <= kl_weight <= 1.0:
            raise ValueError(f"kl_weight must lie in [0, 1], got {kl_weight}")
        x = self._input(x)
        gen = as_rng(rng)
        samples = self.config.num_samples
        features = self.encode_bottom_up(x)
        recons: list[Tensor] = []
        kls: list[list[Tensor]] = []
        with precision(self.config.precision):
            for _ in range(samples):
                stack, observation = self.decode_top_down(DecodeMode.POSTERIOR, features, 1.0, gen, labels)
                recons.append(per_datapoint(observation.log_density(x)))
                kls.append(stack.kl())
            recon = sum_terms(recons) * (1.0 / samples)
            kl = [sum_terms([draw[layer] for draw in kls]) * (1.0 / samples) for layer in range(self.layer_count)]
            total_kl = sum_terms(kl)
            objective = (kl_weight * total_kl - recon).mean()
            return ElboTerms(
                objective=objective,
                recon=recon.mean(),
                kl=[k.mean() for k in kl],
                evidence_bound=(recon - total_kl).detach(),
                kl_weight=kl_weight,
            )

    def log_joint_at_posterior_means(
        self,
        x: Tensor | np.ndarray,
        objective: PosteriorObjective | str | None = None,
        labels: np.ndarray | None = None,
    ) -> Tensor:
        """Deterministic per-datapoint score, shape ``(batch,)``. Higher is more plausible.

        ``log_joint`` is ``sum_l log p(z_l | z_<l) + log p(x | z)`` with every ``z_l`` at its
        posterior mean; ``elbo`` replaces the latent prior term with ``-KL``;
        ``posterior`` is ``sum_l log q(z_l)`` at the same points.
        """
        objective = PosteriorObjective(objective or self.config.posterior_objective)
        x = self._input(x)
        features = self.encode_bottom_up(x)
        with precision(self.config.precision):
            stack, observation = self.decode_top_down(DecodeMode.POSTERIOR, features, 0.0, None, labels)
            if objective is PosteriorObjective.POSTERIOR:
                return stack.log_posterior()
            recon = per_datapoint(observation.log_density(x))
            if objective is PosteriorObjective.ELBO:
                return recon - sum_terms(stack.kl())
            return recon + stack.log_prior()

    def importance_weighted_log_likelihood(
        self,
        x: Tensor | np.ndarray,
        samples: int = 100,
        rng: RngLike = None,
        labels: np.ndarray | None = None,
    ) -> np.ndarray:
        """``log (1/k) sum_k p(x, z_k) / q(z_k | x)`` per datapoint, a tighter bound than the ELBO."""
        if samples < 1:
            raise ValueError("at least one importance sample is required")
        x = self._input(x).detach()
        gen = as_rng(rng)
        features = self.encode_bottom_up(x)
        log_weights = []
        with precision(self.config.precision):
            for _ in range(samples):
                stack, observation = self.decode_top_down(DecodeMode.POSTERIOR, features, 1.0, gen, labels)
                log_w = per_datapoint(observation.log_density(x)) + stack.log_prior() - stack.log_posterior()
                log_weights.append(log_w.numpy())
        return logsumexp(np.stack(log_weights), axis=0) - np.log(samples)

    def generate(
        self,
        count: int,
        temperature: float = 1.0,
        class_id: int | None = None,
        rng: RngLike = None,
    ) -> np.ndarray:
        """Sample ``count`` trajectory graphs ``(count, N_nodes, frames)`` from the prior.

        A conditional model draws a random class per sample when ``class_id`` is ``None``.
        """
        if count < 1:
            raise ValueError("count must be at least 1")
        gen = as_rng(rng)
        labels = None
        classes = self.config.condition_classes
        if class_id is not None:
            if classes is None:
                raise ConditioningError("class_id given to a model trained without conditioning")
            if not 0 <= class_id < classes:
                raise ConditioningError(f"class_id {class_id} is outside [0, {classes})")
            labels = np.full(count, class_id)
        elif classes is not None:
            labels = gen.integers(0, classes, size=count)
        _, observation = self.decode_top_down(DecodeMode.PRIOR, None, temperature, gen, labels, batch=count)
        return dct_inverse(observation.mean.numpy(), self.config.n_obs_features)


def split_named(arrays: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    params = {k: v for k, v in arrays.items() if not k.startswith(BUFFER_PREFIX)}
    buffers = {k.removeprefix(BUFFER_PREFIX): np.array(v) for k, v in arrays.items() if k.startswith(BUFFER_PREFIX)}
    return params, buffers


def check_named(expected: Mapping[str, Tensor], given: Mapping[str, np.ndarray]) -> None:
    missing = sorted(set(expected) - set(given))
    unexpected = sorted(set(given) - set(expected))
    if missing or unexpected:
        raise ValueError(f"parameter names differ: missing {missing}, unexpected {unexpected}")
    for name, tensor in expected.items():
        if tuple(given[name].shape) != tensor.shape:
            raise ShapeError(f"parameter '{name}'", tuple(given[name].shape), tensor.shape)
