"""Fully-connected VAE over flattened DCT features, used as the comparison model.

Encoder and decoder are mirrored stacks of dense layers with batch
normalisation and GeLU. During training batch statistics are used and the
running averages updated; scoring always uses the running averages, so a
score depends only on its own datapoint.
"""

import logging
from collections.abc import Mapping

import numpy as np

from .config import BaselineConfig
from .dct import dct_forward, dct_inverse
from .enums import PosteriorObjective
from .errors import ConditioningError, ShapeError
from .graph import RngLike, as_rng, uniform_fan
from .model import ElboTerms, GaussianParams, ParameterStore, gaussian_kl, per_datapoint, sum_terms
from .tensor import Tensor, gelu, matmul, precision, sqrt, square

logger = logging.getLogger(__name__)


class BaselineVAE(ParameterStore):
    """Single-latent VAE with a standard normal prior and a learned per-feature likelihood scale."""

    config: BaselineConfig

    def __init__(
        self,
        config: BaselineConfig,
        params: Mapping[str, Tensor] | None = None,
        buffers: Mapping[str, np.ndarray] | None = None,
    ) -> None:
        self.config = config
        self.training = True
        self.buffers: dict[str, np.ndarray] = {}
        with precision(config.precision):
            self.params: dict[str, Tensor] = self._init_params(as_rng(config.seed))
        if params is not None:
            if set(params) != set(self.params):
                raise ValueError("parameter names do not match the baseline architecture")
            self.params = dict(params)
        self.buffers.update(buffers or {})

    def __repr__(self) -> str:
        return f"BaselineVAE(widths={self.config.hidden_widths}, parameters={self.parameter_count()})"

    @property
    def layer_count(self) -> int:
        return 1

    @property
    def conditional(self) -> bool:
        return False

    def _encoder_sizes(self) -> list[int]:
        return [self.config.input_size, *self.config.hidden_widths]

    def _decoder_sizes(self) -> list[int]:
        return [self.config.latent_size, *reversed(self.config.hidden_widths)]

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        cfg = self.config
        params: dict[str, Tensor] = {}

        def dense(prefix: str, f_in: int, f_out: int, normalised: bool) -> None:
            params[f"{prefix}.W"] = Tensor(uniform_fan(rng, f_in, f_out), requires_grad=True)
            params[f"{prefix}.b"] = Tensor(np.zeros(f_out), requires_grad=True)
            if normalised:
                params[f"{prefix}.gamma"] = Tensor(np.ones(f_out), requires_grad=True)
                params[f"{prefix}.beta"] = Tensor(np.zeros(f_out), requires_grad=True)
                self.buffers[f"{prefix}.running_mean"] = np.zeros(f_out)
                self.buffers[f"{prefix}.running_var"] = np.ones(f_out)

        for side, sizes in (("enc", self._encoder_sizes()), ("dec", self._decoder_sizes())):
            for i, (f_in, f_out) in enumerate(zip(sizes, sizes[1:], strict=False)):
                dense(f"{side}.{i}", f_in, f_out, cfg.batch_norm)
        dense("enc.head", cfg.hidden_widths[-1], 2 * cfg.latent_size, False)
        dense("dec.head", cfg.hidden_widths[0], 2 * cfg.input_size, False)
        for name, tensor in params.items():
            tensor.name = name
        return params

    def _input(self, x: Tensor | np.ndarray) -> Tensor:
        cfg = self.config
        tensor = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        if tensor.ndim == 3 and tensor.shape[1:] == (cfg.n_nodes, cfg.n_obs_features):
            tensor = tensor.reshape(tensor.shape[0], cfg.input_size)
        if tensor.ndim != 2 or tensor.shape[1] != cfg.input_size:
            raise ShapeError("baseline input", tensor.shape, (-1, cfg.input_size))
        return tensor

    def features(self, trajectories: np.ndarray) -> np.ndarray:
        return dct_forward(np.asarray(trajectories, dtype=self.dtype))

    def trajectory_features(self, trajectories: Tensor) -> Tensor:
        return dct_forward(trajectories)

    def _dense(self, prefix: str, h: Tensor, frozen: bool) -> Tensor:
        cfg = self.config
        h = matmul(h, self.params[f"{prefix}.W"]) + self.params[f"{prefix}.b"]
        if not cfg.batch_norm:
            return gelu(h)
        if frozen or not self.training:
            mean = Tensor(self.buffers[f"{prefix}.running_mean"])
            std = Tensor(np.sqrt(self.buffers[f"{prefix}.running_var"] + cfg.bn_eps))
            h = (h - mean) / std
        else:
            mean = h.mean(axis=0)
            centered = h - mean
            var = square(centered).mean(axis=0)
            h = centered / sqrt(var + cfg.bn_eps)
            m = cfg.bn_momentum
            for key, stat in (("running_mean", mean), ("running_var", var)):
                name = f"{prefix}.{key}"
                self.buffers[name] = (1.0 - m) * self.buffers[name] + m * stat.numpy()
        return gelu(h * self.params[f"{prefix}.gamma"] + self.params[f"{prefix}.beta"])

    def encode(self, x: Tensor, frozen: bool = False) -> GaussianParams:
        """Posterior ``q(z | x)`` over the ``latent_size`` vector."""
        h = x
        for i in range(len(self.config.hidden_widths)):
            h = self._dense(f"enc.{i}", h, frozen)
        head = matmul(h, self.params["enc.head.W"]) + self.params["enc.head.b"]
        return GaussianParams.from_head(head, self.config.latent_size)

    def decode(self, z: Tensor, frozen: bool = False) -> GaussianParams:
        h = z
        for i in range(len(self.config.hidden_widths)):
            h = self._dense(f"dec.{i}", h, frozen)
        head = matmul(h, self.params["dec.head.W"]) + self.params["dec.head.b"]
        return GaussianParams.from_head(head, self.config.input_size)

    def elbo(
        self,
        x: Tensor | np.ndarray,
        kl_weight: float,
        rng: RngLike = None,
        labels: np.ndarray | None = None,
    ) -> ElboTerms:
        if not 0.0 <= kl_weight <= 1.0:
            raise ValueError(f"kl_weight must lie in [0, 1], got {kl_weight}")
        if labels is not None:
            raise ConditioningError("the baseline VAE does not support class conditioning")
        gen = as_rng(rng)
        x = self._input(x)
        samples = self.config.num_samples
        with precision(self.config.precision):
            posterior = self.encode(x)
            prior = GaussianParams.standard(posterior.shape)
            kl = per_datapoint(gaussian_kl(posterior, prior))
            draws = [
                per_datapoint(self.decode(posterior.sample(1.0, gen.standard_normal(posterior.shape))).log_density(x))
                for _ in range(samples)
            ]
            recon = sum_terms(draws) * (1.0 / samples)
            return ElboTerms(
                objective=(kl_weight * kl - recon).mean(),
                recon=recon.mean(),
                kl=[kl.mean()],
                evidence_bound=(recon - kl).detach(),
                kl_weight=kl_weight,
            )

    def log_joint_at_posterior_means(
        self,
        x: Tensor | np.ndarray,
        objective: PosteriorObjective | str | None = None,
        labels: np.ndarray | None = None,
    ) -> Tensor:
        """Per-datapoint score with the batch-norm statistics frozen; same family as :class:`HGVAE`."""
        if labels is not None:
            raise ConditioningError("the baseline VAE does not support class conditioning")
        objective = PosteriorObjective(objective or self.config.posterior_objective)
        x = self._input(x)
        with precision(self.config.precision):
            posterior = self.encode(x, frozen=True)
            if objective is PosteriorObjective.POSTERIOR:
                return per_datapoint(posterior.log_density(posterior.mean))
            recon = per_datapoint(self.decode(posterior.mean, frozen=True).log_density(x))
            prior = GaussianParams.standard(posterior.shape)
            if objective is PosteriorObjective.ELBO:
                return recon - per_datapoint(gaussian_kl(posterior, prior))
            return recon + per_datapoint(prior.log_density(posterior.mean))

    def generate(
        self,
        count: int,
        temperature: float = 1.0,
        class_id: int | None = None,
        rng: RngLike = None,
    ) -> np.ndarray:
        if class_id is not None:
            raise ConditioningError("the baseline VAE does not support class conditioning")
        if count < 1:
            raise ValueError("count must be at least 1")
        if temperature < 0:
            raise ValueError(f"temperature must be non-negative, got {temperature}")
        cfg = self.config
        z = as_rng(rng).standard_normal((count, cfg.latent_size)) * temperature
        with precision(cfg.precision):
            mean = self.decode(Tensor(z), frozen=True).mean.numpy()
        return dct_inverse(mean.reshape(count, cfg.n_nodes, cfg.n_obs_features))


def baseline_elbo(
    model: BaselineVAE, x_flat: Tensor | np.ndarray, kl_weight: float = 1.0, rng: RngLike = None
) -> ElboTerms:
    return model.elbo(x_flat, kl_weight, rng)


def baseline_posterior_score(
    model: BaselineVAE,
    x_flat: Tensor | np.ndarray,
    objective: PosteriorObjective | str | None = None,
) -> Tensor:
    return model.log_joint_at_posterior_means(x_flat, objective)
