"""Learned priors over quantized latents.

Training uses additive uniform noise as a differentiable surrogate for
rounding; inference rounds to integers on the clamped alphabet [-L, L].
Probability mass of an integer symbol is the prior CDF integrated over a
unit-width bin, floored at P_MIN so every symbol stays codable.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import layers as Ly
from . import tensor as T
from .tensor import ParameterDomainError, ShapeError, Tensor

P_MIN = 2.0 ** -24
DEFAULT_L = 64
SCALE_MIN = 0.11
LOG2 = math.log(2.0)
# scales wide enough to cover latents spread across the whole [-L, L]
# alphabet (3 sigma at the cap); tails beyond L fold into the edge symbols
LOG_S_MIN, LOG_S_MAX = -6.0, math.log(DEFAULT_L / 3.0)


class QuantizerMode(enum.Enum):
    TRAIN_NOISE = "train-noise"
    INFER_ROUND = "infer-round"


# ---------------------------------------------------------------------------
# distribution families


def _std_cdf(u: np.ndarray, family: str) -> np.ndarray:
    if family == "gaussian":
        return 0.5 * (1.0 + erf(u / math.sqrt(2.0)))
    if family == "logistic":
        return 1.0 / (1.0 + np.exp(-u))
    raise ValueError(f"unknown family {family!r}")


def _std_pdf(u: np.ndarray, family: str) -> np.ndarray:
    if family == "gaussian":
        return np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    if family == "logistic":
        s = 1.0 / (1.0 + np.exp(-np.abs(u)))
        return s * (1.0 - s)
    raise ValueError(f"unknown family {family!r}")


def probability_mass(k, mu, s, family: str = "gaussian"):
    """P(symbol k) = CDF(k + 1/2) - CDF(k - 1/2), floored at P_MIN."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ParameterDomainError("probability_mass: scale must be > 0")
    k = np.asarray(k, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    a = (k - mu + 0.5) / s
    b = (k - mu - 0.5) / s
    p = _std_cdf(a, family) - _std_cdf(b, family)
    return np.maximum(p, P_MIN) if p.ndim else float(max(p, P_MIN))


# ---------------------------------------------------------------------------
# quantizers


def quantize_train(z: Tensor, rng: np.random.Generator) -> Tensor:
    """Additive U(-1/2, 1/2) noise; the gradient w.r.t. z is exactly identity."""
    noise = rng.uniform(-0.5, 0.5, size=z.shape)
    return T.add_constant(z, noise)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_infer(z, L: int = DEFAULT_L) -> np.ndarray:
    """Nearest-integer rounding (ties away from zero), clamped to [-L, L]."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    return np.clip(round_half_away(data), -L, L)


# ---------------------------------------------------------------------------
# autodiff mass ops


def _mass_terms(x: np.ndarray, mu: np.ndarray, s: np.ndarray, family: str):
    a = (x - mu + 0.5) / s
    b = (x - mu - 0.5) / s
    p = _std_cdf(a, family) - _std_cdf(b, family)
    fa, fb = _std_pdf(a, family), _std_pdf(b, family)
    return p, a, b, fa, fb


def factorized_mass(z: Tensor, mu: Tensor, log_s: Tensor, family: str) -> Tensor:
    """Per-element bin mass under per-channel (mu, s=exp(log_s)); channel axis 1."""
    c = z.shape[1]
    if mu.shape != (c,) or log_s.shape != (c,):
        raise ShapeError(f"prior parameters must have shape ({c},)")
    expand = (slice(None),) + (None,) * (z.data.ndim - 2)
    mu_b = mu.data[expand]
    s_b = np.exp(log_s.data)[expand]
    p, a, b, fa, fb = _mass_terms(z.data, mu_b, s_b, family)
    reduce_axes = (0,) + tuple(range(2, z.data.ndim))

    def bw(g):
        dfd = (fa - fb) / s_b
        z._accumulate(g * dfd)
        mu._accumulate((-g * dfd).sum(axis=reduce_axes))
        log_s._accumulate((-g * (fa * a - fb * b)).sum(axis=reduce_axes))

    return T._make(p, (z, mu, log_s), bw)


def conditional_gaussian_mass(x: Tensor, mean: Tensor, scale: Tensor) -> Tensor:
    """Element-wise Gaussian bin mass with per-element mean and scale tensors."""
    if mean.shape != x.shape or scale.shape != x.shape:
        raise ShapeError("conditional mass: mean/scale must match the latent shape")
    if np.any(scale.data <= 0):
        raise ParameterDomainError("conditional mass: scale must be > 0")
    p, a, b, fa, fb = _mass_terms(x.data, mean.data, scale.data, "gaussian")

    def bw(g):
        dfd = (fa - fb) / scale.data
        x._accumulate(g * dfd)
        mean._accumulate(-g * dfd)
        scale._accumulate(-g * (fa * a - fb * b) / scale.data)

    return T._make(p, (x, mean, scale), bw)


def bits_from_mass(p: Tensor) -> Tensor:
    """-sum log2 max(p, P_MIN)."""
    return T.scale(T.sum_all(T.log(T.clamp_min(p, P_MIN))), -1.0 / LOG2)


# ---------------------------------------------------------------------------
# factorized prior


class FactorizedPrior:
    """Fully factorized per-channel two-parameter prior (logistic or gaussian)."""

    def __init__(self, channels: int, family: str = "logistic", L: int = DEFAULT_L):
        if family not in ("logistic", "gaussian"):
            raise ValueError(f"unknown family {family!r}")
        self.channels = channels
        self.family = family
        self.L = L
        self.mu = T.parameter(np.zeros(channels), "prior.mu")
        # scale is trained in the log domain; checkpoints store the raw values
        self.log_s = T.parameter(np.zeros(channels), "prior.s")

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_s.data)

    def params(self) -> list[tuple[str, Tensor]]:
        return [("prior.mu", self.mu), ("prior.s", self.log_s)]

    def project(self) -> None:
        np.clip(self.log_s.data, LOG_S_MIN, LOG_S_MAX, out=self.log_s.data)

    def likelihood(self, z: Tensor) -> Tensor:
        return factorized_mass(z, self.mu, self.log_s, self.family)

    def rate_bits(self, z_q) -> Tensor:
        """Total bits of z_q under the prior; differentiable when z_q is in-graph."""
        z_q = z_q if isinstance(z_q, Tensor) else Tensor(z_q)
        return bits_from_mass(self.likelihood(z_q))

    def channel_masses(self) -> np.ndarray:
        """(C, 2L+1) coding distribution over [-L, L]; tails folded into the edges."""
        ks = np.arange(-self.L, self.L + 1, dtype=np.float64)
        mu = self.mu.data[:, None]
        s = self.scales[:, None]
        a = (ks[None, :] - mu + 0.5) / s
        b = (ks[None, :] - mu - 0.5) / s
        p = _std_cdf(a, self.family) - _std_cdf(b, self.family)
        p[:, 0] += _std_cdf(b[:, 0], self.family)
        p[:, -1] += 1.0 - _std_cdf(a[:, -1], self.family)
        return np.maximum(p, P_MIN)


# ---------------------------------------------------------------------------
# hyperprior


@dataclass
class HyperRoundTrip:
    z_q: Tensor
    means: Tensor
    scales: Tensor
    z_h_q: Tensor


class HyperpriorModel:
    """Two-level entropy model: a hyper-encoder compresses the latent into
    hyperlatents (with their own factorized prior); the hyper-decoder emits a
    per-element (mean, scale) Gaussian for the latent itself."""

    def __init__(self, latent_channels: int, hyper_encoder: list, hyper_decoder: list,
                 probe_shape: tuple[int, ...], family_h: str = "logistic",
                 L: int = DEFAULT_L, scale_min: float = SCALE_MIN):
        self.channels = latent_channels
        self.hyper_encoder = hyper_encoder
        self.hyper_decoder = hyper_decoder
        self.L = L
        self.scale_min = scale_min
        enc_shapes = Ly.infer_shapes(hyper_encoder, probe_shape)
        self.hyper_channels = enc_shapes[-1][1]
        dec_shapes = Ly.infer_shapes(hyper_decoder, enc_shapes[-1])
        if dec_shapes[-1][1] != 2 * latent_channels:
            raise ShapeError(
                f"hyper-decoder must emit {2 * latent_channels} channels "
                f"(mean + scale planes), got {dec_shapes[-1][1]}")
        if dec_shapes[-1] != probe_shape[:1] + (2 * latent_channels,) + probe_shape[2:]:
            raise ShapeError(
                f"hyper-decoder output {dec_shapes[-1]} does not cover latent shape {probe_shape}")
        self.zh_prior = FactorizedPrior(self.hyper_channels, family=family_h, L=L)

    def params(self) -> list[tuple[str, Tensor]]:
        out = Ly.named_params(self.hyper_encoder, "hyper.enc")
        out += Ly.named_params(self.hyper_decoder, "hyper.dec")
        out += [(f"hyper.{n}", p) for n, p in self.zh_prior.params()]
        return out

    def encoder_side_params(self) -> list[tuple[str, Tensor]]:
        """Parameters that live on the device (the hyper-encoder)."""
        return Ly.named_params(self.hyper_encoder, "hyper.enc")

    def project(self) -> None:
        self.zh_prior.project()
        for layer in self.hyper_encoder + self.hyper_decoder:
            layer.project()

    def _decode_params(self, z_h_q: Tensor) -> tuple[Tensor, Tensor]:
        planes = Ly.run_layers(self.hyper_decoder, z_h_q)
        means = T.narrow(planes, 1, 0, self.channels)
        raw = T.narrow(planes, 1, self.channels, self.channels)
        scales = T.clamp_min(raw, self.scale_min)
        return means, scales

    def round_trip(self, z: Tensor, mode: QuantizerMode,
                   rng: np.random.Generator | None = None) -> HyperRoundTrip:
        z_h = Ly.run_layers(self.hyper_encoder, z)
        if mode is QuantizerMode.TRAIN_NOISE:
            if rng is None:
                raise ValueError("train-noise mode requires an owned rng")
            z_h_q = quantize_train(z_h, rng)
            means, scales = self._decode_params(z_h_q)
            z_q = quantize_train(z, rng)
        else:
            z_h_q = Tensor(quantize_infer(z_h.data, self.L))
            means, scales = self._decode_params(z_h_q)
            symbols = np.clip(round_half_away(z.data - means.data), -self.L, self.L)
            z_q = Tensor(symbols + means.data)
        return HyperRoundTrip(z_q=z_q, means=means, scales=scales, z_h_q=z_h_q)

    def rate_bits(self, rt: HyperRoundTrip) -> Tensor:
        """Latent rate under the conditional Gaussian plus the hyperlatent rate."""
        rate_z = bits_from_mass(conditional_gaussian_mass(rt.z_q, rt.means, rt.scales))
        rate_zh = self.zh_prior.rate_bits(rt.z_h_q)
        return T.add(rate_z, rate_zh)


def hyper_round_trip(z: Tensor, model: HyperpriorModel, mode: QuantizerMode,
                     rng: np.random.Generator | None = None):
    """Functional form of the two-level quantization round trip."""
    rt = model.round_trip(z, mode, rng)
    return rt.z_q, rt.means, rt.scales, rt.z_h_q


def build_hyperprior(latent_channels: int, latent_shape: tuple[int, ...],
                     hyper_channels: int, rng: np.random.Generator,
                     L: int = DEFAULT_L) -> HyperpriorModel:
    """Standard hyper transforms for spatial (NCHW) or vector (NC) latents.

    Spatial latents need H and W divisible by 4 (two stride-2 stages).
    """
    spatial = len(latent_shape) == 4
    if spatial:
        _, _, h, w = latent_shape
        if h % 4 or w % 4:
            raise ShapeError(f"hyperprior needs spatial extents divisible by 4, got {(h, w)}")
        enc = [
            Ly.Conv2d(latent_channels, hyper_channels, 3, stride=2, padding=1, rng=rng),
            Ly.ReLU(),
            Ly.Conv2d(hyper_channels, hyper_channels, 3, stride=2, padding=1, rng=rng),
        ]
        dec = [
            Ly.Upsample2x(),
            Ly.Conv2d(hyper_channels, hyper_channels, 3, stride=1, padding=1, rng=rng),
            Ly.ReLU(),
            Ly.Upsample2x(),
            Ly.Conv2d(hyper_channels, 2 * latent_channels, 3, stride=1, padding=1, rng=rng),
        ]
    else:
        enc = [
            Ly.Linear(latent_channels, hyper_channels, rng=rng),
            Ly.ReLU(),
            Ly.Linear(hyper_channels, hyper_channels, rng=rng),
        ]
        dec = [
            Ly.Linear(hyper_channels, hyper_channels, rng=rng),
            Ly.ReLU(),
            Ly.Linear(hyper_channels, 2 * latent_channels, rng=rng),
        ]
    # start predicted scales near 1 so the scale_min floor is inactive at init
    dec[-1].bias.data[latent_channels:] = 1.0
    return HyperpriorModel(latent_channels, enc, dec, probe_shape=latent_shape, L=L)
