"""Reference classifiers, bottleneck injection, and split-model accounting.

A reference model is a small residual classifier. Injecting a bottleneck at a
named boundary splits it into a device-side encoder (reference layers up to
the boundary plus an analysis transform), an entropy bottleneck, and an
edge-side synthesis decoder plus task tail. Encoder size (total parameter
bits) and encoder MACs are closed-form functions of the partition.
"""

from __future__ import annotations

import copy
import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import coder as C
from . import entropy as E
from . import layers as Ly
from . import tensor as T
from .layers import ConfigError
from .tensor import ShapeError, Tensor

PLACEMENTS = ("layer1", "layer2", "layer3", "layer4", "avgpool")


class NumericError(ArithmeticError):
    """Raised when a forward pass produces non-finite values."""


@dataclass
class ReferenceConfig:
    blocks: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    widths: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    classes: int = 10
    input_hw: int = 32
    in_channels: int = 3

    def __post_init__(self):
        if len(self.blocks) < 1 or len(self.blocks) != len(self.widths):
            raise ConfigError("blocks and widths must be non-empty and equal-length")
        if self.classes < 1:
            raise ConfigError("need at least one class")
        if any(b < 1 for b in self.blocks) or any(w < 1 for w in self.widths):
            raise ConfigError("block counts and widths must be >= 1")


class ReferenceModel:
    """Stem conv -> residual stages -> global average pool -> linear head."""

    def __init__(self, cfg: ReferenceConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        layers: list[Ly.Layer] = [
            Ly.Conv2d(cfg.in_channels, cfg.widths[0], 3, stride=1, padding=1, rng=rng),
            Ly.ReLU(),
        ]
        self.boundaries: dict[str, int] = {}
        in_ch = cfg.widths[0]
        for i, (nblocks, width) in enumerate(zip(cfg.blocks, cfg.widths)):
            for b in range(nblocks):
                stride = 2 if (i > 0 and b == 0) else 1
                layers.append(Ly.ResidualBlock(in_ch, width, stride=stride, rng=rng))
                in_ch = width
            self.boundaries[f"layer{i + 1}"] = len(layers)
        layers.append(Ly.GlobalAvgPool())
        self.boundaries["avgpool"] = len(layers)
        layers.append(Ly.Linear(in_ch, cfg.classes, rng=rng))
        self.layers = layers
        # validate composition once; raises on incompatible config
        self.input_shape = (1, cfg.in_channels, cfg.input_hw, cfg.input_hw)
        Ly.infer_shapes(layers, self.input_shape)

    def forward(self, x: Tensor) -> Tensor:
        return Ly.run_layers(self.layers, x)

    def features(self, x: Tensor, boundary: str) -> Tensor:
        return Ly.run_layers(self.layers[: self._bidx(boundary)], x)

    def forward_from(self, feat: Tensor, boundary: str) -> Tensor:
        return Ly.run_layers(self.layers[self._bidx(boundary):], feat)

    def _bidx(self, boundary: str) -> int:
        if boundary not in self.boundaries:
            raise ConfigError(f"unknown boundary {boundary!r}; have {sorted(self.boundaries)}")
        return self.boundaries[boundary]

    def boundary_shape(self, boundary: str) -> tuple[int, ...]:
        shapes = Ly.infer_shapes(self.layers, self.input_shape)
        return shapes[self._bidx(boundary) - 1]

    def params(self) -> list[tuple[str, Tensor]]:
        return Ly.named_params(self.layers, "layers")

    def param_count(self) -> int:
        return sum(p.size for _, p in self.params())

    def checkpoint(self) -> bytes:
        return T.checkpoint_bytes((n, p.data) for n, p in self.params())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params():
            if p.data.shape != state[n].shape:
                raise ShapeError(f"checkpoint tensor {n} has shape {state[n].shape}, expected {p.data.shape}")
            p.data[...] = state[n]

    def project(self) -> None:
        for layer in self.layers:
            layer.project()


def build_reference(cfg: ReferenceConfig, seed: int = 0) -> ReferenceModel:
    return ReferenceModel(cfg, seed)


# ---------------------------------------------------------------------------
# split models

# scale grid shared by device and server for conditional-Gaussian tables
_SCALE_GRID = np.geomspace(E.SCALE_MIN, 32.0, 64)


def _scale_grid_indices(scales: np.ndarray) -> np.ndarray:
    logs = np.log(np.clip(scales, _SCALE_GRID[0], _SCALE_GRID[-1]))
    step = np.log(_SCALE_GRID[1]) - np.log(_SCALE_GRID[0])
    return np.clip(np.round((logs - np.log(_SCALE_GRID[0])) / step), 0, len(_SCALE_GRID) - 1).astype(np.int64)


def _centered_gaussian_masses(s: float, L: int) -> np.ndarray:
    ks = np.arange(-L, L + 1, dtype=np.float64)
    a = (ks + 0.5) / s
    b = (ks - 0.5) / s
    p = E._std_cdf(a, "gaussian") - E._std_cdf(b, "gaussian")
    p[0] += E._std_cdf(b[0], "gaussian")
    p[-1] += 1.0 - E._std_cdf(a[-1], "gaussian")
    return np.maximum(p, E.P_MIN)


class SplitModel:
    """Encoder / bottleneck / decoder / tail with a declared split point."""

    def __init__(self, cfg: ReferenceConfig, placement: str, bottleneck_channels: int,
                 prior_kind: str, encoder_layers, decoder_layers, tail_layers,
                 prior, latent_shape: tuple[int, ...]):
        self.cfg = cfg
        self.placement = placement
        self.bottleneck_channels = bottleneck_channels
        self.prior_kind = prior_kind
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.tail_layers = tail_layers
        self.prior = prior
        self.latent_shape = latent_shape  # without batch dim
        self.input_shape = (1, cfg.in_channels, cfg.input_hw, cfg.input_hw)
        self.param_bit_widths: dict[str, int] = {n: 32 for n, _ in self.params()}
        self.frozen: set[str] = set()
        self.crbq = False  # post-training 8-bit bottleneck quantization active
        self._table_cache = None

    # -- parameter partition (encoder | decoder | tail covers everything once)

    def encoder_params(self) -> list[tuple[str, Tensor]]:
        out = Ly.named_params(self.encoder_layers, "enc")
        if self.prior_kind == "hyperprior":
            out += [(f"enc.{n}", p) for n, p in self.prior.encoder_side_params()]
        return out

    def decoder_params(self) -> list[tuple[str, Tensor]]:
        out = Ly.named_params(self.decoder_layers, "dec")
        if self.prior_kind == "hyperprior":
            enc_ids = {id(p) for _, p in self.prior.encoder_side_params()}
            out += [(f"dec.{n}", p) for n, p in self.prior.params() if id(p) not in enc_ids]
        else:
            out += [(f"dec.{n}", p) for n, p in self.prior.params()]
        return out

    def tail_params(self) -> list[tuple[str, Tensor]]:
        return Ly.named_params(self.tail_layers, "tail")

    def params(self) -> list[tuple[str, Tensor]]:
        return self.encoder_params() + self.decoder_params() + self.tail_params()

    def prior_params(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.prior.params()]

    # -- Eq.-style cost accounting

    def encoder_size(self) -> int:
        """Total bits of device-side parameters under their annotated widths."""
        return sum(p.size * self.param_bit_widths[n] for n, p in self.encoder_params())

    def encoder_macs(self, input_shape=None) -> int:
        shape = tuple(input_shape) if input_shape is not None else self.input_shape
        total = Ly.layer_macs(self.encoder_layers, shape)
        if self.prior_kind == "hyperprior":
            total += Ly.layer_macs(self.prior.hyper_encoder, (shape[0],) + self.latent_shape)
        return total

    # -- forward paths

    def latent(self, x: Tensor) -> Tensor:
        return Ly.run_layers(self.encoder_layers, x)

    def forward_split(self, x: Tensor, mode: E.QuantizerMode,
                      rng: np.random.Generator | None = None):
        """Returns (logits, z_q, rate_bits). rate_bits is a Tensor; it is part
        of the graph in train-noise mode."""
        z = self.latent(x)
        if not np.all(np.isfinite(z.data)):
            raise NumericError(f"non-finite latent at placement {self.placement}")
        if self.prior_kind == "hyperprior":
            rt = self.prior.round_trip(z, mode, rng)
            z_q, rate = rt.z_q, self.prior.rate_bits(rt)
        else:
            if mode is E.QuantizerMode.TRAIN_NOISE:
                z_q = E.quantize_train(z, rng)
            else:
                z_q = Tensor(E.quantize_infer(z.data, self.prior.L))
            rate = self.prior.rate_bits(z_q)
        if self.crbq and mode is E.QuantizerMode.INFER_ROUND:
            codes, scale, zp = affine_quantize(z.data)
            z_q = Tensor((codes.astype(np.float64) - zp) * scale)
        h = Ly.run_layers(self.decoder_layers, z_q)
        logits = Ly.run_layers(self.tail_layers, h)
        if not np.all(np.isfinite(logits.data)):
            raise NumericError("non-finite logits after decoder/tail")
        return logits, z_q, rate

    # -- serialization / identity

    def checkpoint(self) -> bytes:
        return T.checkpoint_bytes((n, p.data) for n, p in self.params())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params():
            p.data[...] = state[n]
        self._table_cache = None

    def model_id(self) -> bytes:
        return hashlib.md5(self.checkpoint()).digest()

    def project(self) -> None:
        for layer in self.encoder_layers + self.decoder_layers + self.tail_layers:
            layer.project()
        self.prior.project()

    def invalidate_tables(self) -> None:
        self._table_cache = None

    # -- wire coding (shared by the benchmark harness and the split runtime)

    def _channel_tables(self) -> list[C.CdfTable]:
        if self._table_cache is None:
            masses = self.prior.channel_masses() if self.prior_kind == "factorized" \
                else self.prior.zh_prior.channel_masses()
            L = self.prior.L
            self._table_cache = [C.build_cdf_table(m, -L) for m in masses]
        return self._table_cache

    def _conditional_tables(self) -> list[C.CdfTable]:
        if not hasattr(self, "_cond_tables"):
            L = self.prior.L
            self._cond_tables = [C.build_cdf_table(_centered_gaussian_masses(s, L), -L)
                                 for s in _SCALE_GRID]
        return self._cond_tables

    def _per_element_tables(self, channel_of: np.ndarray) -> list[C.CdfTable]:
        tabs = self._channel_tables()
        return [tabs[c] for c in channel_of]

    def encode_latent(self, z: np.ndarray) -> tuple[bytes, int, np.ndarray]:
        """Code one sample's latent. Returns (wire payload, rate_bytes, z_q).

        rate_bytes counts coded bytes only, excluding container framing.
        """
        if self.crbq:
            return self._encode_crbq(z)
        L = self.prior.L
        if self.prior_kind == "factorized":
            z_q = E.quantize_infer(z, L)
            channel_of = np.repeat(np.arange(self.latent_shape[0]),
                                   int(np.prod(self.latent_shape[1:])) if len(self.latent_shape) > 1 else 1)
            bs = C.encode(z_q.ravel().astype(np.int64), self._per_element_tables(channel_of))
            return bs.payload, bs.coded_bytes, z_q
        # hyperprior: hyperlatent stream first, then the conditional stream
        rt = self.prior.round_trip(Tensor(z[None]), E.QuantizerMode.INFER_ROUND)
        zh_sym = rt.z_h_q.data[0].astype(np.int64)
        ch_of = np.repeat(np.arange(zh_sym.shape[0]), int(np.prod(zh_sym.shape[1:])) or 1)
        bs_h = C.encode(zh_sym.ravel(), self._per_element_tables(ch_of))
        sym = (rt.z_q.data[0] - rt.means.data[0])
        sym = np.clip(E.round_half_away(sym), -L, L).astype(np.int64)
        sidx = _scale_grid_indices(rt.scales.data[0].ravel())
        ctabs = self._conditional_tables()
        bs_z = C.encode(sym.ravel(), [ctabs[i] for i in sidx])
        payload = struct.pack("<I", len(bs_h.payload)) + bs_h.payload + bs_z.payload
        return payload, bs_h.coded_bytes + bs_z.coded_bytes, rt.z_q.data[0]

    def decode_latent(self, payload: bytes) -> np.ndarray:
        if self.crbq:
            return self._decode_crbq(payload)
        L = self.prior.L
        if self.prior_kind == "factorized":
            n = int(np.prod(self.latent_shape))
            channel_of = np.repeat(np.arange(self.latent_shape[0]),
                                   int(np.prod(self.latent_shape[1:])) if len(self.latent_shape) > 1 else 1)
            syms = C.decode(payload, self._per_element_tables(channel_of), n)
            return syms.astype(np.float64).reshape(self.latent_shape)
        (hlen,) = struct.unpack_from("<I", payload, 0)
        pay_h, pay_z = payload[4 : 4 + hlen], payload[4 + hlen :]
        zh_shape = Ly.infer_shapes(self.prior.hyper_encoder, (1,) + self.latent_shape)[-1]
        ch_of = np.repeat(np.arange(zh_shape[1]), int(np.prod(zh_shape[2:])) or 1)
        zh_sym = C.decode(pay_h, self._per_element_tables(ch_of), int(np.prod(zh_shape)))
        z_h_q = Tensor(zh_sym.astype(np.float64).reshape(zh_shape))
        means, scales = self.prior._decode_params(z_h_q)
        sidx = _scale_grid_indices(scales.data[0].ravel())
        ctabs = self._conditional_tables()
        n = int(np.prod(self.latent_shape))
        syms = C.decode(pay_z, [ctabs[i] for i in sidx], n)
        return syms.astype(np.float64).reshape(self.latent_shape) + means.data[0]

    def _encode_crbq(self, z: np.ndarray):
        codes, scale, zp = affine_quantize(z)
        raw = codes.ravel().tobytes() + struct.pack("<fi", scale, zp)
        payload = struct.pack("<I", codes.size) + raw + struct.pack("<I", zlib.crc32(raw))
        z_q = (codes.astype(np.float64) - zp) * scale
        return payload, codes.size + 8, z_q

    def _decode_crbq(self, payload: bytes) -> np.ndarray:
        (n,) = struct.unpack_from("<I", payload, 0)
        raw = payload[4:-4]
        (crc,) = struct.unpack_from("<I", payload, len(payload) - 4)
        if zlib.crc32(raw) != crc or len(raw) != n + 8:
            raise C.CorruptStreamError("corrupt bottleneck-quantized payload")
        codes = np.frombuffer(raw[:n], dtype=np.uint8).astype(np.float64)
        scale, zp = struct.unpack_from("<fi", raw, n)
        return ((codes - zp) * scale).reshape(self.latent_shape)

    def payload_overhead(self) -> int:
        """Wire payload bytes that are framing, not coded data."""
        if self.crbq:
            return 8  # count + crc; the affine constants count toward rate
        if self.prior_kind == "hyperprior":
            return 4 + 2 * C.CONTAINER_OVERHEAD
        return C.CONTAINER_OVERHEAD


def affine_quantize(v: np.ndarray) -> tuple[np.ndarray, float, int]:
    """Per-tensor affine u8 quantization with an exact zero-point."""
    mn, mx = float(v.min()), float(v.max())
    if mx == mn:
        return np.zeros(v.shape, dtype=np.uint8), 1.0, 0
    scale = (mx - mn) / 255.0
    zp = int(np.clip(round(-mn / scale), 0, 255))
    codes = np.clip(E.round_half_away(v / scale) + zp, 0, 255).astype(np.uint8)
    return codes, scale, zp


def inject_bottleneck(ref: ReferenceModel, placement: str, bottleneck_channels: int,
                      prior_kind: str = "factorized", seed: int = 0,
                      prior_family: str = "logistic", hyper_channels: int | None = None) -> SplitModel:
    """Split a reference model at `placement` and insert an entropy bottleneck."""
    if placement not in PLACEMENTS:
        raise ConfigError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
    if placement not in ref.boundaries:
        raise ConfigError(f"reference model has no boundary {placement!r}")
    if bottleneck_channels < 1:
        raise ConfigError("bottleneck_channels must be >= 1")
    if prior_kind not in ("factorized", "hyperprior"):
        raise ConfigError(f"unknown prior kind {prior_kind!r}")
    ref = copy.deepcopy(ref)  # the donor model (often a teacher) must stay untouched
    rng = np.random.default_rng(seed)
    bidx = ref.boundaries[placement]
    bshape = ref.boundary_shape(placement)
    cb = bottleneck_channels
    if len(bshape) == 4:
        c = bshape[1]
        analysis = [
            Ly.Conv2d(c, c, 3, stride=1, padding=1, rng=rng),
            Ly.GDN(c),
            Ly.Conv2d(c, cb, 3, stride=1, padding=1, rng=rng),
        ]
        synthesis = [
            Ly.Conv2d(cb, c, 3, stride=1, padding=1, rng=rng),
            Ly.GDN(c, inverse=True),
            Ly.Conv2d(c, c, 3, stride=1, padding=1, rng=rng),
        ]
        latent_shape = (cb, bshape[2], bshape[3])
    else:
        # pooled vector: a 3c hidden width keeps the analysis budget above the
        # spatial 3x3-conv analysis, so encoder size keeps growing with depth
        c = bshape[1]
        analysis = [Ly.Linear(c, 3 * c, rng=rng), Ly.GDN(3 * c),
                    Ly.Linear(3 * c, cb, rng=rng)]
        synthesis = [Ly.Linear(cb, c, rng=rng), Ly.GDN(c, inverse=True)]
        latent_shape = (cb,)
    # confirm the synthesis restores the boundary shape
    restored = Ly.infer_shapes(synthesis, (1,) + latent_shape)[-1]
    if restored != (1,) + bshape[1:]:
        raise ShapeError(f"synthesis restores {restored}, boundary needs {bshape}")
    if prior_kind == "factorized":
        prior = E.FactorizedPrior(cb, family=prior_family)
    else:
        prior = E.build_hyperprior(cb, (1,) + latent_shape,
                                   hyper_channels or max(2, cb // 2), rng)
    encoder = list(ref.layers[:bidx]) + analysis
    tail = list(ref.layers[bidx:])
    return SplitModel(ref.cfg, placement, cb, prior_kind, encoder, synthesis, tail,
                      prior, latent_shape)
