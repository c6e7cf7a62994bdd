"""Benchmark harness: datasets, evaluation, sweeps, Pareto fronts, bit maps.

Rate is always bytes per datum (coded payload bytes, container framing
excluded), distortion is accuracy measured after inference-time rounding,
and ExR-D is the product of encoder parameter bits and rate bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import entropy as E
from . import layers as Ly
from . import nets as N
from . import tensor as T
from . import training as TR
from .layers import ConfigError
from .nets import SplitModel
from .tensor import Tensor

CODE_VERSION = "1"  # bumped when training/eval semantics change; keys the sweep cache
RECORD_LEN = 3073  # 1 label byte + 32*32*3 pixel bytes


class IngestionError(ValueError):
    """Raised for malformed dataset files; message carries the byte offset."""


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W float64
    labels: np.ndarray  # N int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.images) == 0:
            raise ConfigError("dataset needs matching, non-empty images and labels")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ConfigError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.images)

    def fingerprint(self) -> str:
        h = hashlib.md5()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def synthetic_dataset(seed: int, n: int, classes: int, hw: int = 32,
                      split: str = "train") -> Dataset:
    """Procedural oriented-grating images; class sets orientation and frequency."""
    if n < 1 or classes < 1:
        raise ConfigError("need n >= 1 and classes >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    labels = rng.integers(0, classes, size=n)
    images = np.empty((n, 3, hw, hw))
    for i, k in enumerate(labels):
        angle = math.pi * (k / classes + 0.03 * rng.standard_normal())
        freq = 2.0 + 1.5 * k
        phase = rng.uniform(0, 2 * math.pi)
        carrier = np.sin(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle))
                         + phase)
        for c in range(3):
            gain = 0.5 + 0.5 * math.cos(2 * math.pi * (k / classes) + c * 2.1)
            images[i, c] = gain * carrier + 0.25 * rng.standard_normal((hw, hw))
    return Dataset(images, labels.astype(np.int64), classes, split)


def load_binary_image_set(path: str, classes: int = 10, split: str = "train") -> Dataset:
    """Parse 1-byte-label + 3072-byte-pixel records (32x32 RGB)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) == 0 or len(blob) % RECORD_LEN != 0:
        raise IngestionError(
            f"file length {len(blob)} is not a multiple of {RECORD_LEN}; "
            f"trailing fragment starts at byte offset {len(blob) - len(blob) % RECORD_LEN}")
    n = len(blob) // RECORD_LEN
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, RECORD_LEN)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= classes)[0]
    if len(bad):
        i = int(bad[0])
        raise IngestionError(
            f"label {labels[i]} >= {classes} in record {i} at byte offset {i * RECORD_LEN}")
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, classes, split)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: SplitModel, ds: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """(accuracy, mean coded bytes per sample) under inference-time rounding."""
    if model.cfg.classes != ds.classes:
        raise ConfigError(f"model has {model.cfg.classes} classes, dataset {ds.classes}")
    hits = 0
    total_bytes = 0
    for i in range(0, len(ds), batch_size):
        xb = Tensor(ds.images[i : i + batch_size])
        z = model.latent(xb).data
        z_qs = []
        for j in range(len(z)):
            _, rate_bytes, z_q = model.encode_latent(z[j])
            total_bytes += rate_bytes
            z_qs.append(z_q)
        h = Ly.run_layers(model.decoder_layers, Tensor(np.stack(z_qs)))
        logits = Ly.run_layers(model.tail_layers, h).data
        hits += int((logits.argmax(axis=1) == ds.labels[i : i + batch_size]).sum())
    return hits / len(ds), total_bytes / len(ds)


def evaluate_reference(model: N.ReferenceModel, ds: Dataset, batch_size: int = 64) -> float:
    hits = 0
    for i in range(0, len(ds), batch_size):
        logits = model.forward(Tensor(ds.images[i : i + batch_size])).data
        hits += int((logits.argmax(axis=1) == ds.labels[i : i + batch_size]).sum())
    return hits / len(ds)


# ---------------------------------------------------------------------------
# tradeoff records


@dataclass
class TradeoffRecord:
    label: str
    rate_bytes: float
    distortion: float  # accuracy in [0, 1]
    encoder_bits: int
    encoder_macs: int
    exrd: float = 0.0
    error: str | None = None

    def __post_init__(self):
        if self.error is not None:
            return
        if not 0.0 <= self.distortion <= 1.0:
            raise ConfigError(f"distortion {self.distortion} outside [0, 1]")
        want = self.encoder_bits * self.rate_bytes
        if self.exrd == 0.0:
            self.exrd = want
        elif self.exrd != want:
            raise ConfigError("exrd must equal encoder_bits * rate_bytes")


def pareto_front(records: list[TradeoffRecord],
                 axes: tuple[str, ...] = ("rate", "distortion", "encoder")) -> list[TradeoffRecord]:
    """Non-dominated subset; rate/encoder are costs, distortion is a benefit."""
    if not records:
        raise ConfigError("pareto_front needs at least one record")
    bad = set(axes) - {"rate", "distortion", "encoder"}
    if bad:
        raise ConfigError(f"unknown axes {sorted(bad)}")

    def costs(r: TradeoffRecord) -> list[float]:
        out = []
        if "rate" in axes:
            out.append(r.rate_bytes)
        if "encoder" in axes:
            out.append(float(r.encoder_bits))
        return out

    def dominates(a: TradeoffRecord, b: TradeoffRecord) -> bool:
        ca, cb = costs(a), costs(b)
        le = all(x <= y for x, y in zip(ca, cb))
        strict = any(x < y for x, y in zip(ca, cb))
        if "distortion" in axes:
            le = le and a.distortion >= b.distortion
            strict = strict or a.distortion > b.distortion
        return le and strict

    live = [r for r in records if r.error is None]
    return [r for r in live if not any(dominates(o, r) for o in live if o is not r)]


# ---------------------------------------------------------------------------
# sweeps with a config-hash cache


@dataclass
class SweepSpec:
    ref_cfg: N.ReferenceConfig
    teacher: N.ReferenceModel | None
    train_cfg: TR.TrainConfig
    train_ds: Dataset
    eval_ds: Dataset
    betas: list[float] = field(default_factory=lambda: [0.01])
    placements: list[str] = field(default_factory=lambda: ["layer2"])
    channels: list[int] = field(default_factory=lambda: [4])
    prior_kinds: list[str] = field(default_factory=lambda: ["factorized"])
    regimes: list[str] = field(default_factory=lambda: ["two-stage"])
    seeds: list[int] = field(default_factory=lambda: [0])
    cache_dir: str | None = None


def _cell_key(spec: SweepSpec, regime: str, placement: str, ch: int, prior: str,
              beta: float, seed: int) -> str:
    h = hashlib.md5()
    teacher_id = ("none" if spec.teacher is None
                  else hashlib.md5(spec.teacher.checkpoint()).hexdigest())
    parts = (CODE_VERSION, repr(dataclasses.astuple(spec.ref_cfg)),
             repr(dataclasses.astuple(spec.train_cfg)), teacher_id,
             spec.train_ds.fingerprint(), spec.eval_ds.fingerprint(),
             regime, placement, str(ch), prior, repr(beta), str(seed))
    h.update("|".join(parts).encode())
    return h.hexdigest()


def run_cell(spec: SweepSpec, regime: str, placement: str, ch: int, prior: str,
             beta: float, seed: int) -> tuple[TradeoffRecord, SplitModel]:
    """Train and evaluate one sweep configuration."""
    cfg = dataclasses.replace(spec.train_cfg, regime=regime, beta=beta, seed=seed)
    if regime != "end-to-end" and spec.teacher is None:
        raise ConfigError(f"regime {regime!r} needs a trained teacher")
    # end-to-end trains from scratch; teacher-based regimes split the teacher
    base = (N.build_reference(spec.ref_cfg, seed) if regime == "end-to-end"
            else spec.teacher)
    model = N.inject_bottleneck(base, placement, ch, prior, seed=seed)
    teacher = None if regime == "end-to-end" else TR.TeacherHandle(spec.teacher, placement)
    model = TR.train(model, teacher, spec.train_ds.images, spec.train_ds.labels, cfg)
    acc, rate = evaluate(model, spec.eval_ds)
    label = f"{regime}/{placement}/c{ch}/{prior}/b{beta:g}/s{seed}"
    rec = TradeoffRecord(label, rate, acc, model.encoder_size(), model.encoder_macs())
    return rec, model


def sweep(spec: SweepSpec) -> list[TradeoffRecord]:
    """Run the cross product of the spec's axes; cached cells are not retrained.

    After the call, spec.last_trained lists the labels trained in this run.
    """
    records: list[TradeoffRecord] = []
    trained: list[str] = []
    for regime in spec.regimes:
        for placement in spec.placements:
            for ch in spec.channels:
                for prior in spec.prior_kinds:
                    for beta in spec.betas:
                        for seed in spec.seeds:
                            label = f"{regime}/{placement}/c{ch}/{prior}/b{beta:g}/s{seed}"
                            cached = _cache_load(spec, regime, placement, ch, prior,
                                                 beta, seed)
                            if cached is not None:
                                records.append(cached)
                                continue
                            try:
                                rec, model = run_cell(spec, regime, placement, ch,
                                                      prior, beta, seed)
                                trained.append(label)
                            except (ConfigError, N.NumericError, T.ShapeError) as exc:
                                rec, model = TradeoffRecord(
                                    label, 0.0, 0.0, 0, 0, error=str(exc)), None
                            _cache_store(spec, regime, placement, ch, prior, beta,
                                         seed, rec, model)
                            records.append(rec)
    spec.last_trained = trained
    return records


def _cache_path(spec: SweepSpec, key: str) -> str | None:
    return None if spec.cache_dir is None else os.path.join(spec.cache_dir, key)


def _cache_load(spec: SweepSpec, *cell) -> TradeoffRecord | None:
    path = _cache_path(spec, _cell_key(spec, *cell))
    if path is None or not os.path.exists(path + ".json"):
        return None
    with open(path + ".json") as fh:
        return TradeoffRecord(**json.load(fh))


def _cache_store(spec: SweepSpec, *args) -> None:
    *cell, rec, model = args
    path = _cache_path(spec, _cell_key(spec, *cell))
    if path is None:
        return
    os.makedirs(spec.cache_dir, exist_ok=True)
    if model is not None:
        _atomic_write(path + ".sctw", model.checkpoint())
    _atomic_write(path + ".json", json.dumps(dataclasses.asdict(rec)).encode())


def _atomic_write(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    # exclusive creation so concurrent sweep processes never interleave writes
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
    try:
        os.write(fd, data)
    finally:
        os.close(fd)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# bit-allocation maps


def bit_allocation_map(model: SplitModel, x: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-spatial-cell coded bits for one sample; (grid, total_bits).

    The grid sums channel bits per latent position; for a hyperprior the
    hyperlatent bits are spread uniformly over the latent cells they govern,
    so the grid total still equals rate_bits exactly.
    """
    if len(model.latent_shape) < 3:
        raise ConfigError(f"placement {model.placement!r} has no spatial latent grid")
    z = model.latent(Tensor(np.asarray(x, dtype=np.float64)[None]))
    if model.prior_kind == "factorized":
        z_q = Tensor(E.quantize_infer(z.data, model.prior.L))
        p = model.prior.likelihood(z_q).data[0]
        bits = -np.log2(np.maximum(p, E.P_MIN))
        grid = bits.sum(axis=0)
        total = model.prior.rate_bits(z_q).item()
    else:
        rt = model.prior.round_trip(z, E.QuantizerMode.INFER_ROUND)
        p_cond = E.conditional_gaussian_mass(rt.z_q, rt.means, rt.scales).data[0]
        bits = -np.log2(np.maximum(p_cond, E.P_MIN)).sum(axis=0)
        # hyperlatent bits, spread over the latent cells each covers
        p_h = model.prior.zh_prior.likelihood(rt.z_h_q).data[0]
        h_bits = -np.log2(np.maximum(p_h, E.P_MIN)).sum(axis=0)
        fh = bits.shape[0] // h_bits.shape[0]
        fw = bits.shape[1] // h_bits.shape[1]
        spread = np.repeat(np.repeat(h_bits, fh, axis=0), fw, axis=1) / (fh * fw)
        grid = bits + spread
        total = model.prior.rate_bits(rt).item()
    return grid, total


def write_text_matrix(grid: np.ndarray, path: str) -> None:
    np.savetxt(path, grid, fmt="%.6f")


def write_pgm(grid: np.ndarray, path: str) -> None:
    """Normalized 8-bit grayscale P5 image of a bit-allocation grid."""
    lo, hi = float(grid.min()), float(grid.max())
    norm = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
    pix = np.round(norm * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode())
        fh.write(pix.tobytes())


# ---------------------------------------------------------------------------
# exports


_CSV_COLS = ("label", "rate_bytes", "accuracy", "encoder_bits", "encoder_macs", "exrd")


def export_records(records: list[TradeoffRecord], path: str, fmt: str) -> None:
    for r in records:
        if r.error is None and r.exrd != r.encoder_bits * r.rate_bytes:
            raise ConfigError(f"record {r.label}: exrd is not encoder_bits * rate_bytes")
    if fmt == "csv":
        lines = [",".join(_CSV_COLS)]
        for r in records:
            if r.error is not None:
                lines.append(f"{r.label},error,{json.dumps(r.error)},,,")
                continue
            lines.append(f"{r.label},{r.rate_bytes!r},{r.distortion!r},"
                         f"{r.encoder_bits},{r.encoder_macs},{r.exrd!r}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    elif fmt == "json":
        with open(path, "w") as fh:
            json.dump([dataclasses.asdict(r) for r in records], fh, indent=1)
    else:
        raise ConfigError(f"unknown export format {fmt!r}")


def load_records_json(path: str) -> list[TradeoffRecord]:
    with open(path) as fh:
        return [TradeoffRecord(**d) for d in json.load(fh)]


# ---------------------------------------------------------------------------
# model bundles (architecture description + checkpoint) and dataset specs


def save_reference_bundle(model: N.ReferenceModel, path: str) -> None:
    meta = {"kind": "reference", "seed": model.seed,
            "cfg": dataclasses.asdict(model.cfg)}
    _atomic_write(path + ".json", json.dumps(meta).encode())
    _atomic_write(path + ".sctw", model.checkpoint())


def save_split_bundle(model: SplitModel, path: str, ref_seed: int,
                      inject_seed: int) -> None:
    meta = {"kind": "split", "ref_seed": ref_seed, "inject_seed": inject_seed,
            "cfg": dataclasses.asdict(model.cfg), "placement": model.placement,
            "channels": model.bottleneck_channels, "prior_kind": model.prior_kind,
            "crbq": model.crbq}
    _atomic_write(path + ".json", json.dumps(meta).encode())
    _atomic_write(path + ".sctw", model.checkpoint())


def load_bundle(path: str):
    """Rebuild a saved reference or split model from its json+sctw pair."""
    with open(path + ".json") as fh:
        meta = json.load(fh)
    state = T.parse_checkpoint(open(path + ".sctw", "rb").read())
    cfg = N.ReferenceConfig(**meta["cfg"])
    if meta["kind"] == "reference":
        model = N.build_reference(cfg, meta["seed"])
        model.load_state(state)
        return model
    ref = N.build_reference(cfg, meta["ref_seed"])
    model = N.inject_bottleneck(ref, meta["placement"], meta["channels"],
                                meta["prior_kind"], seed=meta["inject_seed"])
    model.load_state(state)
    model.crbq = meta["crbq"]
    return model


def parse_dataset_spec(spec: str) -> Dataset:
    """"synthetic:seed=1,n=100,classes=4[,hw=32]" or a binary-record file path
    (optionally "path:classes=10")."""
    if spec.startswith("synthetic:"):
        kv = dict(item.split("=", 1) for item in spec[len("synthetic:"):].split(","))
        try:
            return synthetic_dataset(int(kv.get("seed", 0)), int(kv["n"]),
                                     int(kv["classes"]), int(kv.get("hw", 32)))
        except KeyError as exc:
            raise ConfigError(f"synthetic dataset spec missing {exc}") from None
    path, _, rest = spec.partition(":")
    classes = 10
    if rest:
        kv = dict(item.split("=", 1) for item in rest.split(","))
        classes = int(kv.get("classes", 10))
    return load_binary_image_set(path, classes)
