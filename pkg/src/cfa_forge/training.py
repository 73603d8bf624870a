"""Joint training of a CFA module and the demosaicer with Adam."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import demosaicer as dm
from .cfa import (FixedCfa, HardMaxCfa, LinearCfa, SoftmaxCfa, W_CHANNEL_RULE, build_cfa, color_config,
                  parse_pattern)
from .data import PatchDataset, split
from .errors import (BadMagicError, ConfigError, CorruptFileError, DivergenceError, ShapeError,
                     TruncatedFileError, VersionMismatchError)
from .io import atomic_write_bytes
from .metrics import psnr
from .model import JointModel
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CFAF"
CKPT_VERSION = 1
LOSS_REGION = "full 3N x 3N patch"


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    seed: int = 0
    cfa_kind: str = "hardmax"
    cfa_size: int = 8
    color_config: str = "RGB"
    patch_n: int = 8
    l2_coeff: float = dm.DEFAULT_L2
    softmax_growth: float = 1.2
    softmax_alpha0: float = 1.0
    val_fraction: float = 0.02
    lr_decay_epochs: int | None = None  # length of the decay; None means the run's own epoch count

    def __post_init__(self):
        self.color_config = color_config(self.color_config).name
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.cfa_size < 1 or self.patch_n < 1:
            raise ConfigError("batch_size, cfa_size, patch_n must be positive and epochs non-negative")
        if self.l2_coeff < 0 or self.softmax_growth < 1 or not 0 <= self.val_fraction < 1:
            raise ConfigError("invalid l2_coeff, softmax_growth, or val_fraction")
        if self.lr_decay_epochs is not None and self.lr_decay_epochs < 1:
            raise ConfigError("lr_decay_epochs must be positive")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def lr_schedule(epoch, cfg: TrainConfig) -> float:
    """Geometric decay from ``lr_start`` at epoch 0 to ``lr_end`` at the last epoch of the decay.

    The decay spans ``cfg.lr_decay_epochs`` (default: the whole run); a shorter run
    trains on the head of that schedule, a longer one holds ``lr_end`` afterwards.
    """
    if not 0 <= epoch < max(cfg.epochs, 1):
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    horizon = cfg.lr_decay_epochs or cfg.epochs
    if horizon <= 1:
        return cfg.lr_start if epoch == 0 else cfg.lr_end
    frac = min(epoch / (horizon - 1), 1.0)
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr, cfg: TrainConfig | None = None):
    """One bias-corrected Adam update, in place on the arrays in ``params``.

    ``params`` and ``grads`` map names to arrays; a missing gradient counts as zero.
    """
    cfg = cfg or TrainConfig()
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.eps
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict  # name -> float32 array
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _records(ckpt: Checkpoint):
    yield from ckpt.params.items()
    for name in ckpt.adam.m:
        yield "adam.m/" + name, ckpt.adam.m[name]
        yield "adam.v/" + name, ckpt.adam.v[name]


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    parts = []
    for name, arr in _records(ckpt):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    records = b"".join(parts)
    # the record count and byte size let a reader tell truncation from corruption
    blob = json.dumps({
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "adam_t": ckpt.adam.t,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "records": len(parts) // 3,
        "record_bytes": len(records),
    }, sort_keys=True).encode()
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob + records
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {buf[:4]!r})")
    r.take(4)
    version, blob_len = r.unpack("<II")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    blob = r.take(blob_len)
    try:
        meta = json.loads(blob)
        expected = r.pos + int(meta["record_bytes"]) + 4
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"unreadable config blob: {exc}") from None
    if len(buf) < expected:
        raise TruncatedFileError(f"checkpoint truncated: {len(buf)} of {expected} bytes")
    if len(buf) > expected:
        raise CorruptFileError("trailing bytes after checkpoint checksum")
    if struct.unpack("<I", buf[-4:])[0] != zlib.crc32(buf[:-4]):
        raise CorruptFileError("checkpoint checksum mismatch")
    arrays = {}
    for _ in range(meta["records"]):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        count = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf) - 4:
        raise CorruptFileError("record section does not match its declared size")
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    adam = AdamState(t=meta["adam_t"])
    for k, v in arrays.items():
        if k.startswith("adam.m/"):
            adam.m[k[7:]] = v
        elif k.startswith("adam.v/"):
            adam.v[k[7:]] = v
    return Checkpoint(TrainConfig.from_dict(meta["config"]), params, adam, meta["epoch"],
                      meta["rng_state"], meta["extra"])


def save_checkpoint(path, ckpt: Checkpoint):
    atomic_write_bytes(path, checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# -- model <-> checkpoint ------------------------------------------------------

def model_from_checkpoint(ckpt: Checkpoint) -> JointModel:
    cfg = ckpt.config
    config = color_config(cfg.color_config)
    p = ckpt.params
    kind = cfg.cfa_kind
    if kind == "hardmax":
        cfa = HardMaxCfa(cfg.cfa_size, config, scores=p["cfa.scores"])
    elif kind == "softmax":
        cfa = SoftmaxCfa(Tensor(p["cfa.scores"], requires_grad=True, name="cfa.scores"),
                         ckpt.extra.get("alpha", cfg.softmax_alpha0), cfg.softmax_growth, config)
    elif kind == "linear":
        cfa = LinearCfa(cfg.cfa_size, config, weights=p["cfa.weights"], bias=p["cfa.bias"])
    else:
        cfa = FixedCfa(parse_pattern(ckpt.extra["cfa_pattern"], config), name=kind.split(":", 1)[-1])
    named = {k[len("demosaicer."):]: Tensor(v.copy(), requires_grad=True, name=k)
             for k, v in p.items() if k.startswith("demosaicer.")}
    return JointModel(cfa, dm.DemosaicerParams.from_named(named, cfg.l2_coeff), config)


def run_metadata(cfg: TrainConfig):
    return {
        "cfa_kind": cfg.cfa_kind,
        "cfa_size": cfg.cfa_size,
        "color_config": cfg.color_config,
        "w_channel_rule": W_CHANNEL_RULE,
        "loss_region": LOSS_REGION,
    }


# -- training loop ------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_psnr: float
    lr: float
    cfa_pattern: str = ""
    one_hot: bool = True
    alpha: float | None = None
    mask_max_min: float | None = None  # smallest per-pixel max entry of the soft mask

    def progress_line(self):
        return f"epoch={self.epoch} loss={self.loss:.6f} val_psnr={self.val_psnr:.4f}"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list


def validation_psnr(model: JointModel, patches, batch=64):
    """PSNR of the pooled squared error over all held-out patches (final stage, clamped)."""
    if patches is None or len(patches) == 0:
        return float("nan")
    rec = model.predict(patches, batch=batch)
    return psnr(patches, rec)


def _mask_stats(cfa):
    mask = cfa.mask()
    if isinstance(cfa, SoftmaxCfa):
        soft = cfa.soft_mask().data
        return mask, False, float(cfa.alpha), float(soft.max(axis=-1).min())
    if isinstance(cfa, LinearCfa):
        return mask, False, None, None
    if isinstance(cfa, HardMaxCfa):
        from .cfa import hardmax_mask

        onehot = hardmax_mask(cfa.scores).data
        binary = bool(np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=-1) == 1))
        return mask, binary, None, None
    return mask, True, None, None


class Trainer:
    """Holds the mutable training state; ``run`` drives epochs."""

    def __init__(self, dataset: PatchDataset, cfg: TrainConfig):
        if dataset.count == 0:
            raise ConfigError("dataset is empty")
        if dataset.n != cfg.patch_n:
            raise ConfigError(f"dataset patch N={dataset.n} but config expects N={cfg.patch_n}")
        self.cfg = cfg
        config = color_config(cfg.color_config)
        init_ss, split_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        init_rng = np.random.default_rng(init_ss)
        cfa = build_cfa(cfg.cfa_kind, cfg.cfa_size, config, init_rng, cfg.softmax_growth, cfg.softmax_alpha0)
        demos = dm.DemosaicerParams.init(cfa.demosaic_channels, init_rng, cfg.l2_coeff)
        self.model = JointModel(cfa, demos, config)
        n_val = int(round(dataset.count * cfg.val_fraction))
        if cfg.val_fraction > 0 and 0 < n_val < dataset.count:
            self.train_set, self.val_set = split(dataset, cfg.val_fraction, int(split_ss.generate_state(1)[0]))
        else:
            self.train_set, self.val_set = dataset, None
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.adam = AdamState()
        self.epoch = 0
        self.step = 0
        self.history = []

    def checkpoint(self) -> Checkpoint:
        params = {k: v.data.copy() for k, v in self.model.parameters().items()}
        extra = {"metadata": run_metadata(self.cfg), "train_count": self.train_set.count,
                 "val_count": 0 if self.val_set is None else self.val_set.count,
                 "cfa_pattern": self.model.cfa.mask().to_text()}
        if isinstance(self.model.cfa, SoftmaxCfa):
            extra["alpha"] = self.model.cfa.alpha
        adam = AdamState({k: v.copy() for k, v in self.adam.m.items()},
                         {k: v.copy() for k, v in self.adam.v.items()}, self.adam.t)
        return Checkpoint(self.cfg, params, adam, self.epoch, self.shuffle_rng.bit_generator.state, extra)

    def train_step(self, batch, lr):
        model = self.model
        loss = model.loss(batch)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(self.epoch + 1, self.step, value)
        params = model.parameters()
        for p in params.values():
            p.zero_grad()
        loss.backward()
        adam_step({k: p.data for k, p in params.items()},
                  {k: p.grad for k, p in params.items() if p.grad is not None}, self.adam, lr, self.cfg)
        model.cfa.after_step()
        self.step += 1
        return value

    def run_epoch(self):
        cfg = self.cfg
        lr = lr_schedule(self.epoch, cfg)
        patches = self.train_set.patches
        order = self.shuffle_rng.permutation(len(patches))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            total += self.train_step(patches[idx], lr) * len(idx)
        self.model.cfa = self.model.cfa.end_epoch()
        self.epoch += 1
        mask, binary, alpha, mask_max = _mask_stats(self.model.cfa)
        val = validation_psnr(self.model, None if self.val_set is None else self.val_set.patches)
        rec = EpochRecord(self.epoch, total / len(order), val, lr, mask.to_text(), binary, alpha, mask_max)
        self.history.append(rec)
        return rec


def train(dataset: PatchDataset, cfg: TrainConfig, callbacks=()) -> TrainResult:
    """Train for ``cfg.epochs`` epochs; each callback gets ``(record, trainer)`` after every epoch."""
    trainer = Trainer(dataset, cfg)
    for _ in range(cfg.epochs):
        rec = trainer.run_epoch()
        log.info(rec.progress_line())
        for cb in callbacks:
            cb(rec, trainer)
    return TrainResult(trainer.checkpoint(), trainer.history)
