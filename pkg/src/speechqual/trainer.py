"""Optimization recipe: warmup epoch, Adam, plateau decay, early stop, checkpoints.

The learning rate ramps linearly to lr_init over the first epoch, then stays
constant except for multiplicative drops when validation loss plateaus.
Validation uses plain MSE regardless of the training loss, and the parameters
of the best validation epoch are snapshotted for test time.

Everything is deterministic given (seed, data, config): shuffles are pure
functions of (seed, epoch), so a run can be checkpointed and resumed with
bit-identical results.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import DatasetRecord, make_batches
from .features import load_feature_stack
from .model import ArchConfig, ModelParams, backward_batch, forward_batch
from .objectives import BatchLabels, bias_aware_loss, mse_loss

LOSSES = ("mse", "bias_aware")
DTYPES = ("float64", "float32")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-5
    plateau_factor: float = 0.1
    plateau_patience: int = 15
    early_stop_patience: int = 20
    batch_size: int = 128
    max_epochs: int = 100
    seed: int = 0
    loss: str = "mse"
    dtype: str = "float64"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class TrainState:
    epoch: int
    global_step: int
    lr: float
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    best_val_loss: float
    epochs_since_improvement: int
    epochs_since_improvement_lr: int
    best_epoch: int
    best_params: ModelParams | None
    seed: int

    @classmethod
    def fresh(cls, params: ModelParams, cfg: TrainConfig) -> "TrainState":
        return cls(
            epoch=0,
            global_step=0,
            lr=cfg.lr_init,
            adam_m={k: np.zeros_like(v) for k, v in params.items()},
            adam_v={k: np.zeros_like(v) for k, v in params.items()},
            best_val_loss=float("inf"),
            epochs_since_improvement=0,
            epochs_since_improvement_lr=0,
            best_epoch=-1,
            best_params=None,
            seed=cfg.seed,
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    is_best: bool


@dataclass(frozen=True)
class TrainReport:
    rows: tuple[EpochRecord, ...]
    warmup_lrs: tuple[float, ...]  # per-update lrs of the warmup epoch

    def to_csv(self) -> str:
        lines = ["epoch,lr,train_loss,val_loss,is_best"]
        for r in self.rows:
            lines.append(
                f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.val_loss!r},{int(r.is_best)}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    arch: ArchConfig
    cfg: TrainConfig
    params: ModelParams  # parameters at save time; the resume point
    state: TrainState
    history: tuple[EpochRecord, ...]

    @property
    def best_params(self) -> ModelParams:
        """Parameters of the best validation epoch (what test time loads)."""
        return self.state.best_params if self.state.best_params is not None else self.params


@dataclass(frozen=True)
class TrainData:
    """In-memory training inputs: record lists plus their feature arrays."""

    train: tuple[DatasetRecord, ...]
    val: tuple[DatasetRecord, ...]
    features: Mapping[str, np.ndarray]

    @classmethod
    def load(cls, train, val, dtype=np.float64) -> "TrainData":
        features = load_features(list(train) + list(val), dtype)
        return cls(train=tuple(train), val=tuple(val), features=features)


def load_features(records, dtype=np.float64) -> dict[str, np.ndarray]:
    """Load each record's WSQF stack once; keyed by feature path."""
    features: dict[str, np.ndarray] = {}
    for rec in records:
        if rec.feature_path not in features:
            stack = load_feature_stack(rec.feature_path, dtype=dtype)
            features[rec.feature_path] = stack.data
    return features


def warmup_lr(step: int, steps_per_epoch: int, lr_init: float) -> float:
    """Linear ramp over the first epoch, hitting exactly lr_init at its end."""
    if steps_per_epoch <= 0:
        raise ValueError("steps_per_epoch must be positive")
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step >= steps_per_epoch - 1:
        return lr_init
    return lr_init * (step + 1) / steps_per_epoch


def plateau_step(
    state: TrainState, val_loss: float, factor: float = 0.1, patience: int = 15
) -> TrainState:
    """Multiply lr by factor after `patience` consecutive non-improving epochs.

    Improvement is a strict decrease of the best loss so far; call
    record_best afterwards to commit the new best.
    """
    if val_loss < state.best_val_loss:
        state.epochs_since_improvement_lr = 0
        return state
    state.epochs_since_improvement_lr += 1
    if state.epochs_since_improvement_lr >= patience:
        state.lr *= factor
        state.epochs_since_improvement_lr = 0
    return state


def early_stop(state: TrainState, val_loss: float, patience: int = 20) -> bool:
    """True exactly when `patience` consecutive epochs brought no new best."""
    if val_loss < state.best_val_loss:
        state.epochs_since_improvement = 0
        return False
    state.epochs_since_improvement += 1
    return state.epochs_since_improvement >= patience


def record_best(
    state: TrainState, val_loss: float, params: ModelParams, epoch: int
) -> bool:
    """Commit a new best validation loss and snapshot the parameters."""
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.best_params = params.copy()
        state.best_epoch = epoch
        return True
    return False


def adam_update(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: TrainState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam step with bias correction; advances state.global_step."""
    if set(grads) != set(params.keys()):
        raise ValueError("gradient names do not match parameter names")
    state.global_step += 1
    t = state.global_step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _batch_targets(batch, heads) -> dict[str, np.ndarray]:
    targets: dict[str, np.ndarray] = {}
    for head in heads:
        column = []
        for rec in batch:
            normalized = rec.normalized()
            if head not in normalized:
                raise ValueError(f"record {rec.id!r} has no {head} label")
            column.append(normalized[head])
        targets[head] = np.asarray(column, dtype=np.float64)
    return targets


def predict_scores(
    params: ModelParams,
    arch: ArchConfig,
    records,
    features: Mapping[str, np.ndarray],
    batch_size: int = 128,
) -> dict[str, np.ndarray]:
    """Forward all records in fixed order; head -> scores array."""
    records = list(records)
    chunks = [records[i : i + batch_size] for i in range(0, len(records), batch_size)]
    parts = {head: [] for head in arch.head_names}
    for chunk in chunks:
        x = np.stack([features[r.feature_path] for r in chunk])
        scores, _ = forward_batch(x, params, arch)
        for head in arch.head_names:
            parts[head].append(scores[head])
    return {head: np.concatenate(parts[head]) for head in arch.head_names}


def dataset_mse(
    params: ModelParams,
    arch: ArchConfig,
    records,
    features: Mapping[str, np.ndarray],
    batch_size: int = 128,
) -> float:
    """Plain (unweighted) MSE over all records and heads, in normalized space."""
    records = list(records)
    if not records:
        raise ValueError("empty record list")
    scores = predict_scores(params, arch, records, features, batch_size)
    targets = _batch_targets(records, arch.head_names)
    total = 0.0
    for head in arch.head_names:
        diff = scores[head] - targets[head]
        total += float(np.sum(diff * diff))
    return total / (len(records) * len(arch.head_names))


def train(
    params: ModelParams,
    arch: ArchConfig,
    data: TrainData,
    cfg: TrainConfig,
    state: TrainState | None = None,
    history: tuple[EpochRecord, ...] = (),
    epoch_limit: int | None = None,
) -> tuple[Checkpoint, TrainReport]:
    """Run the full recipe; returns the checkpoint (with best snapshot) and report.

    Pass the state/history of a loaded checkpoint to resume; the result is
    bit-identical to the uninterrupted run with the same seed.  epoch_limit
    pauses the run after that many total epochs (an interruption point) without
    touching the config.
    """
    if not data.train or not data.val:
        raise ValueError("training needs nonempty train and val partitions")
    if np.dtype(params.dtype) != cfg.np_dtype:
        raise ValueError(
            f"params dtype {params.dtype} does not match config dtype {cfg.dtype}"
        )
    state = state if state is not None else TrainState.fresh(params, cfg)
    rows = list(history)
    train_counts: dict[str, int] = {}
    for rec in data.train:
        train_counts[rec.dataset_tag] = train_counts.get(rec.dataset_tag, 0) + 1
    warmup_trace: list[float] = []

    last_epoch = cfg.max_epochs if epoch_limit is None else min(cfg.max_epochs, epoch_limit)
    for epoch in range(state.epoch, last_epoch):
        batches = make_batches(data.train, cfg.batch_size, cfg.seed, epoch)
        steps_per_epoch = len(batches)
        loss_sum = 0.0
        sample_count = 0
        lr = state.lr
        for step, batch in enumerate(batches):
            if epoch == 0:
                lr = warmup_lr(step, steps_per_epoch, cfg.lr_init)
                warmup_trace.append(lr)
            else:
                lr = state.lr
            x = np.stack([data.features[r.feature_path] for r in batch]).astype(
                cfg.np_dtype, copy=False
            )
            scores, cache = forward_batch(x, params, arch)
            targets = _batch_targets(batch, arch.head_names)
            if cfg.loss == "mse":
                loss, dpred = mse_loss(scores, targets)
            else:
                labels = BatchLabels(
                    targets=targets,
                    tags=tuple(r.dataset_tag for r in batch),
                    sizes=train_counts,
                )
                loss, dpred = bias_aware_loss(scores, labels)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, batch {step}, lr {lr}"
                )
            grads = backward_batch(cache, dpred)
            adam_update(
                params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
            )
            loss_sum += loss * len(batch)
            sample_count += len(batch)
        train_loss = loss_sum / sample_count
        val_loss = dataset_mse(params, arch, data.val, data.features, cfg.batch_size)
        stop = early_stop(state, val_loss, cfg.early_stop_patience)
        plateau_step(state, val_loss, cfg.plateau_factor, cfg.plateau_patience)
        is_best = record_best(state, val_loss, params, epoch)
        state.epoch = epoch + 1
        rows.append(EpochRecord(epoch, lr, train_loss, val_loss, is_best))
        if stop:
            break

    ckpt = Checkpoint(arch=arch, cfg=cfg, params=params, state=state, history=tuple(rows))
    report = TrainReport(rows=tuple(rows), warmup_lrs=tuple(warmup_trace))
    return ckpt, report


# --- checkpoint container ("WSQC") ------------------------------------------
#
# magic "WSQC", version u16, then four u64-length-prefixed sections:
# config JSON, parameter table, optimizer/scheduler state, history JSON.
# The file ends with a crc32 (u32, little-endian) over everything before it.

CKPT_MAGIC = b"WSQC"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _pack_array_table(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        code = _DTYPE_CODES[np.dtype(arr.dtype)]
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def _unpack_array_table(buf: bytes, offset: int) -> tuple[dict[str, np.ndarray], int]:
    try:
        (count,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            name = buf[offset : offset + name_len].decode("utf-8")
            offset += name_len
            code, ndim = struct.unpack_from("<BB", buf, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, offset)
            offset += 4 * ndim
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = buf[offset : offset + nbytes]
            if len(raw) != nbytes:
                raise CorruptCheckpointError("array payload truncated")
            offset += nbytes
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        return arrays, offset
    except (struct.error, KeyError) as exc:
        raise CorruptCheckpointError(f"malformed array table: {exc}") from None


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    config_blob = _json_bytes(
        {"arch": asdict(ckpt.arch) | {"head_names": list(ckpt.arch.head_names)},
         "train": asdict(ckpt.cfg)}
    )
    params_blob = _pack_array_table(ckpt.params.arrays)
    state = ckpt.state
    scalars = _json_bytes(
        {
            "epoch": state.epoch,
            "global_step": state.global_step,
            "lr": state.lr,
            "best_val_loss": state.best_val_loss,
            "epochs_since_improvement": state.epochs_since_improvement,
            "epochs_since_improvement_lr": state.epochs_since_improvement_lr,
            "best_epoch": state.best_epoch,
            "seed": state.seed,
            "has_best": state.best_params is not None,
        }
    )
    state_blob = b"".join(
        [
            struct.pack("<Q", len(scalars)),
            scalars,
            _pack_array_table(state.adam_m),
            _pack_array_table(state.adam_v),
            _pack_array_table(
                state.best_params.arrays if state.best_params is not None else {}
            ),
        ]
    )
    history_blob = _json_bytes([asdict(row) for row in ckpt.history])

    body = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    for section in (config_blob, params_blob, state_blob, history_blob):
        body.append(struct.pack("<Q", len(section)))
        body.append(section)
    payload = b"".join(body)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10:
        raise CorruptCheckpointError(f"{path}: file too short to be a checkpoint")
    payload, trailer = blob[:-4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", trailer)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    if payload[:4] != CKPT_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {payload[:4]!r}")
    (version,) = struct.unpack_from("<H", payload, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, reader supports {CKPT_VERSION}"
        )
    offset = 6
    sections = []
    for _ in range(4):
        if offset + 8 > len(payload):
            raise CorruptCheckpointError(f"{path}: section header truncated")
        (length,) = struct.unpack_from("<Q", payload, offset)
        offset += 8
        section = payload[offset : offset + length]
        if len(section) != length:
            raise CorruptCheckpointError(f"{path}: section truncated")
        sections.append(section)
        offset += length
    if offset != len(payload):
        raise CorruptCheckpointError(f"{path}: {len(payload) - offset} trailing bytes")

    config = json.loads(sections[0].decode("utf-8"))
    arch_kwargs = dict(config["arch"])
    arch_kwargs["head_names"] = tuple(arch_kwargs["head_names"])
    arch = ArchConfig(**arch_kwargs)
    cfg = TrainConfig(**config["train"])

    params_arrays, _ = _unpack_array_table(sections[1], 0)

    state_blob = sections[2]
    (scalar_len,) = struct.unpack_from("<Q", state_blob, 0)
    scalars = json.loads(state_blob[8 : 8 + scalar_len].decode("utf-8"))
    offset = 8 + scalar_len
    adam_m, offset = _unpack_array_table(state_blob, offset)
    adam_v, offset = _unpack_array_table(state_blob, offset)
    best_arrays, offset = _unpack_array_table(state_blob, offset)
    state = TrainState(
        epoch=scalars["epoch"],
        global_step=scalars["global_step"],
        lr=scalars["lr"],
        adam_m=adam_m,
        adam_v=adam_v,
        best_val_loss=scalars["best_val_loss"],
        epochs_since_improvement=scalars["epochs_since_improvement"],
        epochs_since_improvement_lr=scalars["epochs_since_improvement_lr"],
        best_epoch=scalars["best_epoch"],
        best_params=ModelParams(best_arrays) if scalars["has_best"] else None,
        seed=scalars["seed"],
    )
    history = tuple(EpochRecord(**row) for row in json.loads(sections[3].decode("utf-8")))
    return Checkpoint(
        arch=arch, cfg=cfg, params=ModelParams(params_arrays), state=state, history=history
    )


def resume(ckpt: Checkpoint, data: TrainData) -> tuple[Checkpoint, TrainReport]:
    """Continue training from a checkpoint's saved state."""
    return train(
        ckpt.params, ckpt.arch, data, ckpt.cfg, state=ckpt.state, history=ckpt.history
    )
