"""Dynamic masking, Adam with decoupled weight decay, and the two training
loops (MLM pretraining and multi-label fine-tuning) with per-epoch validation.

Every random draw derives from explicit seeds, so identical (data, config,
seed) reproduce identical logs and final parameters in 64-bit mode.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetSplits, LabeledMolecule
from .model import (
    ModelConfig,
    NumericError,
    ParameterStore,
    load_model,
    loss_and_grad,
    mlm_loss_value,
    save_model,
)
from .tokenizer import MASK_ID, N_SPECIALS, TokenSequence, Tokenizer

# Seed-stream tags keeping the independent random streams apart.
_STREAM_MASKING = 1
_STREAM_VALIDATION = 2
_STREAM_SHUFFLE = 3
_STREAM_DROPOUT = 4


class TrainingError(Exception):
    pass


class TrainingAborted(TrainingError):
    def __init__(self, epoch: int, cause: Exception):
        super().__init__(f"training aborted at epoch {epoch}: {cause}")
        self.epoch = epoch
        self.cause = cause


@dataclass
class MaskingPolicy:
    """Which tokens get hidden for MLM and what happens to them.

    A selected token becomes MASK, a random non-special token, or stays
    unchanged, per the action fractions.  Specials are never selected.
    """

    mask_probability: float = 0.15
    mask_fraction: float = 0.8
    random_fraction: float = 0.1
    keep_fraction: float = 0.1
    seed: int = 0
    force_minimum: bool = True

    def __post_init__(self):
        if not 0.0 <= self.mask_probability <= 1.0:
            raise TrainingError("mask_probability must be in [0, 1]")
        total = self.mask_fraction + self.random_fraction + self.keep_fraction
        if abs(total - 1.0) > 1e-9:
            raise TrainingError(f"action fractions must sum to 1, got {total}")


def apply_dynamic_masking(
    batch: list[TokenSequence],
    policy: MaskingPolicy,
    epoch: int,
    vocab_size: int,
    start_index: int = 0,
) -> tuple[list[TokenSequence], list[list[tuple[int, int]]]]:
    """Mask each sequence independently, re-deriving the pattern from
    (policy seed, epoch, sequence index) so every epoch sees fresh masks and
    every rerun sees the same ones.

    Returns the masked batch and, per item, (position, original id) targets.
    """
    masked_batch: list[TokenSequence] = []
    targets: list[list[tuple[int, int]]] = []
    for i, seq in enumerate(batch):
        rng = np.random.default_rng(
            [policy.seed, _STREAM_MASKING, epoch, start_index + i]
        )
        ids = list(seq.ids)
        maskable = [p for p, t in enumerate(ids) if t >= N_SPECIALS]
        selected: list[int] = []
        if maskable and policy.mask_probability > 0.0:
            for _ in range(10):
                draws = rng.random(len(maskable))
                selected = [
                    p for p, r in zip(maskable, draws) if r < policy.mask_probability
                ]
                if selected or not policy.force_minimum:
                    break
        if maskable and not selected and policy.force_minimum and policy.mask_probability > 0.0:
            selected = [maskable[int(rng.integers(len(maskable)))]]
        entry: list[tuple[int, int]] = []
        for pos in selected:
            entry.append((pos, ids[pos]))
            action = rng.random()
            if action < policy.mask_fraction:
                ids[pos] = MASK_ID
            elif action < policy.mask_fraction + policy.random_fraction:
                ids[pos] = int(rng.integers(N_SPECIALS, vocab_size))
            # else: keep the original token
        masked_batch.append(TokenSequence(tuple(ids), truncated=seq.truncated))
        targets.append(entry)
    return masked_batch, targets


@dataclass
class OptimizerState:
    """Adam moments plus the decoupled weight-decay hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def for_store(store: ParameterStore, lr: float, weight_decay: float) -> "OptimizerState":
        state = OptimizerState(lr=lr, weight_decay=weight_decay)
        for name, p in store.params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def _decay_applies(name: str) -> bool:
    """Decoupled decay hits weight matrices and embeddings, never layer-norm
    parameters or biases."""
    last = name.rsplit(".", 1)[-1]
    return name in ("tok_emb", "pos_emb") or last.startswith("w")


def adam_step(store: ParameterStore, state: OptimizerState) -> None:
    """One bias-corrected Adam update with decoupled weight decay."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in store.names():
        grad = store.grads[name]
        if not np.isfinite(grad).all():
            raise NumericError(f"gradient of {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        p = store.params[name]
        if state.weight_decay != 0.0 and _decay_applies(name):
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 = none
    # Accepted for config-file completeness but not implemented:
    lr_schedule: str = "constant"
    early_stopping: bool = False
    gradient_clip: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule != "constant":
            raise NotImplementedError("learning-rate schedules are unimplemented")
        if self.early_stopping:
            raise NotImplementedError("early stopping is unimplemented")
        if self.gradient_clip:
            raise NotImplementedError("gradient clipping is unimplemented")


@dataclass
class EpochLog:
    epoch: int
    phase: str  # "pretrain" or "finetune"
    train_loss: float
    val_loss: float
    val_f1_samples: float | None
    seconds: float


def append_epoch_logs(path, logs: list[EpochLog]) -> None:
    """Append to the run CSV, writing the header on first use."""
    new_file = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(
                ["epoch", "phase", "train_loss", "val_loss", "val_f1_samples", "seconds"]
            )
        for log in logs:
            writer.writerow(
                [
                    log.epoch,
                    log.phase,
                    f"{log.train_loss:.10g}",
                    f"{log.val_loss:.10g}",
                    "" if log.val_f1_samples is None else f"{log.val_f1_samples:.10g}",
                    f"{log.seconds:.3f}",
                ]
            )


def encode_corpus(tokenizer: Tokenizer, smiles_list: list[str]) -> list[TokenSequence]:
    """Encode training strings; over-length inputs are an error here because
    truncation would corrupt what the model is supposed to learn."""
    return [tokenizer.encode(s) for s in smiles_list]


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _checkpoint(store, config, state, directory, filename) -> str:
    path = os.path.join(directory, filename)
    save_model(store, config, path, extra=_pack_optimizer(state))
    return path


def _pack_optimizer(state: OptimizerState) -> bytes:
    buf = io.BytesIO()
    meta = {
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "weight_decay": state.weight_decay,
        "step": state.step,
        "names": list(state.m),
    }
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_b)))
    buf.write(meta_b)
    for name in state.m:
        buf.write(np.ascontiguousarray(state.m[name], dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(state.v[name], dtype="<f8").tobytes())
    return buf.getvalue()


def unpack_optimizer(blob: bytes, store: ParameterStore) -> OptimizerState:
    if not blob:
        raise TrainingError("checkpoint carries no optimizer state")
    (meta_len,) = struct.unpack_from("<I", blob, 0)
    meta = json.loads(blob[4:4 + meta_len].decode("utf-8"))
    state = OptimizerState(
        lr=meta["lr"],
        beta1=meta["beta1"],
        beta2=meta["beta2"],
        eps=meta["eps"],
        weight_decay=meta["weight_decay"],
        step=meta["step"],
    )
    off = 4 + meta_len
    for name in meta["names"]:
        shape = store.params[name].shape
        count = store.params[name].size
        m = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        v = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        state.m[name] = m.copy()
        state.v[name] = v.copy()
    return state


def load_checkpoint(path) -> tuple[ParameterStore, ModelConfig, OptimizerState | None]:
    store, config, extra = load_model(path)
    state = unpack_optimizer(extra, store) if extra else None
    return store, config, state


def pretrain(
    store: ParameterStore,
    config: ModelConfig,
    tokenizer: Tokenizer,
    corpus: list[str],
    val_corpus: list[str],
    tcfg: TrainConfig,
    policy: MaskingPolicy,
    checkpoint_dir: str | None = None,
) -> list[EpochLog]:
    """Masked-language-model pretraining with dynamic per-epoch masking.

    Validation uses a fixed mask pattern (its own seed stream, independent of
    the epoch) so the validation loss stays comparable across epochs, and it
    never touches the weights.
    """
    seqs = encode_corpus(tokenizer, corpus)
    val_seqs = encode_corpus(tokenizer, val_corpus)
    val_policy = MaskingPolicy(
        mask_probability=policy.mask_probability,
        mask_fraction=policy.mask_fraction,
        random_fraction=policy.random_fraction,
        keep_fraction=policy.keep_fraction,
        seed=policy.seed + _STREAM_VALIDATION * 1_000_003,
        force_minimum=policy.force_minimum,
    )
    val_masked, val_targets = apply_dynamic_masking(
        val_seqs, val_policy, epoch=0, vocab_size=config.vocab_size
    )
    state = OptimizerState.for_store(store, tcfg.learning_rate, tcfg.weight_decay)
    logs: list[EpochLog] = []
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    best_val = np.inf

    for epoch in range(1, tcfg.epochs + 1):
        started = time.monotonic()
        masked, targets = apply_dynamic_masking(
            seqs, policy, epoch=epoch, vocab_size=config.vocab_size
        )
        shuffle_rng = np.random.default_rng([tcfg.seed, _STREAM_SHUFFLE, epoch])
        order = shuffle_rng.permutation(len(masked))
        dropout_rng = np.random.default_rng([tcfg.seed, _STREAM_DROPOUT, epoch])
        total_loss = 0.0
        total_masked = 0
        try:
            for idx in _batches(order, tcfg.batch_size):
                batch = [masked[i] for i in idx]
                batch_targets = [targets[i] for i in idx]
                n_masked = sum(len(t) for t in batch_targets)
                loss = loss_and_grad(
                    store,
                    config,
                    batch,
                    "mlm",
                    mlm_targets=batch_targets,
                    train_mode=True,
                    rng=dropout_rng,
                )
                adam_step(store, state)
                total_loss += loss * n_masked
                total_masked += n_masked
        except NumericError as exc:
            raise TrainingAborted(epoch, exc) from exc
        train_loss = total_loss / max(total_masked, 1)
        val_loss = _batched_mlm_loss(store, config, val_masked, val_targets, tcfg.batch_size)
        logs.append(
            EpochLog(epoch, "pretrain", train_loss, val_loss, None, time.monotonic() - started)
        )
        if checkpoint_dir:
            _checkpoint(store, config, state, checkpoint_dir, "last.bin")
            if val_loss < best_val:
                best_val = val_loss
                _checkpoint(store, config, state, checkpoint_dir, "best.bin")
            if tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
                _checkpoint(store, config, state, checkpoint_dir, f"epoch{epoch:04d}.bin")
    return logs


def _batched_mlm_loss(store, config, masked, targets, batch_size) -> float:
    total = 0.0
    count = 0
    for start in range(0, len(masked), batch_size):
        batch = masked[start:start + batch_size]
        batch_targets = targets[start:start + batch_size]
        n = sum(len(t) for t in batch_targets)
        if n == 0:
            continue
        total += mlm_loss_value(store, config, batch, batch_targets) * n
        count += n
    return total / max(count, 1)


def _multilabel_val(store, config, seqs, labels, batch_size, threshold=0.5):
    from scipy.special import expit

    from .metrics import prf
    from .model import multilabel_loss_value, predict_logits

    if not seqs:
        return 0.0, 0.0
    logits = predict_logits(store, config, seqs, batch_size)
    loss = multilabel_loss_value(logits, labels.astype(np.float64))
    y_pred = (expit(logits) >= threshold).astype(np.int8)
    _, _, f1 = prf(labels.astype(np.int8), y_pred, "samples")
    return loss, f1


def finetune(
    store: ParameterStore,
    config: ModelConfig,
    tokenizer: Tokenizer,
    splits: DatasetSplits,
    tcfg: TrainConfig,
    checkpoint_dir: str | None = None,
    threshold: float = 0.5,
) -> list[EpochLog]:
    """Multi-label fine-tuning; logs validation loss and samples-F1 per epoch
    and keeps the best-validation checkpoint separately from the last."""

    def prepare(molecules: list[LabeledMolecule]):
        seqs = encode_corpus(tokenizer, [m.smiles for m in molecules])
        labels = np.stack([m.labels for m in molecules]).astype(np.float64)
        return seqs, labels

    if splits.train and len(splits.train[0].labels) != config.n_labels:
        raise TrainingError(
            f"dataset has {len(splits.train[0].labels)} labels, model expects "
            f"{config.n_labels}"
        )
    train_seqs, train_labels = prepare(splits.train)
    val_seqs, val_labels = prepare(splits.validation)
    state = OptimizerState.for_store(store, tcfg.learning_rate, tcfg.weight_decay)
    logs: list[EpochLog] = []
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    best_f1 = -1.0

    for epoch in range(1, tcfg.epochs + 1):
        started = time.monotonic()
        shuffle_rng = np.random.default_rng([tcfg.seed, _STREAM_SHUFFLE, epoch])
        order = shuffle_rng.permutation(len(train_seqs))
        dropout_rng = np.random.default_rng([tcfg.seed, _STREAM_DROPOUT, epoch])
        total_loss = 0.0
        try:
            for idx in _batches(order, tcfg.batch_size):
                batch = [train_seqs[i] for i in idx]
                y = train_labels[idx]
                loss = loss_and_grad(
                    store,
                    config,
                    batch,
                    "multilabel",
                    labels=y,
                    train_mode=True,
                    rng=dropout_rng,
                )
                adam_step(store, state)
                total_loss += loss * len(idx)
        except NumericError as exc:
            raise TrainingAborted(epoch, exc) from exc
        train_loss = total_loss / len(train_seqs)
        val_loss, val_f1 = _multilabel_val(
            store, config, val_seqs, val_labels, tcfg.batch_size, threshold
        )
        logs.append(
            EpochLog(epoch, "finetune", train_loss, val_loss, val_f1, time.monotonic() - started)
        )
        if checkpoint_dir:
            _checkpoint(store, config, state, checkpoint_dir, "last.bin")
            if val_f1 > best_f1:
                best_f1 = val_f1
                _checkpoint(store, config, state, checkpoint_dir, "best.bin")
            if tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
                _checkpoint(store, config, state, checkpoint_dir, f"epoch{epoch:04d}.bin")
    return logs
