"""Encoder-only transformer over token sequences, written directly in numpy.

Forward pass with optional attention capture, plus an analytic backward pass
filling per-parameter gradient slots.  Pre-norm residual blocks, learned
absolute position embeddings, BOS pooling for classification, and an MLM
projection tied to the token embedding matrix.

All math runs in 64-bit floats by default so gradients can be checked against
central finite differences; float32 is available as a speed option.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf, expit

from .tokenizer import PAD_ID, TokenSequence

LN_EPS = 1e-5
_SQRT_2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

MODEL_MAGIC = b"OGMODEL\n"
MODEL_VERSION = 1


class ModelError(Exception):
    pass


class NumericError(ModelError):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, where: str):
        super().__init__(f"non-finite value in {where}")
        self.where = where


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_labels: int
    n_layers: int = 6
    n_heads: int = 12
    hidden_dim: int = 768
    ffn_dim: int = 3072
    max_len: int = 512
    attention_dropout: float = 0.1
    activation: str = "gelu"  # "gelu" (exact, erf-based) or "gelu_tanh"
    mlm_loss: str = "cross_entropy"  # or "bce": per-token binary cross-entropy
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        counts = {
            "vocab_size": self.vocab_size,
            "n_labels": self.n_labels,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "hidden_dim": self.hidden_dim,
            "ffn_dim": self.ffn_dim,
            "max_len": self.max_len,
        }
        for key, value in counts.items():
            if value < 1:
                raise ModelError(f"{key} must be >= 1, got {value}")
        if self.hidden_dim % self.n_heads != 0:
            raise ModelError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.attention_dropout < 1.0:
            raise ModelError("attention_dropout must be in [0, 1)")
        if self.activation not in ("gelu", "gelu_tanh"):
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.mlm_loss not in ("cross_entropy", "bce"):
            raise ModelError(f"unknown mlm_loss {self.mlm_loss!r}")
        if self.dtype not in ("float64", "float32"):
            raise ModelError(f"unknown dtype {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


class ParameterStore:
    """Named parameter arrays in fixed declaration order, each with a
    same-shape gradient slot."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self.params:
            raise ModelError(f"duplicate parameter {name}")
        self.params[name] = array
        self.grads[name] = np.zeros_like(array)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, p in self.params.items():
            out.add(name, p.copy())
        return out


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Declaration-order map of parameter names to shapes."""
    d, f = config.hidden_dim, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
    }
    for i in range(config.n_layers):
        prefix = f"layers.{i}."
        shapes[prefix + "ln1.g"] = (d,)
        shapes[prefix + "ln1.b"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[prefix + f"attn.w{proj}"] = (d, d)
            shapes[prefix + f"attn.b{proj}"] = (d,)
        shapes[prefix + "ln2.g"] = (d,)
        shapes[prefix + "ln2.b"] = (d,)
        shapes[prefix + "ffn.w1"] = (d, f)
        shapes[prefix + "ffn.b1"] = (f,)
        shapes[prefix + "ffn.w2"] = (f, d)
        shapes[prefix + "ffn.b2"] = (d,)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    # MLM head: transform, then a decoder tied to the token embeddings.
    shapes["mlm.w"] = (d, d)
    shapes["mlm.b"] = (d,)
    shapes["mlm_ln.g"] = (d,)
    shapes["mlm_ln.b"] = (d,)
    shapes["mlm_bias"] = (config.vocab_size,)
    shapes["cls.w"] = (d, config.n_labels)
    shapes["cls.b"] = (config.n_labels,)
    return shapes


def expected_parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


def init_model(config: ModelConfig) -> ParameterStore:
    """Weights from N(0, 0.02^2), layer-norm scale 1 / offset 0, biases 0,
    PAD embedding row zeroed.  Deterministic given config.seed."""
    rng = np.random.default_rng(config.seed)
    dtype = config.np_dtype()
    store = ParameterStore()
    for name, shape in parameter_shapes(config).items():
        last = name.rsplit(".", 1)[-1]
        if name in ("tok_emb", "pos_emb") or last.startswith("w"):
            arr = rng.normal(0.0, 0.02, size=shape)
        elif last == "g":
            arr = np.ones(shape)
        else:  # layer-norm offsets and all biases
            arr = np.zeros(shape)
        store.add(name, np.asarray(arr, dtype=dtype))
    store.params["tok_emb"][PAD_ID, :] = 0.0
    return store


# ---------------------------------------------------------------------------
# primitives


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * g + b, (xhat, inv_std)


def _layer_norm_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv_std = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


def _gelu(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "gelu":
        return 0.5 * x * (1.0 + erf(x / _SQRT_2))
    t = np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t)


def _gelu_grad(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return cdf + x * pdf
    c = np.sqrt(2.0 / np.pi)
    u = c * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x * x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def pad_batch(seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into an id matrix padded with PAD; mask marks real
    positions."""
    if not seqs:
        raise ModelError("empty batch")
    max_t = max(len(s) for s in seqs)
    ids = np.full((len(seqs), max_t), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), max_t), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        mask[i, : len(s)] = True
    return ids, mask


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


# ---------------------------------------------------------------------------
# forward


@dataclass
class AttentionSummary:
    """Post-softmax attention probabilities for one item: [layer, head,
    query, key].  Rows over unmasked keys sum to 1; padded keys are 0."""

    weights: np.ndarray
    seq_len: int


@dataclass
class ForwardOutput:
    hidden: np.ndarray  # [seq_len, hidden_dim]
    pooled: np.ndarray  # hidden state at the BOS position
    logits: np.ndarray  # [n_labels]
    probabilities: np.ndarray  # sigmoid(logits)
    attention: AttentionSummary | None = None


def _forward_core(
    store: ParameterStore,
    config: ModelConfig,
    ids: np.ndarray,
    mask: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
):
    """Run the encoder stack, returning final hidden states and a cache of
    every intermediate needed by the backward pass."""
    p = store.params
    B, T = ids.shape
    if T > config.max_len:
        raise ModelError(f"sequence length {T} exceeds max_len {config.max_len}")
    if ids.max() >= config.vocab_size or ids.min() < 0:
        raise ModelError("token id out of range")
    dropout = config.attention_dropout if train_mode else 0.0
    if dropout > 0.0 and rng is None:
        raise ModelError("train_mode forward with dropout requires an rng")

    x = p["tok_emb"][ids] + p["pos_emb"][:T]
    cache = {"ids": ids, "mask": mask, "layers": [], "T": T}
    key_mask = mask[:, None, None, :]  # broadcast over heads and queries
    scale = 1.0 / np.sqrt(config.head_dim)

    for i in range(config.n_layers):
        lp = f"layers.{i}."
        lc: dict = {}
        h1, ln1_cache = _layer_norm(x, p[lp + "ln1.g"], p[lp + "ln1.b"])
        q = _split_heads(h1 @ p[lp + "attn.wq"] + p[lp + "attn.bq"], config.n_heads)
        k = _split_heads(h1 @ p[lp + "attn.wk"] + p[lp + "attn.bk"], config.n_heads)
        v = _split_heads(h1 @ p[lp + "attn.wv"] + p[lp + "attn.bv"], config.n_heads)
        scores = (q @ k.swapaxes(-1, -2)) * scale
        scores = np.where(key_mask, scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        exp = np.exp(scores)
        probs = exp / exp.sum(axis=-1, keepdims=True)
        if dropout > 0.0:
            keep = rng.random(probs.shape) >= dropout
            probs_used = probs * keep / (1.0 - dropout)
        else:
            keep = None
            probs_used = probs
        ctx = _merge_heads(probs_used @ v)
        attn_out = ctx @ p[lp + "attn.wo"] + p[lp + "attn.bo"]
        x_mid = x + attn_out
        h2, ln2_cache = _layer_norm(x_mid, p[lp + "ln2.g"], p[lp + "ln2.b"])
        a1 = h2 @ p[lp + "ffn.w1"] + p[lp + "ffn.b1"]
        g1 = _gelu(a1, config.activation)
        f_out = g1 @ p[lp + "ffn.w2"] + p[lp + "ffn.b2"]
        x = x_mid + f_out
        lc.update(
            h1=h1, ln1=ln1_cache, q=q, k=k, v=v, probs=probs, keep=keep,
            probs_used=probs_used, ctx=ctx, x_mid=x_mid, h2=h2, ln2=ln2_cache,
            a1=a1, g1=g1,
        )
        cache["layers"].append(lc)

    hidden, final_cache = _layer_norm(x, p["final_ln.g"], p["final_ln.b"])
    cache["final_ln_in"] = x
    cache["final_ln"] = final_cache
    cache["hidden"] = hidden
    cache["dropout"] = dropout
    return hidden, cache


def forward(
    store: ParameterStore,
    config: ModelConfig,
    batch: list[TokenSequence],
    capture_attention: bool = False,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> list[ForwardOutput]:
    """Encode a batch and apply the classification head.

    Padded positions are masked out of attention; the pooled vector is the
    hidden state at BOS; label probabilities are elementwise sigmoids.
    """
    ids, mask = pad_batch(batch)
    hidden, cache = _forward_core(store, config, ids, mask, train_mode, rng)
    pooled = hidden[:, 0, :]
    logits = pooled @ store.params["cls.w"] + store.params["cls.b"]
    probs = _sigmoid(logits)
    outputs = []
    for b, seq in enumerate(batch):
        att = None
        if capture_attention:
            att = AttentionSummary(
                weights=np.stack([lc["probs"][b] for lc in cache["layers"]]),
                seq_len=len(seq),
            )
        outputs.append(
            ForwardOutput(
                hidden=hidden[b, : len(seq)].copy(),
                pooled=pooled[b].copy(),
                logits=logits[b].copy(),
                probabilities=probs[b].copy(),
                attention=att,
            )
        )
    return outputs


def _mlm_head_forward(store: ParameterStore, config: ModelConfig, rows: np.ndarray):
    """Transform (dense + gelu + layer norm), then the tied decoder."""
    p = store.params
    a = rows @ p["mlm.w"] + p["mlm.b"]
    g = _gelu(a, config.activation)
    t, ln_cache = _layer_norm(g, p["mlm_ln.g"], p["mlm_ln.b"])
    logits = t @ p["tok_emb"].T + p["mlm_bias"]
    return logits, (rows, a, t, ln_cache)


def _mlm_head_backward(store: ParameterStore, config: ModelConfig, dlogits, cache):
    rows, a, t, ln_cache = cache
    p, grad = store.params, store.grads
    grad["mlm_bias"] += dlogits.sum(axis=0)
    grad["tok_emb"] += dlogits.T @ t
    dt = dlogits @ p["tok_emb"]
    dg, dlng, dlnb = _layer_norm_backward(dt, ln_cache, p["mlm_ln.g"])
    grad["mlm_ln.g"] += dlng
    grad["mlm_ln.b"] += dlnb
    da = dg * _gelu_grad(a, config.activation)
    grad["mlm.w"] += rows.T @ da
    grad["mlm.b"] += da.sum(axis=0)
    return da @ p["mlm.w"].T


def mlm_logits(
    store: ParameterStore,
    config: ModelConfig,
    hidden: np.ndarray,
    positions: list[int],
) -> np.ndarray:
    """Vocabulary logits at the given positions of one item's hidden states.

    The decoder weight is the transposed token embedding plus a learned bias,
    applied after the head's transform.
    """
    T = hidden.shape[0]
    for pos in positions:
        if not 0 <= pos < T:
            raise ModelError(f"masked position {pos} out of range for length {T}")
    rows = hidden[np.asarray(positions, dtype=np.int64)]
    logits, _ = _mlm_head_forward(store, config, rows)
    return logits


# ---------------------------------------------------------------------------
# losses and backward


def _backward_core(store: ParameterStore, config: ModelConfig, cache, d_hidden):
    """Propagate d(loss)/d(final hidden) back to every parameter gradient."""
    p, g = store.params, store.grads
    ids, T = cache["ids"], cache["T"]
    d = config.hidden_dim
    scale = 1.0 / np.sqrt(config.head_dim)
    dropout = cache["dropout"]

    dx, dg_f, db_f = _layer_norm_backward(d_hidden, cache["final_ln"], p["final_ln.g"])
    g["final_ln.g"] += dg_f
    g["final_ln.b"] += db_f

    for i in reversed(range(config.n_layers)):
        lp = f"layers.{i}."
        lc = cache["layers"][i]
        # FFN block
        df = dx  # gradient at x_out flows to both f_out and x_mid
        g[lp + "ffn.w2"] += lc["g1"].reshape(-1, config.ffn_dim).T @ df.reshape(-1, d)
        g[lp + "ffn.b2"] += df.sum(axis=(0, 1))
        dg1 = df @ p[lp + "ffn.w2"].T
        da1 = dg1 * _gelu_grad(lc["a1"], config.activation)
        g[lp + "ffn.w1"] += lc["h2"].reshape(-1, d).T @ da1.reshape(-1, config.ffn_dim)
        g[lp + "ffn.b1"] += da1.sum(axis=(0, 1))
        dh2 = da1 @ p[lp + "ffn.w1"].T
        dx_mid, dg2, db2 = _layer_norm_backward(dh2, lc["ln2"], p[lp + "ln2.g"])
        g[lp + "ln2.g"] += dg2
        g[lp + "ln2.b"] += db2
        dx_mid = dx_mid + dx  # residual

        # attention block
        da_out = dx_mid
        g[lp + "attn.wo"] += lc["ctx"].reshape(-1, d).T @ da_out.reshape(-1, d)
        g[lp + "attn.bo"] += da_out.sum(axis=(0, 1))
        dctx = _split_heads(da_out @ p[lp + "attn.wo"].T, config.n_heads)
        dp_used = dctx @ lc["v"].swapaxes(-1, -2)
        dv = lc["probs_used"].swapaxes(-1, -2) @ dctx
        if dropout > 0.0:
            dp = dp_used * lc["keep"] / (1.0 - dropout)
        else:
            dp = dp_used
        probs = lc["probs"]
        ds = probs * (dp - (probs * dp).sum(axis=-1, keepdims=True))
        dq = (ds @ lc["k"]) * scale
        dk = (ds.swapaxes(-1, -2) @ lc["q"]) * scale
        dq, dk, dv = (_merge_heads(a) for a in (dq, dk, dv))
        h1_flat = lc["h1"].reshape(-1, d)
        for proj, darr in (("q", dq), ("k", dk), ("v", dv)):
            g[lp + f"attn.w{proj}"] += h1_flat.T @ darr.reshape(-1, d)
            g[lp + f"attn.b{proj}"] += darr.sum(axis=(0, 1))
        dh1 = (
            dq @ p[lp + "attn.wq"].T
            + dk @ p[lp + "attn.wk"].T
            + dv @ p[lp + "attn.wv"].T
        )
        dx_in, dg1_, db1_ = _layer_norm_backward(dh1, lc["ln1"], p[lp + "ln1.g"])
        g[lp + "ln1.g"] += dg1_
        g[lp + "ln1.b"] += db1_
        dx = dx_mid + dx_in

    np.add.at(g["tok_emb"], ids.reshape(-1), dx.reshape(-1, d))
    g["pos_emb"][:T] += dx.sum(axis=0)


def multilabel_loss_value(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy on logits over all (item, label) cells."""
    z = logits
    per_cell = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(per_cell.mean())


def _mlm_objective(config: ModelConfig, logits: np.ndarray, targets: np.ndarray):
    """(loss, dloss/dlogits) for the configured MLM objective."""
    M, V = logits.shape
    if config.mlm_loss == "cross_entropy":
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1))
        loss = float((logz - shifted[np.arange(M), targets]).mean())
        dlogits = np.exp(shifted) / np.exp(logz)[:, None]
        dlogits[np.arange(M), targets] -= 1.0
        dlogits /= M
    else:  # literal per-token binary cross-entropy over the vocabulary
        onehot = np.zeros_like(logits)
        onehot[np.arange(M), targets] = 1.0
        loss = multilabel_loss_value(logits, onehot)
        dlogits = (_sigmoid(logits) - onehot) / (M * V)
    return loss, dlogits


def _mlm_head_loss(store, config, rows: np.ndarray, targets: np.ndarray):
    """Loss and d(loss)/d(rows) for MLM rows gathered at masked positions;
    also accumulates the head's own gradients."""
    logits, cache = _mlm_head_forward(store, config, rows)
    loss, dlogits = _mlm_objective(config, logits, targets)
    drows = _mlm_head_backward(store, config, dlogits, cache)
    return loss, drows


def mlm_loss_value(
    store: ParameterStore,
    config: ModelConfig,
    batch: list[TokenSequence],
    targets: list[list[tuple[int, int]]],
) -> float:
    """Forward-only MLM loss (no gradients touched); used for validation."""
    ids, mask = pad_batch(batch)
    hidden, _ = _forward_core(store, config, ids, mask, train_mode=False)
    rows, tgt = _gather_mlm(hidden, targets)
    logits, _ = _mlm_head_forward(store, config, rows)
    loss, _ = _mlm_objective(config, logits, tgt)
    return loss


def _gather_mlm(hidden: np.ndarray, targets: list[list[tuple[int, int]]]):
    b_idx, t_idx, tgt = [], [], []
    for b, entries in enumerate(targets):
        for pos, original in entries:
            b_idx.append(b)
            t_idx.append(pos)
            tgt.append(original)
    if not tgt:
        raise ModelError("MLM batch contains no masked positions")
    rows = hidden[np.asarray(b_idx), np.asarray(t_idx)]
    return rows, np.asarray(tgt, dtype=np.int64)


def loss_and_grad(
    store: ParameterStore,
    config: ModelConfig,
    batch: list[TokenSequence],
    objective: str,
    labels: np.ndarray | None = None,
    mlm_targets: list[list[tuple[int, int]]] | None = None,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> float:
    """Compute the objective and fill every gradient slot.

    objective "multilabel" needs ``labels`` [batch, n_labels]; "mlm" needs
    ``mlm_targets``: per item, (position, original token id) pairs for the
    already-masked batch.
    """
    if objective not in ("multilabel", "mlm"):
        raise ModelError(f"unknown objective {objective!r}")
    store.zero_grads()
    ids, mask = pad_batch(batch)
    hidden, cache = _forward_core(store, config, ids, mask, train_mode, rng)
    d_hidden = np.zeros_like(hidden)

    if objective == "multilabel":
        if labels is None:
            raise ModelError("multilabel objective requires labels")
        y = np.asarray(labels, dtype=hidden.dtype)
        if y.shape != (len(batch), config.n_labels):
            raise ModelError(
                f"labels shape {y.shape} != {(len(batch), config.n_labels)}"
            )
        pooled = hidden[:, 0, :]
        logits = pooled @ store.params["cls.w"] + store.params["cls.b"]
        loss = multilabel_loss_value(logits, y)
        dlogits = (_sigmoid(logits) - y) / y.size
        store.grads["cls.w"] += pooled.T @ dlogits
        store.grads["cls.b"] += dlogits.sum(axis=0)
        d_hidden[:, 0, :] = dlogits @ store.params["cls.w"].T
    else:
        if mlm_targets is None:
            raise ModelError("mlm objective requires mlm_targets")
        rows, tgt = _gather_mlm(hidden, mlm_targets)
        loss, drows = _mlm_head_loss(store, config, rows, tgt)
        j = 0
        for b, entries in enumerate(mlm_targets):
            for pos, _ in entries:
                d_hidden[b, pos] += drows[j]
                j += 1

    if not np.isfinite(loss):
        raise NumericError("loss")
    _backward_core(store, config, cache, d_hidden)

    for name in store.names():
        if not np.isfinite(store.grads[name]).all():
            raise NumericError(f"gradient of {name}")
    return loss


def predict_logits(
    store: ParameterStore,
    config: ModelConfig,
    seqs: list[TokenSequence],
    batch_size: int = 32,
) -> np.ndarray:
    """Classification logits for a list of sequences, batched, inference mode."""
    out = np.zeros((len(seqs), config.n_labels))
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        ids, mask = pad_batch(chunk)
        hidden, _ = _forward_core(store, config, ids, mask)
        out[start:start + len(chunk)] = (
            hidden[:, 0, :] @ store.params["cls.w"] + store.params["cls.b"]
        )
    return out


def predict_probabilities(
    store: ParameterStore,
    config: ModelConfig,
    seqs: list[TokenSequence],
    batch_size: int = 32,
) -> np.ndarray:
    """Label probabilities for a list of sequences, batched, inference mode."""
    return _sigmoid(predict_logits(store, config, seqs, batch_size))


# ---------------------------------------------------------------------------
# persistence


def save_model(store: ParameterStore, config: ModelConfig, path, extra: bytes = b"") -> None:
    """Binary format: magic, version, config JSON, then each array in
    declaration order as little-endian float64 with a name+shape header.
    Written atomically (temp file + rename)."""
    payload = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION)]
    cfg = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    payload.append(struct.pack("<I", len(cfg)))
    payload.append(cfg)
    payload.append(struct.pack("<I", len(store.params)))
    for name, arr in store.params.items():
        name_b = name.encode("utf-8")
        payload.append(struct.pack("<H", len(name_b)))
        payload.append(name_b)
        payload.append(struct.pack("<B", arr.ndim))
        payload.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload.append(extra)
    blob = b"".join(payload)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> tuple[ParameterStore, ModelConfig, bytes]:
    """Inverse of save_model; returns any trailing bytes (optimizer state)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelError(f"{path}: not a model file")
    off = len(MODEL_MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != MODEL_VERSION:
        raise ModelError(f"{path}: unsupported model format version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = ModelConfig(**json.loads(blob[off:off + cfg_len].decode("utf-8")))
    off += cfg_len
    (n_arrays,) = struct.unpack_from("<I", blob, off)
    off += 4
    store = ParameterStore()
    dtype = config.np_dtype()
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        store.add(name, np.asarray(arr, dtype=dtype).copy())
    expected = parameter_shapes(config)
    if list(store.params) != list(expected):
        raise ModelError(f"{path}: parameter names do not match the stored config")
    return store, config, blob[off:]
