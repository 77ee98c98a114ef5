"""Tiny decoder-only transformer trained from scratch on the fact corpus.

Pre-norm residual blocks, learned absolute positions, no biases on the
linear maps. Training consumes packed batches: several sentences are
concatenated into one token row with a block-diagonal causal mask and
per-sentence position restart, which keeps step counts low without padding.

The feed-forward up-projection of any block can be overridden through a
callback; that is the seam the editing adapter plugs into.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import substream
from .tensor import (
    Tensor,
    add,
    backward,
    concat_cols,
    dot,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mul,
    pick,
    row_logsumexp,
    slice_cols,
    softmax,
    sub,
    take_col,
    transpose,
)

MASKED = -1e9  # additive attention mask value for disallowed pairs


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 32

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be positive, got {self.vocab_size}")
        if self.n_layers < 2:
            raise ValueError(f"need at least 2 layers, got {self.n_layers}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 2:
            raise ValueError(f"max_seq_len must be at least 2, got {self.max_seq_len}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def param_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        names += [
            f"layer{i}.ln1.gain", f"layer{i}.ln1.bias",
            f"layer{i}.attn.wq", f"layer{i}.attn.wk",
            f"layer{i}.attn.wv", f"layer{i}.attn.wo",
            f"layer{i}.ln2.gain", f"layer{i}.ln2.bias",
            f"layer{i}.ffn.up", f"layer{i}.ffn.down",
        ]
    names += ["final_ln.gain", "final_ln.bias", "unembed"]
    return names


def _param_shape(name: str, c: ModelConfig) -> tuple[int, ...]:
    if name == "tok_emb":
        return (c.vocab_size, c.d_model)
    if name == "pos_emb":
        return (c.max_seq_len, c.d_model)
    if name == "unembed":
        return (c.d_model, c.vocab_size)
    if name.startswith("final_ln."):
        return (c.d_model,)
    leaf = name.split(".", 1)[-1]
    return {
        "ln1.gain": (c.d_model,), "ln1.bias": (c.d_model,),
        "ln2.gain": (c.d_model,), "ln2.bias": (c.d_model,),
        "attn.wq": (c.d_model, c.d_model), "attn.wk": (c.d_model, c.d_model),
        "attn.wv": (c.d_model, c.d_model), "attn.wo": (c.d_model, c.d_model),
        "ffn.up": (c.d_model, c.d_ff), "ffn.down": (c.d_ff, c.d_model),
    }[leaf]


EMBED_INIT_STD = 0.5   # token/position tables; also sets LM-head scale via tying
WEIGHT_INIT_STD = 0.02


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Gaussian weights; norm gains 1, norm shifts 0.

    Embedding tables start an order of magnitude hotter than the interior
    weights: they double as the LM head and as the entity vectors anchor
    routing pools, and both want rows that stand clear of the noise floor.
    """
    rng = substream(seed, "init")
    params = {}
    for name in param_names(config):
        shape = _param_shape(name, config)
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            params[name] = rng.normal(0.0, EMBED_INIT_STD, size=shape)
        else:
            params[name] = rng.normal(0.0, WEIGHT_INIT_STD, size=shape)
    return params


# ---------------------------------------------------------------------------
# packing


@dataclass
class PackedBatch:
    """Sentences laid end to end in one token row.

    ``mask`` is additive ([T, T], 0 within a sentence's causal triangle,
    ``MASKED`` elsewhere) and ``positions`` restart at 0 on each sentence so
    the pack behaves exactly like independent sequences.
    """

    ids: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    bounds: list[tuple[int, int]]


def pack_sequences(seqs: list[list[int]], max_seq_len: int) -> PackedBatch:
    if not seqs:
        raise ValueError("cannot pack an empty batch")
    for s in seqs:
        if not s:
            raise ValueError("cannot pack an empty sequence")
        if len(s) > max_seq_len:
            raise ValueError(f"sequence of length {len(s)} exceeds max_seq_len={max_seq_len}")
    total = sum(len(s) for s in seqs)
    ids = np.zeros(total, dtype=np.int64)
    positions = np.zeros(total, dtype=np.int64)
    mask = np.full((total, total), MASKED)
    bounds = []
    cursor = 0
    for s in seqs:
        stop = cursor + len(s)
        ids[cursor:stop] = s
        positions[cursor:stop] = np.arange(len(s))
        block = np.triu(np.full((len(s), len(s)), MASKED), k=1)
        mask[cursor:stop, cursor:stop] = block
        bounds.append((cursor, stop))
        cursor = stop
    return PackedBatch(ids=ids, positions=positions, mask=mask, bounds=bounds)


def next_token_targets(batch: PackedBatch) -> tuple[np.ndarray, np.ndarray]:
    """Per-position target ids and 0/1 weights for plain next-token training."""
    total = batch.ids.shape[0]
    targets = np.zeros(total, dtype=np.int64)
    weights = np.zeros(total)
    for start, stop in batch.bounds:
        targets[start:stop - 1] = batch.ids[start + 1:stop]
        weights[start:stop - 1] = 1.0
    return targets, weights


# ---------------------------------------------------------------------------
# forward


def transformer_logits(params: dict[str, Tensor], config: ModelConfig,
                       batch: PackedBatch, up_fn=None) -> Tensor:
    """Logits [T, vocab] for a packed batch.

    ``up_fn(layer_idx, x)`` may return a replacement for the feed-forward
    up-projection output at that block (or None to keep the base path).
    """
    x = add(embedding(params["tok_emb"], batch.ids),
            embedding(params["pos_emb"], batch.positions))
    mask_t = Tensor(batch.mask)
    dh = config.d_model // config.n_heads
    scale = 1.0 / math.sqrt(dh)
    for i in range(config.n_layers):
        normed = layer_norm(x, params[f"layer{i}.ln1.gain"], params[f"layer{i}.ln1.bias"])
        q = matmul(normed, params[f"layer{i}.attn.wq"])
        k = matmul(normed, params[f"layer{i}.attn.wk"])
        v = matmul(normed, params[f"layer{i}.attn.wv"])
        heads = []
        for h in range(config.n_heads):
            lo, hi = h * dh, (h + 1) * dh
            qs, ks, vs = (slice_cols(t, lo, hi) for t in (q, k, v))
            scores = add(mul(matmul(qs, transpose(ks)), scale), mask_t)
            heads.append(matmul(softmax(scores), vs))
        cat = heads[0]
        for head in heads[1:]:
            cat = concat_cols(cat, head)
        x = add(x, matmul(cat, params[f"layer{i}.attn.wo"]))

        ffn_in = layer_norm(x, params[f"layer{i}.ln2.gain"], params[f"layer{i}.ln2.bias"])
        up = None
        if up_fn is not None:
            up = up_fn(i, ffn_in)
        if up is None:
            up = matmul(ffn_in, params[f"layer{i}.ffn.up"])
        x = add(x, matmul(gelu(up), params[f"layer{i}.ffn.down"]))
    x = layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    return matmul(x, params["unembed"])


def next_token_loss(logits: Tensor, targets: np.ndarray, weights: np.ndarray,
                    normalize: bool = True, label_smoothing: float = 0.0) -> Tensor:
    """Weighted cross-entropy over positions.

    With ``normalize`` the result is the weighted mean; without it the raw
    weighted sum, for callers whose weights already carry the scaling.
    ``label_smoothing`` spreads that fraction of the target mass uniformly
    over the vocabulary, which caps how confident training can get.
    """
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("next_token_loss needs at least one weighted position")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    lse = row_logsumexp(logits)
    rows = np.arange(logits.data.shape[0])
    gold = pick(logits, rows, np.asarray(targets, dtype=np.int64))
    if label_smoothing > 0.0:
        vocab = logits.data.shape[1]
        row_mean = take_col(matmul(logits, Tensor(np.full((vocab, 1), 1.0 / vocab))), 0)
        gold = add(mul(gold, 1.0 - label_smoothing), mul(row_mean, label_smoothing))
    weighted = dot(sub(lse, gold), Tensor(weights))
    return mul(weighted, 1.0 / total) if normalize else weighted


# ---------------------------------------------------------------------------
# trainable model and frozen snapshot


class Model:
    """Trainable parameter set; optimization is plain SGD with momentum."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.params = {name: Tensor(arrays[name].copy(), requires_grad=True)
                       for name in param_names(config)}

    @classmethod
    def from_init(cls, config: ModelConfig, seed: int) -> "Model":
        return cls(config, init_params(config, seed))

    @classmethod
    def from_snapshot(cls, snap: "ModelSnapshot") -> "Model":
        return cls(snap.config, dict(snap.params))

    def logits(self, batch: PackedBatch, up_fn=None) -> Tensor:
        return transformer_logits(self.params, self.config, batch, up_fn)

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot(self.config,
                             {n: t.data.copy() for n, t in self.params.items()})


class ModelSnapshot:
    """Frozen base model: read-only arrays plus a content fingerprint."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        expected = param_names(config)
        if sorted(arrays) != sorted(expected):
            raise ValueError("snapshot arrays do not match the expected parameter set")
        self.config = config
        self.params = {}
        for name in expected:
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            if arr.shape != _param_shape(name, config):
                raise ValueError(f"bad shape for {name}: {arr.shape}")
            arr.flags.writeable = False
            self.params[name] = arr
        self._tensors = {n: Tensor(a) for n, a in self.params.items()}

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name in param_names(self.config):
            arr = self.params[name]
            digest.update(name.encode())
            digest.update(str(arr.shape).encode())
            digest.update(arr.astype("<f8").tobytes())
        return digest.hexdigest()

    def logits(self, batch: PackedBatch, up_fn=None) -> Tensor:
        return transformer_logits(self._tensors, self.config, batch, up_fn)


# ---------------------------------------------------------------------------
# training and decoding


@dataclass
class TrainResult:
    snapshot: "ModelSnapshot"
    loss_log: list[float] = field(default_factory=list)


def train_base(config: ModelConfig, sentences: list[list[int]], seed: int,
               steps: int = 2000, lr: float = 0.05, momentum: float = 0.9,
               batch_size: int = 16, label_smoothing: float = 0.1,
               lr_schedule: str = "constant") -> TrainResult:
    """Train from random init until the corpus is memorized (caller picks steps)."""
    if not sentences:
        raise ValueError("training corpus is empty")
    if lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {lr_schedule!r}")
    model = Model.from_init(config, seed)
    data_rng = substream(seed, "data")
    leaves = list(model.params.values())
    velocity = {id(t): np.zeros_like(t.data) for t in leaves}
    loss_log = []
    n = len(sentences)
    for step in range(steps):
        if lr_schedule == "cosine":
            # decay to a tenth of the peak rate by the final step
            frac = step / max(steps - 1, 1)
            step_lr = lr * (0.1 + 0.45 * (1.0 + math.cos(math.pi * frac)))
        else:
            step_lr = lr
        take = data_rng.choice(n, size=min(batch_size, n), replace=False)
        batch = pack_sequences([sentences[j] for j in take], config.max_seq_len)
        targets, weights = next_token_targets(batch)
        loss = next_token_loss(model.logits(batch), targets, weights,
                               label_smoothing=label_smoothing)
        backward(loss, leaves=leaves)
        for t in leaves:
            vel = velocity[id(t)]
            vel *= momentum
            vel += t.grad
            t.data -= step_lr * vel
            t.zero_grad()
        loss_log.append(loss.item())
    return TrainResult(snapshot=model.snapshot(), loss_log=loss_log)


def greedy_decode(snapshot: ModelSnapshot, prompt_ids: list[int], n_new: int,
                  up_fn=None, eos_id: int | None = None) -> list[int]:
    """Argmax continuation of the prompt; deterministic by construction.

    Stops after ``n_new`` tokens, at the model's context limit, or right
    after emitting ``eos_id`` when one is given.
    """
    if not prompt_ids:
        raise ValueError("prompt is empty")
    ids = list(prompt_ids)
    for _ in range(n_new):
        if len(ids) >= snapshot.config.max_seq_len:
            break
        batch = pack_sequences([ids], snapshot.config.max_seq_len)
        logits = snapshot.logits(batch, up_fn=up_fn)
        ids.append(int(np.argmax(logits.data[-1])))
        if eos_id is not None and ids[-1] == eos_id:
            break
    return ids[len(prompt_ids):]
