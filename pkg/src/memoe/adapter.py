"""Expert-bypass adapter on one feed-forward layer of a frozen base model.

The adapter adds a bank of parallel expert matrices next to the frozen
up-projection W_0 of a single target block. A linear gate scores each token,
the scores pass through a softmax, and only the top-k probabilities survive,
unrenormalized, so the kept gate values are exactly the softmax values.
The block output becomes

    W_0 x  +  lambda * sum_e gate_e(x) * W_e x

and experts whose gate is zero are never evaluated. Experts start at zero,
so a freshly initialized adapter is a no-op on the base model.

Routing features are the token's hidden state alone ("token"), or that state
concatenated with a per-sequence summary: the mean embedding-table row of the
sequence ("sentence") or the embedding of entities found in the sequence
("anchor"). The summaries come from the frozen embedding table, so gradients
never reach them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ModelSnapshot, PackedBatch, next_token_loss
from .rng import substream
from .tensor import (
    Tensor,
    add,
    backward,
    concat_cols,
    dot,
    matmul,
    mul,
    scale_rows,
    softmax,
    take_col,
    top_k_mask,
    transpose,
)

ROUTINGS = ("token", "sentence", "anchor")

# serialized field order; "lambda" is a keyword, stored on the attribute lambda_
_CONFIG_FIELDS = [
    ("num_experts", int), ("top_k", int), ("target_layer", int),
    ("lambda", float), ("noise_scale", float), ("aux_weight", float),
    ("routing", str), ("lr", float), ("seed", int),
]


@dataclass
class MemoeConfig:
    num_experts: int = 4
    top_k: int = 1
    target_layer: int = 1
    lambda_: float = 1.0
    noise_scale: float = 0.01
    aux_weight: float = 0.01
    routing: str = "anchor"
    lr: float = 2e-4
    seed: int = 0

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be positive, got {self.num_experts}")
        if not (1 <= self.top_k <= self.num_experts):
            raise ValueError(f"top_k={self.top_k} out of range for {self.num_experts} experts")
        if self.target_layer < 1:
            raise ValueError(f"target_layer must be at least 1, got {self.target_layer}")
        if self.lambda_ < 0 or self.noise_scale < 0 or self.aux_weight < 0:
            raise ValueError("lambda, noise_scale and aux_weight must be non-negative")
        if self.routing not in ROUTINGS:
            raise ValueError(f"routing must be one of {ROUTINGS}, got {self.routing!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    def _get(self, key: str):
        return getattr(self, "lambda_" if key == "lambda" else key)

    def to_dict(self) -> dict:
        return {key: self._get(key) for key, _ in _CONFIG_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "MemoeConfig":
        known = {key for key, _ in _CONFIG_FIELDS}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, cast in _CONFIG_FIELDS:
            if key in d:
                kwargs["lambda_" if key == "lambda" else key] = cast(d[key])
        return cls(**kwargs)

    def to_kv(self) -> str:
        return "".join(f"{key}={self._get(key)}\n" for key, _ in _CONFIG_FIELDS)

    @classmethod
    def from_kv(cls, text: str) -> "MemoeConfig":
        d = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            d[key.strip()] = value.strip()
        return cls.from_dict(d)


def feature_dim(config: MemoeConfig, model_config: ModelConfig) -> int:
    return model_config.d_model if config.routing == "token" else 2 * model_config.d_model


class AdapterState:
    """Trainable gate and expert weights for one target layer."""

    def __init__(self, config: MemoeConfig, w_g: np.ndarray, experts: list[np.ndarray]):
        self.config = config
        self.w_g = Tensor(w_g.copy(), requires_grad=True)
        self.experts = [Tensor(w.copy(), requires_grad=True) for w in experts]

    @classmethod
    def init(cls, config: MemoeConfig, model_config: ModelConfig) -> "AdapterState":
        """Zero experts (adapter starts as a no-op); small Gaussian gate."""
        if not (1 <= config.target_layer < model_config.n_layers):
            raise ValueError(
                f"target_layer={config.target_layer} outside 1..{model_config.n_layers - 1}")
        rng = substream(config.seed, "adapter-init")
        w_g = rng.normal(0.0, 0.02, size=(feature_dim(config, model_config), config.num_experts))
        experts = [np.zeros((model_config.d_model, model_config.d_ff))
                   for _ in range(config.num_experts)]
        return cls(config, w_g, experts)

    def leaves(self) -> list[Tensor]:
        return [self.w_g, *self.experts]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"w_g": self.w_g.data}
        for e, t in enumerate(self.experts):
            out[f"expert{e}"] = t.data
        return out

    @classmethod
    def from_arrays(cls, config: MemoeConfig, arrays: dict[str, np.ndarray]) -> "AdapterState":
        experts = [arrays[f"expert{e}"] for e in range(config.num_experts)]
        return cls(config, arrays["w_g"], experts)

    def clone(self) -> "AdapterState":
        return AdapterState(self.config, self.w_g.data,
                            [t.data for t in self.experts])


@dataclass
class GateDecision:
    """Value-level record of one gate evaluation over a token batch."""

    gates: np.ndarray  # [T, E] softmax values with all but top-k zeroed
    probs: np.ndarray  # [T, E] full softmax before masking
    top1: np.ndarray   # [T] highest-probability expert, ties to lowest index


def _route_features(x: Tensor, routing: str, route_extra) -> Tensor:
    if routing == "token":
        return x
    if route_extra is None:
        raise ValueError(f"routing={routing!r} needs per-sequence features")
    extra = np.asarray(route_extra, dtype=np.float64)
    if extra.ndim == 1:
        extra = np.broadcast_to(extra, (x.data.shape[0], extra.shape[0])).copy()
    if extra.shape != x.data.shape:
        raise ValueError(f"route features shaped {extra.shape} do not match tokens {x.data.shape}")
    return concat_cols(x, Tensor(extra))


def gate(state: AdapterState, features: Tensor, train: bool = False,
         noise_rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, GateDecision]:
    """Per-token gate values: softmax over gate logits, then keep the top k.

    Kept entries are the softmax probabilities themselves; nothing is
    renormalized after masking. Gaussian logit noise is applied only when
    training, so evaluation routing is deterministic. Returns the masked
    gates, the pre-mask probabilities (both differentiable), and a
    value-level decision record.
    """
    logits = matmul(features, state.w_g)
    if train and state.config.noise_scale > 0:
        if noise_rng is None:
            raise ValueError("training gate needs a noise generator")
        eps = noise_rng.normal(0.0, state.config.noise_scale, size=logits.data.shape)
        logits = add(logits, Tensor(eps))
    probs = softmax(logits)
    keep = np.zeros_like(probs.data)
    for row in range(keep.shape[0]):
        keep[row] = top_k_mask(probs.data[row], state.config.top_k) != 0.0
    gates = mul(probs, Tensor(keep))
    top1 = np.argmax(probs.data, axis=1)
    return gates, probs, GateDecision(gates=gates.data, probs=probs.data, top1=top1)


def experts_apply(state: AdapterState, x: Tensor, gates: Tensor,
                  force_dense: bool = False) -> Tensor:
    """Gate-weighted sum of expert outputs, [T, d_ff].

    Experts whose gate column is all zero are skipped entirely; passing
    ``force_dense`` evaluates every expert anyway (reference path for
    equivalence checks).
    """
    out = None
    for e, w_e in enumerate(state.experts):
        col = gates.data[:, e]
        if not force_dense and not np.any(col):
            continue
        term = scale_rows(matmul(x, w_e), take_col(gates, e))
        out = term if out is None else add(out, term)
    if out is None:
        zeros = np.zeros((x.data.shape[0], state.experts[0].data.shape[1]))
        out = Tensor(zeros)
    return out


def memoe_up_fn(state: AdapterState, snapshot: ModelSnapshot, route_extra=None,
                train: bool = False, noise_rng: np.random.Generator | None = None,
                trace: list | None = None, force_dense: bool = False,
                probs_capture: list | None = None):
    """Build the up-projection override implementing the expert bypass.

    ``trace`` collects value-level gate decisions; ``probs_capture`` collects
    the differentiable pre-mask probabilities (for the balance penalty).
    """
    target = state.config.target_layer
    if not (1 <= target < snapshot.config.n_layers):
        raise ValueError(f"target_layer={target} outside 1..{snapshot.config.n_layers - 1}")
    base_up = Tensor(snapshot.params[f"layer{target}.ffn.up"])

    def up_fn(layer: int, x: Tensor):
        if layer != target:
            return None
        features = _route_features(x, state.config.routing, route_extra)
        gates, probs, decision = gate(state, features, train=train, noise_rng=noise_rng)
        if trace is not None:
            trace.append(decision)
        if probs_capture is not None:
            probs_capture.append(probs)
        contribution = experts_apply(state, x, gates, force_dense=force_dense)
        return add(matmul(x, base_up), mul(contribution, state.config.lambda_))

    return up_fn


def sentence_feature(snapshot: ModelSnapshot, ids: list[int]) -> np.ndarray:
    """Mean embedding-table row of the sequence's tokens (frozen table)."""
    if not ids:
        raise ValueError("sentence feature of an empty sequence")
    return snapshot.params["tok_emb"][np.asarray(ids, dtype=np.int64)].mean(axis=0)


def load_balance_loss(probs: Tensor, top1: np.ndarray, num_experts: int,
                      aux_weight: float) -> Tensor:
    """Utilization-spreading penalty over one token batch.

    f_e (hard top-1 share per expert) is a detached count; P_e (mean softmax
    probability per expert) carries the gradient. The scalar is
    aux_weight * E * sum_e f_e * P_e: alpha for a uniform router, growing
    toward alpha * E as routing collapses onto one expert.
    """
    n_tokens = probs.data.shape[0]
    if n_tokens == 0:
        raise ValueError("load balance loss over an empty batch")
    counts = np.bincount(top1, minlength=num_experts).astype(np.float64)
    f = counts / n_tokens
    ones = Tensor(np.ones((n_tokens, 1)))
    p_mean = mul(take_col(matmul(transpose(probs), ones), 0), 1.0 / n_tokens)
    return mul(dot(p_mean, Tensor(f)), aux_weight * num_experts)


def edit_loss(state: AdapterState, snapshot: ModelSnapshot, batch: PackedBatch,
              targets: np.ndarray, weights: np.ndarray, route_extra=None,
              train: bool = False, noise_rng: np.random.Generator | None = None,
              trace: list | None = None) -> Tensor:
    """Editing objective: weighted-sum cross-entropy plus the balance penalty.

    Position weights are expected to carry per-record scaling (one record's
    target positions each weigh 1/count), so records contribute equally and
    the batch total is the sum over records.
    """
    cfg = state.config
    local_trace: list[GateDecision] = [] if trace is None else trace
    probs_capture: list[Tensor] = []
    up_fn = memoe_up_fn(state, snapshot, route_extra=route_extra, train=train,
                        noise_rng=noise_rng, trace=local_trace,
                        probs_capture=probs_capture)
    logits = snapshot.logits(batch, up_fn=up_fn)
    loss = next_token_loss(logits, targets, weights, normalize=False)
    if cfg.aux_weight > 0:
        loss = add(loss, load_balance_loss(probs_capture[0], local_trace[0].top1,
                                           cfg.num_experts, cfg.aux_weight))
    return loss


def edit_step(state: AdapterState, snapshot: ModelSnapshot, batch: PackedBatch,
              targets: np.ndarray, weights: np.ndarray, route_extra=None,
              noise_rng: np.random.Generator | None = None) -> float:
    """One SGD step on the adapter weights; the base stays untouched.

    Fixed learning rate, no momentum.
    """
    loss = edit_loss(state, snapshot, batch, targets, weights,
                     route_extra=route_extra, train=True, noise_rng=noise_rng)
    leaves = state.leaves()
    backward(loss, leaves=leaves)
    for t in leaves:
        t.data -= state.config.lr * t.grad
        t.zero_grad()
    return loss.item()
