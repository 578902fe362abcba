"""Shared + routed expert feedforward layer with three routing variants.

All variants share one selection rule: softmax the router logits over the K
routed experts and keep the top-k probabilities (ties broken toward the
lowest expert index, no renormalization). They differ only in how the final
per-expert weights are produced:

- vanilla: the selected softmax probabilities themselves
- adamoe:  selected softmax probability + a scale-adapter logit, so the
           weight can move freely without disturbing which experts win
- csmoe:   a head reads [token features, router softmax] concatenated and
           emits raw weights directly

The shared expert is always active and ungated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericalError
from .tensor import (
    Tensor,
    concat,
    gather_rows,
    matmul,
    scale_rows,
    scatter_add_rows,
    silu,
    softmax,
    take_per_row,
)

VARIANTS = ("vanilla", "csmoe", "adamoe")


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int          # K routed experts
    top_k: int              # k active per token
    d_model: int
    d_ff: int
    variant: str = "adamoe"
    alpha: float = 1.0      # inner coefficient of the balance loss

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k must satisfy 1 <= k <= K, got k={self.top_k}, K={self.n_experts}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")


class ExpertFFN:
    """Two-layer feedforward block: down_proj(silu(up_proj(x)))."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator | None = None):
        if rng is None:
            self.up = Tensor(np.zeros((d_model, d_ff)), requires_grad=True)
            self.down = Tensor(np.zeros((d_ff, d_model)), requires_grad=True)
        else:
            self.up = Tensor(rng.normal(0.0, d_model ** -0.5, size=(d_model, d_ff)), requires_grad=True)
            self.down = Tensor(rng.normal(0.0, d_ff ** -0.5, size=(d_ff, d_model)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(silu(matmul(x, self.up)), self.down)

    def clone(self) -> "ExpertFFN":
        out = ExpertFFN(self.up.shape[0], self.up.shape[1])
        out.up = Tensor(self.up.data.copy(), requires_grad=True)
        out.down = Tensor(self.down.data.copy(), requires_grad=True)
        return out

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.up": self.up, f"{prefix}.down": self.down}


class Linear:
    """Affine map used for the router, scale adapter and csmoe head."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None, std: float = 0.02):
        if rng is None:  # zero init: scale adapter and csmoe head start silent
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, std, size=(d_in, d_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


@dataclass(frozen=True)
class RoutingDecision:
    """Per-token routing outcome: which experts won and with what weight.

    `probs` is the full pre-top-k softmax (sums to one per token) and is the
    only gradient path the balance loss uses; `weights` aligns with `indices`
    and is what the forward mixture applies.
    """

    indices: np.ndarray   # [T, k] int64, distinct per row
    weights: Tensor       # [T, k]
    probs: Tensor         # [T, K]

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]


def _top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated probabilities: ties go to the lowest index
    return np.argsort(-probs, axis=1, kind="stable")[:, :k]


class MoELayer:
    """K routed experts plus one always-on shared expert."""

    def __init__(self, cfg: MoEConfig, rng: np.random.Generator, name: str = "moe"):
        self.cfg = cfg
        self.name = name
        self.shared = ExpertFFN(cfg.d_model, cfg.d_ff, rng)
        self.experts = [ExpertFFN(cfg.d_model, cfg.d_ff, rng) for _ in range(cfg.n_experts)]
        self.router = Linear(cfg.d_model, cfg.n_experts, rng, std=0.02)
        self.adapter = Linear(cfg.d_model, cfg.n_experts) if cfg.variant == "adamoe" else None
        self.head = Linear(cfg.d_model + cfg.n_experts, cfg.n_experts) if cfg.variant == "csmoe" else None

    def route(self, x: Tensor) -> RoutingDecision:
        if self.cfg.variant == "vanilla":
            return route_vanilla(x, self)
        if self.cfg.variant == "adamoe":
            return route_adamoe(x, self)
        return route_csmoe(x, self)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = self.shared.named_parameters(f"{prefix}shared")
        for i, expert in enumerate(self.experts):
            params.update(expert.named_parameters(f"{prefix}expert{i}"))
        params.update(self.router.named_parameters(f"{prefix}router"))
        if self.adapter is not None:
            params.update(self.adapter.named_parameters(f"{prefix}adapter"))
        if self.head is not None:
            params.update(self.head.named_parameters(f"{prefix}head"))
        return params


def _selection(x: Tensor, layer: MoELayer) -> tuple[np.ndarray, Tensor]:
    probs = softmax(layer.router(x), axis=-1)
    idx = _top_k_indices(probs.data, layer.cfg.top_k)
    return idx, probs


def route_vanilla(x: Tensor, layer: MoELayer) -> RoutingDecision:
    """Coupled routing: the selected softmax probability is the weight."""
    idx, probs = _selection(x, layer)
    return RoutingDecision(idx, take_per_row(probs, idx), probs)


def route_adamoe(x: Tensor, layer: MoELayer) -> RoutingDecision:
    """Decoupled routing: weight = adapter logit + selected softmax probability.

    Selection stays a function of the router alone; the adapter only shifts
    the contribution of the experts that already won, so its output is an
    unconstrained real and the mixture weight may go negative.
    """
    if layer.adapter is None:
        raise ConfigError(f"layer {layer.name} has no scale adapter (variant {layer.cfg.variant})")
    idx, probs = _selection(x, layer)
    weights = take_per_row(probs, idx) + take_per_row(layer.adapter(x), idx)
    return RoutingDecision(idx, weights, probs)


def route_csmoe(x: Tensor, layer: MoELayer) -> RoutingDecision:
    """Concatenation routing: a head over [x, softmax] emits raw weights."""
    if layer.head is None:
        raise ConfigError(f"layer {layer.name} has no csmoe head (variant {layer.cfg.variant})")
    idx, probs = _selection(x, layer)
    head_out = layer.head(concat([x, probs], axis=-1))
    return RoutingDecision(idx, take_per_row(head_out, idx), probs)


def moe_forward(x: Tensor, layer: MoELayer) -> tuple[Tensor, RoutingDecision]:
    """shared(x) + sum over selected experts of w_i(x) * expert_i(x)."""
    decision = layer.route(x)
    y = layer.shared(x)
    n_tokens = x.shape[0]
    k = layer.cfg.top_k
    flat_weights = decision.weights.reshape((n_tokens * k,))
    for e in range(layer.cfg.n_experts):
        token_pos, slot_pos = np.nonzero(decision.indices == e)
        if token_pos.size == 0:
            continue
        out = layer.experts[e](gather_rows(x, token_pos))
        if not np.isfinite(out.data).all():
            raise NumericalError(f"non-finite output from expert {e} of layer {layer.name}")
        w = gather_rows(flat_weights, token_pos * k + slot_pos)
        y = y + scatter_add_rows(scale_rows(out, w), token_pos, n_tokens)
    return y, decision


def load_balance_loss(decision: RoutingDecision, cfg: MoEConfig) -> Tensor:
    """alpha * K * sum_i f_i * P_i.

    f_i is the hard selection fraction (gradient-blocked by construction);
    P_i is the mean pre-top-k probability and carries the gradient.
    """
    if decision.n_tokens < 1:
        raise ContractError("load_balance_loss needs at least one routed token")
    k_count = cfg.n_experts
    f = np.bincount(decision.indices.ravel(), minlength=k_count) / decision.n_tokens
    mean_probs = decision.probs.mean(axis=0)
    return (mean_probs * Tensor(f)).sum() * (cfg.alpha * k_count)


def expert_load_stats(decision: RoutingDecision) -> tuple[np.ndarray, np.ndarray]:
    """Per-expert (selection fraction f_i, mean gating probability P_i)."""
    if decision.n_tokens < 1:
        raise ContractError("expert_load_stats needs at least one routed token")
    f = np.bincount(decision.indices.ravel(), minlength=decision.n_experts) / decision.n_tokens
    return f, decision.probs.data.mean(axis=0)


def upcycle_from_dense(dense: ExpertFFN, cfg: MoEConfig, rng: np.random.Generator,
                       name: str = "moe") -> MoELayer:
    """Build a MoE layer whose shared and routed experts all copy `dense`.

    The router starts near-uniform (small gaussian), the adapter and csmoe
    head start at zero, so training begins from the coupled baseline.
    """
    if dense.up.shape != (cfg.d_model, cfg.d_ff):
        raise ConfigError(
            f"dense feedforward shape {dense.up.shape} does not match config "
            f"(d_model={cfg.d_model}, d_ff={cfg.d_ff})")
    layer = MoELayer(cfg, rng, name=name)
    layer.shared = dense.clone()
    layer.experts = [dense.clone() for _ in range(cfg.n_experts)]
    return layer
