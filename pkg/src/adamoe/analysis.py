"""Routing diagnostics: expert-usage intensity traces and balance reports.

Usage intensity for a frame is the fraction of action tokens assigned to each
expert, averaged over the equally spaced denoising steps of one inference
pass (an expert "receives" a token iff it is selected, so with top-k routing
each frame's intensities sum to k). Balance reports aggregate the same
counts plus the pre-top-k probabilities over a whole dataset pass and flag
collapse when any layer funnels more than 90% of its tokens to one expert.

Emitted CSV/SVG artifacts are byte-deterministic: floats are printed with 17
significant digits and the heatmap uses a fixed three-stop color ramp.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bench import TaskSpec, derive_seed, env_reset, env_step, observation_from_state
from .errors import ConfigError, ContractError
from .policy import Observation, PolicyModel
from .tensor import no_grad


@dataclass(frozen=True)
class IntensityTrace:
    values: np.ndarray      # [n_frames, n_experts], each row sums to top_k
    layer: int
    t_denoise: int
    top_k: int
    n_experts: int
    task_id: int
    seed: int


@dataclass(frozen=True)
class BalanceReport:
    per_layer_f: np.ndarray   # [n_layers, n_experts] selection fractions
    per_layer_p: np.ndarray   # [n_layers, n_experts] mean gating probabilities
    f: np.ndarray             # pooled over layers
    p: np.ndarray
    top_k: int
    collapse_score: float     # max over layers of max_i f_i
    collapsed: bool
    entropy: float            # entropy of pooled f / k; ln K at uniformity


def intensity_from_counts(counts: np.ndarray, n_total: int) -> np.ndarray:
    """Average per-step assignment fractions: counts is [n_steps, n_experts]."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or n_total < 1:
        raise ContractError("counts must be [n_steps, n_experts] with n_total >= 1")
    return (counts / n_total).mean(axis=0)


def _moe_layer_count(policy: PolicyModel) -> int:
    return sum(block.is_moe for block in policy.blocks)


def default_analysis_layer(policy: PolicyModel) -> int:
    n = _moe_layer_count(policy)
    if n == 0:
        raise ConfigError("policy has no MoE layers to analyze")
    return n // 2


def _denoise_decision_counts(policy: PolicyModel, obs: Observation, rng: np.random.Generator,
                             n_denoise: int) -> list[np.ndarray]:
    """Run one inference pass; returns per-step [n_layers, n_experts] counts."""
    cfg = policy.cfg
    chunk = rng.standard_normal((cfg.horizon, cfg.d_action))
    d_tau = 1.0 / n_denoise
    per_step = []
    with no_grad():
        for step in range(n_denoise):
            tau = 1.0 - step * d_tau
            v, decisions = policy.velocity(chunk, obs, tau)
            per_step.append(np.stack([
                np.bincount(d.indices.ravel(), minlength=d.n_experts) for d in decisions]))
            chunk = chunk - d_tau * v.data
    return per_step


def expert_usage_intensity(policy: PolicyModel, frames: Sequence[Observation],
                           layer: int | None = None, n_denoise: int = 10,
                           seed: int = 0, task_id: int | None = None) -> IntensityTrace:
    """Per-frame expert assignment fractions at one MoE layer.

    Each frame runs `n_denoise` equally spaced denoising steps from fresh
    seeded noise; assignments are counted among the frame's action tokens and
    averaged over steps.
    """
    n_layers = _moe_layer_count(policy)
    if layer is None:
        layer = default_analysis_layer(policy)
    if not 0 <= layer < n_layers:
        raise ConfigError(f"layer index {layer} out of range for {n_layers} MoE layers")
    if not frames:
        raise ContractError("intensity needs at least one frame")
    cfg = policy.cfg
    rows = []
    for i, obs in enumerate(frames):
        rng = np.random.default_rng(derive_seed(seed, i))
        counts = _denoise_decision_counts(policy, obs, rng, n_denoise)
        rows.append(intensity_from_counts(np.stack([c[layer] for c in counts]), cfg.horizon))
    return IntensityTrace(values=np.stack(rows), layer=layer, t_denoise=n_denoise,
                          top_k=cfg.top_k, n_experts=cfg.n_experts,
                          task_id=frames[0].task_id if task_id is None else task_id,
                          seed=seed)


def balance_report(policy: PolicyModel, frame_groups: Sequence[Sequence[Observation]],
                   n_denoise: int = 10, seed: int = 0,
                   collapse_threshold: float = 0.9) -> BalanceReport:
    """Aggregate routing statistics over a full pass of observation frames."""
    n_layers = _moe_layer_count(policy)
    if n_layers == 0:
        raise ConfigError("policy has no MoE layers to analyze")
    cfg = policy.cfg
    k = cfg.n_experts
    counts = np.zeros((n_layers, k))
    prob_sums = np.zeros((n_layers, k))
    tokens = 0
    frame_index = 0
    for group in frame_groups:
        for obs in group:
            rng = np.random.default_rng(derive_seed(seed, frame_index))
            frame_index += 1
            chunk = rng.standard_normal((cfg.horizon, cfg.d_action))
            d_tau = 1.0 / n_denoise
            with no_grad():
                for step in range(n_denoise):
                    tau = 1.0 - step * d_tau
                    v, decisions = policy.velocity(chunk, obs, tau)
                    for li, d in enumerate(decisions):
                        counts[li] += np.bincount(d.indices.ravel(), minlength=k)
                        prob_sums[li] += d.probs.data.sum(axis=0)
                    tokens += cfg.horizon
                    chunk = chunk - d_tau * v.data
    if tokens == 0:
        raise ContractError("balance report needs a non-empty dataset")
    # `tokens` counts the action tokens each layer routed
    per_layer_f = counts / tokens
    per_layer_p = prob_sums / tokens
    f = counts.sum(axis=0) / (tokens * n_layers)
    p = prob_sums.sum(axis=0) / (tokens * n_layers)
    share = f / cfg.top_k
    nonzero = share[share > 0]
    entropy = float(-(nonzero * np.log(nonzero)).sum())
    collapse_score = float(per_layer_f.max())
    return BalanceReport(per_layer_f=per_layer_f, per_layer_p=per_layer_p, f=f, p=p,
                         top_k=cfg.top_k, collapse_score=collapse_score,
                         collapsed=collapse_score > collapse_threshold, entropy=entropy)


def rollout_frames(policy: PolicyModel, spec: TaskSpec, seed: int,
                   n_denoise: int = 10, execute_horizon: int = 25) -> list[Observation]:
    """Observations visited by the policy itself in one receding-horizon episode."""
    rng = np.random.default_rng(derive_seed(seed, 0))
    state = env_reset(spec, derive_seed(seed, 0))
    frames = [observation_from_state(spec, state)]
    while not state.success and state.step < spec.max_steps:
        chunk = policy.predict_action_chunk(frames[-1], rng, n_denoise)
        for action in chunk[:execute_horizon]:
            state = env_step(spec, state, action)
            frames.append(observation_from_state(spec, state))
            if state.success or state.step >= spec.max_steps:
                break
    return frames


# --- deterministic emitters -----------------------------------------------------


def _g17(x: float) -> str:
    return f"{float(x):.17g}"


def emit_csv(obj: IntensityTrace | BalanceReport, path: str) -> None:
    """Write a trace (frame,layer,expert,intensity) or report (layer,expert,f,p)."""
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if isinstance(obj, IntensityTrace):
                fh.write("frame,layer,expert,intensity\n")
                for t in range(obj.values.shape[0]):
                    for e in range(obj.values.shape[1]):
                        fh.write(f"{t},{obj.layer},{e},{_g17(obj.values[t, e])}\n")
            else:
                fh.write("layer,expert,f,p\n")
                for li in range(obj.per_layer_f.shape[0]):
                    for e in range(obj.per_layer_f.shape[1]):
                        fh.write(f"{li},{e},{_g17(obj.per_layer_f[li, e])},"
                                 f"{_g17(obj.per_layer_p[li, e])}\n")
    except OSError as exc:
        raise OSError(f"failed writing CSV to {path}: {exc}") from exc


def parse_intensity_csv(path: str) -> np.ndarray:
    """Reconstruct the [n_frames, n_experts] value grid from an emitted CSV."""
    rows: dict[int, dict[int, float]] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "frame,layer,expert,intensity":
            raise ContractError(f"unexpected intensity CSV header: {header}")
        for line in fh:
            frame_s, _layer, expert_s, value_s = line.strip().split(",")
            rows.setdefault(int(frame_s), {})[int(expert_s)] = float(value_s)
    n_frames = len(rows)
    n_experts = len(rows[0]) if rows else 0
    grid = np.zeros((n_frames, n_experts))
    for t, cols in rows.items():
        for e, v in cols.items():
            grid[t, e] = v
    return grid


_RAMP = ((68, 1, 84), (33, 145, 140), (253, 231, 37))  # dark violet -> teal -> yellow


def _ramp_color(v: float) -> str:
    v = min(1.0, max(0.0, v))
    if v <= 0.5:
        lo, hi, t = _RAMP[0], _RAMP[1], v * 2.0
    else:
        lo, hi, t = _RAMP[1], _RAMP[2], (v - 0.5) * 2.0
    rgb = tuple(round(a + (b - a) * t) for a, b in zip(lo, hi))
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def emit_svg_heatmap(trace: IntensityTrace, path: str, cell: int = 8) -> None:
    """Frames-by-experts heatmap with a fixed ramp and embedded metadata."""
    n_frames, n_experts = trace.values.shape
    margin = 2
    width = margin * 2 + n_frames * cell
    height = margin * 2 + n_experts * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<!-- expert-usage intensity: task_id={trace.task_id} layer={trace.layer} "
        f"experts={trace.n_experts} top_k={trace.top_k} t_denoise={trace.t_denoise} "
        f"seed={trace.seed} frames={n_frames} -->",
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    for e in range(n_experts):
        for t in range(n_frames):
            color = _ramp_color(trace.values[t, e])
            parts.append(f'<rect x="{margin + t * cell}" y="{margin + e * cell}" '
                         f'width="{cell}" height="{cell}" fill="{color}"/>')
    parts.append("</svg>")
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\n".join(parts) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing SVG to {path}: {exc}") from exc
