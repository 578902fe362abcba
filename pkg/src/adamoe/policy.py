"""Velocity-field policy: observation encoder + transformer with MoE feedforwards.

The sequence is [state token, scene token, task token, H action tokens]; all
tokens attend to all tokens. Feedforward sublayers route only the action
tokens through the expert mixture; observation tokens always take the shared
expert path. The noise level tau enters as a sinusoidal feature projected
and added to every action token.

Forward passes are batched internally ([B, T, d_model]) for training speed;
the single-observation `velocity` contract wraps batch size one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, RegistryError
from .flow import IntegrationConfig, integrate
from .moe import ExpertFFN, Linear, MoEConfig, MoELayer, RoutingDecision, moe_forward, upcycle_from_dense
from .tensor import (
    Tensor,
    bmm,
    concat,
    gather_rows,
    matmul,
    no_grad,
    reshape,
    rms_norm,
    scatter_add_rows,
    softmax,
    transpose,
)

VARIANTS = ("dense", "vanilla", "csmoe", "adamoe")
N_OBS_TOKENS = 3  # state, scene, task


@dataclass(frozen=True)
class Observation:
    """Toy stand-in for the multi-modal observation: proprioception, object
    layout, and a task label replacing the language instruction."""

    state: np.ndarray    # [d_state]: effector x, y, gripper opening
    scene: np.ndarray    # [d_scene]: object and goal positions, zero-padded
    task_id: int

    def __post_init__(self):
        object.__setattr__(self, "state", np.asarray(self.state, dtype=np.float64))
        object.__setattr__(self, "scene", np.asarray(self.scene, dtype=np.float64))
        coords = np.concatenate([self.state, self.scene])
        if np.abs(coords).max(initial=0.0) > 1.0 + 1e-9:
            raise ContractError("observation coordinates fall outside the [-1, 1] workspace")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_ff: int = 256
    n_layers: int = 4
    n_heads: int = 4
    horizon: int = 50
    d_action: int = 3
    d_state: int = 3
    d_scene: int = 8
    n_tasks: int = 3
    tau_dim: int = 16
    # environment delta that maps to 1.0 in the model's normalized action space
    action_scale: float = 0.1
    variant: str = "adamoe"
    n_experts: int = 4
    top_k: int = 1
    alpha: float = 1.0
    # which transformer layers get the MoE substitution; None means all
    moe_layer_mask: tuple[bool, ...] | None = None

    def __post_init__(self):
        for name in ("d_model", "d_ff", "n_layers", "n_heads", "horizon",
                     "d_action", "d_state", "d_scene", "n_tasks", "tau_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.tau_dim % 2 != 0:
            raise ConfigError("tau_dim must be even (sin/cos pairs)")
        if self.d_scene % 2 != 0:
            raise ConfigError("d_scene must be even (x, y pairs)")
        if self.action_scale <= 0:
            raise ConfigError("action_scale must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.moe_layer_mask is not None and len(self.moe_layer_mask) != self.n_layers:
            raise ConfigError("moe_layer_mask length must equal n_layers")

    def moe_config(self) -> MoEConfig:
        if self.variant == "dense":
            raise ConfigError("dense variant has no MoE configuration")
        return MoEConfig(n_experts=self.n_experts, top_k=self.top_k,
                         d_model=self.d_model, d_ff=self.d_ff,
                         variant=self.variant, alpha=self.alpha)

    def layer_mask(self) -> tuple[bool, ...]:
        if self.variant == "dense":
            return (False,) * self.n_layers
        if self.moe_layer_mask is None:
            return (True,) * self.n_layers
        return tuple(bool(b) for b in self.moe_layer_mask)


class _Block:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, use_moe: bool, index: int):
        d = cfg.d_model
        std = d ** -0.5
        self.wq = Tensor(rng.normal(0, std, size=(d, d)), requires_grad=True)
        self.wk = Tensor(rng.normal(0, std, size=(d, d)), requires_grad=True)
        self.wv = Tensor(rng.normal(0, std, size=(d, d)), requires_grad=True)
        self.wo = Tensor(rng.normal(0, std, size=(d, d)), requires_grad=True)
        self.norm1 = Tensor(np.ones(d), requires_grad=True)
        self.norm2 = Tensor(np.ones(d), requires_grad=True)
        if use_moe:
            self.ffn: MoELayer | ExpertFFN = MoELayer(cfg.moe_config(), rng, name=f"block{index}")
        else:
            self.ffn = ExpertFFN(cfg.d_model, cfg.d_ff, rng)

    @property
    def is_moe(self) -> bool:
        return isinstance(self.ffn, MoELayer)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}.attn.wq": self.wq, f"{prefix}.attn.wk": self.wk,
                  f"{prefix}.attn.wv": self.wv, f"{prefix}.attn.wo": self.wo,
                  f"{prefix}.norm1": self.norm1, f"{prefix}.norm2": self.norm2}
        params.update(self.ffn.named_parameters(f"{prefix}.ffn."))
        return params


class PolicyModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.state_w = Tensor(rng.normal(0, cfg.d_state ** -0.5, size=(cfg.d_state, d)), requires_grad=True)
        self.state_b = Tensor(np.zeros(d), requires_grad=True)
        # the scene token sees absolute slots plus slots relative to the effector
        self.scene_w = Tensor(rng.normal(0, (2 * cfg.d_scene) ** -0.5, size=(2 * cfg.d_scene, d)), requires_grad=True)
        self.scene_b = Tensor(np.zeros(d), requires_grad=True)
        self.task_embed = Tensor(rng.normal(0, 0.5, size=(cfg.n_tasks, d)), requires_grad=True)
        self.act_w = Tensor(rng.normal(0, cfg.d_action ** -0.5, size=(cfg.d_action, d)), requires_grad=True)
        self.act_b = Tensor(np.zeros(d), requires_grad=True)
        self.tau_w = Tensor(rng.normal(0, cfg.tau_dim ** -0.5, size=(cfg.tau_dim, d)), requires_grad=True)
        self.blocks = [_Block(cfg, rng, use_moe, i)
                       for i, use_moe in enumerate(cfg.layer_mask())]
        self.final_norm = Tensor(np.ones(d), requires_grad=True)
        self.out_w = Tensor(rng.normal(0, d ** -0.5, size=(d, cfg.d_action)), requires_grad=True)
        self.out_b = Tensor(np.zeros(cfg.d_action), requires_grad=True)
        # fixed log-spaced frequencies for the tau embedding
        self._tau_freqs = np.exp(np.linspace(0.0, np.log(100.0), cfg.tau_dim // 2))

    # --- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params = {"state_proj.w": self.state_w, "state_proj.b": self.state_b,
                  "scene_proj.w": self.scene_w, "scene_proj.b": self.scene_b,
                  "task_embed": self.task_embed,
                  "act_proj.w": self.act_w, "act_proj.b": self.act_b,
                  "tau_proj.w": self.tau_w}
        for i, block in enumerate(self.blocks):
            params.update(block.named_parameters(f"block{i}"))
        params["final_norm"] = self.final_norm
        params["out_proj.w"] = self.out_w
        params["out_proj.b"] = self.out_b
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"parameter {name} shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()

    # --- forward -------------------------------------------------------------

    def _tau_features(self, taus: np.ndarray) -> np.ndarray:
        angles = taus[:, None] * self._tau_freqs[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    def _validate_obs(self, obs: Observation) -> None:
        cfg = self.cfg
        if not 0 <= obs.task_id < cfg.n_tasks:
            raise RegistryError(f"task_id {obs.task_id} outside registry [0, {cfg.n_tasks})")
        if obs.state.shape != (cfg.d_state,):
            raise ConfigError(f"state shape {obs.state.shape} != ({cfg.d_state},)")
        if obs.scene.shape != (cfg.d_scene,):
            raise ConfigError(f"scene shape {obs.scene.shape} != ({cfg.d_scene},)")

    def _encode_batch(self, observations: list[Observation]) -> Tensor:
        for obs in observations:
            self._validate_obs(obs)
        states = np.stack([o.state for o in observations])
        scenes = np.stack([o.scene for o in observations])
        task_ids = np.array([o.task_id for o in observations], dtype=np.int64)
        b = len(observations)
        d = self.cfg.d_model
        # relative coordinates (scene point minus effector) spare the attention
        # stack from having to compute goal/object offsets itself
        effector = np.tile(states[:, :2], self.cfg.d_scene // 2)
        scene_in = Tensor(np.concatenate([scenes, scenes - effector], axis=1))
        state_tok = reshape(matmul(Tensor(states), self.state_w) + self.state_b, (b, 1, d))
        scene_tok = reshape(matmul(scene_in, self.scene_w) + self.scene_b, (b, 1, d))
        task_tok = reshape(gather_rows(self.task_embed, task_ids), (b, 1, d))
        return concat([state_tok, scene_tok, task_tok], axis=1)

    def encode_observation(self, obs: Observation) -> Tensor:
        """Deterministic [3, d_model] token block for one observation."""
        return reshape(self._encode_batch([obs]), (N_OBS_TOKENS, self.cfg.d_model))

    def _attention(self, block: _Block, x: Tensor, b: int, t: int) -> Tensor:
        cfg = self.cfg
        nh, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        flat = reshape(x, (b * t, cfg.d_model))
        q = transpose(reshape(matmul(flat, block.wq), (b, t, nh, dh)), (0, 2, 1, 3))
        k = transpose(reshape(matmul(flat, block.wk), (b, t, nh, dh)), (0, 2, 1, 3))
        v = transpose(reshape(matmul(flat, block.wv), (b, t, nh, dh)), (0, 2, 1, 3))
        scores = bmm(q, transpose(k, (0, 1, 3, 2))) * (dh ** -0.5)
        ctx = bmm(softmax(scores, axis=-1), v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b * t, cfg.d_model))
        return reshape(matmul(ctx, block.wo), (b, t, cfg.d_model))

    def forward_batch(self, noisy: np.ndarray, observations: list[Observation],
                      taus: np.ndarray) -> tuple[Tensor, list[RoutingDecision]]:
        """Velocity prediction for a batch; returns one routing decision per
        MoE layer covering the batch's pooled action tokens."""
        cfg = self.cfg
        noisy = np.asarray(noisy, dtype=np.float64)
        taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
        b = len(observations)
        h = cfg.horizon
        if noisy.shape != (b, h, cfg.d_action):
            raise ConfigError(f"noisy chunk shape {noisy.shape} != ({b}, {h}, {cfg.d_action})")
        if taus.shape != (b,):
            raise ConfigError(f"taus shape {taus.shape} != ({b},)")

        obs_tok = self._encode_batch(observations)
        act_flat = matmul(Tensor(noisy.reshape(b * h, cfg.d_action)), self.act_w) + self.act_b
        tau_feats = np.repeat(self._tau_features(taus), h, axis=0)  # [b*h, tau_dim]
        act_flat = act_flat + matmul(Tensor(tau_feats), self.tau_w)
        x = concat([obs_tok, reshape(act_flat, (b, h, cfg.d_model))], axis=1)

        t = N_OBS_TOKENS + h
        token_grid = np.arange(b * t).reshape(b, t)
        obs_idx = token_grid[:, :N_OBS_TOKENS].ravel()
        act_idx = token_grid[:, N_OBS_TOKENS:].ravel()

        decisions: list[RoutingDecision] = []
        for block in self.blocks:
            x = x + self._attention(block, rms_norm(x, block.norm1), b, t)
            normed = reshape(rms_norm(x, block.norm2), (b * t, cfg.d_model))
            if block.is_moe:
                y_act, decision = moe_forward(gather_rows(normed, act_idx), block.ffn)
                decisions.append(decision)
                y_obs = block.ffn.shared(gather_rows(normed, obs_idx))
                ffn_out = scatter_add_rows(y_act, act_idx, b * t) + scatter_add_rows(y_obs, obs_idx, b * t)
            else:
                ffn_out = block.ffn(normed)
            x = x + reshape(ffn_out, (b, t, cfg.d_model))

        final = reshape(rms_norm(x, self.final_norm), (b * t, cfg.d_model))
        act_out = gather_rows(final, act_idx)
        v = matmul(act_out, self.out_w) + self.out_b
        return reshape(v, (b, h, cfg.d_action)), decisions

    def velocity(self, noisy: np.ndarray, obs: Observation,
                 tau: float) -> tuple[Tensor, list[RoutingDecision]]:
        """Velocity for one observation; output is [horizon, d_action]."""
        v, decisions = self.forward_batch(np.asarray(noisy)[None], [obs], np.array([tau]))
        return reshape(v, (self.cfg.horizon, self.cfg.d_action)), decisions

    def predict_action_chunk(self, obs: Observation, rng: np.random.Generator,
                             n_steps: int = 10) -> np.ndarray:
        """Draw a noise chunk, Euler-integrate the learned field to tau=0, and
        map the normalized result back to environment deltas."""
        start = rng.standard_normal((self.cfg.horizon, self.cfg.d_action))

        def field(chunk, observation, tau):
            with no_grad():
                return self.velocity(chunk, observation, tau)[0].data

        return integrate(field, obs, start, IntegrationConfig(n_steps)) * self.cfg.action_scale


def upcycle_model(dense: PolicyModel, cfg: ModelConfig, seed: int = 0) -> PolicyModel:
    """Clone a dense policy into an MoE policy by copying every feedforward.

    The non-FFN weights transfer verbatim; each substituted layer's shared
    and routed experts all start as copies of the dense feedforward.
    """
    src = dense.cfg
    if cfg.variant == "dense":
        raise ConfigError("upcycle target must be an MoE variant")
    mismatches = [name for name in ("d_model", "d_ff", "n_layers", "n_heads", "horizon",
                                    "d_action", "d_state", "d_scene", "n_tasks", "tau_dim")
                  if getattr(src, name) != getattr(cfg, name)]
    if src.variant != "dense":
        raise ConfigError(f"upcycle source must be dense, got {src.variant}")
    if mismatches:
        diff = ", ".join(f"{m}: {getattr(src, m)} -> {getattr(cfg, m)}" for m in mismatches)
        raise ConfigError(f"upcycle dimension mismatch ({diff})")

    model = PolicyModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    dense_params = dense.named_parameters()
    for name, p in model.named_parameters().items():
        if ".ffn." not in name:
            p.data = dense_params[name].data.copy()
    for i, block in enumerate(model.blocks):
        source_ffn = dense.blocks[i].ffn
        if block.is_moe:
            block.ffn = upcycle_from_dense(source_ffn, cfg.moe_config(), rng, name=f"block{i}")
        else:
            block.ffn = source_ffn.clone()
    return model
