"""Training loop: flow-matching + balance objective, AdamW with split learning
rates, global-norm clipping, EMA shadow weights, and binary checkpoints.

Routing components (router, scale adapter, csmoe head) form their own
parameter group at `router_lr_ratio` times the base rate; everything else
uses the base rate. Both follow a cosine schedule with a short linear warmup.
Runs are bit-reproducible given a seed, and checkpoints restore the RNG so a
resumed run matches an uninterrupted one step for step.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .bench import TaskSpec, Trajectory, evaluate
from .errors import CheckpointError, ConfigError, ContractError, NumericalError
from .flow import FlowSample, make_flow_sample
from .moe import load_balance_loss
from .policy import ModelConfig, Observation, PolicyModel
from .tensor import Tensor, backward, mse

CHECKPOINT_MAGIC = b"AMOE"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 5000
    base_lr: float = 3e-4
    router_lr_ratio: float = 2.0     # router group trains twice as fast
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip_norm: float = 1.0
    ema_decay: float = 0.99
    lambda_balance: float = 0.01
    warmup_frac: float = 0.01
    seed: int = 0
    eval_with_ema: bool = True

    def __post_init__(self):
        for name in ("batch_size", "total_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("base_lr", "router_lr_ratio", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.lambda_balance < 0 or self.weight_decay < 0:
            raise ConfigError("lambda_balance and weight_decay must be >= 0")


def paper_preset() -> TrainConfig:
    """Full-scale schedule; desk runs use the smaller defaults."""
    return TrainConfig(total_steps=120_000, base_lr=2.5e-5)


def is_router_param(name: str) -> bool:
    return ".router." in name or ".adapter." in name or ".head." in name


def lr_factor(step: int, total_steps: int, warmup_frac: float) -> float:
    """Linear warmup to the peak, then cosine decay to zero."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return (step + 1) / warmup
    span = max(1, total_steps - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


class AdamW:
    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr_base: float, lr_router: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            lr = lr_router if is_router_param(name) else lr_base
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            if cfg.weight_decay:
                update = update + cfg.weight_decay * p.data
            p.data = p.data - lr * update


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm.

    Returns the pre-clip norm; raises if any gradient is non-finite.
    """
    total = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in parameter {name}")
        total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class EMA:
    """Exponential moving average of parameters; equals them at step zero."""

    def __init__(self, params: dict[str, Tensor], decay: float):
        self.decay = decay
        self.shadow = {n: p.data.copy() for n, p in params.items()}

    def update(self, params: dict[str, Tensor]) -> None:
        d = self.decay
        for name, p in params.items():
            self.shadow[name] = d * self.shadow[name] + (1 - d) * p.data


@dataclass
class Batch:
    observations: list[Observation]
    noisy: np.ndarray      # [B, H, d_action]
    taus: np.ndarray       # [B]
    targets: np.ndarray    # [B, H, d_action]


def dataset_samples(trajectories: list[Trajectory]) -> list[tuple[Observation, np.ndarray]]:
    samples = [(step.obs, step.chunk) for traj in trajectories for step in traj.steps]
    if not samples:
        raise ContractError("dataset contains no (observation, chunk) samples")
    return samples


def make_batch(samples: list[tuple[Observation, np.ndarray]], batch_size: int,
               rng: np.random.Generator, action_scale: float = 1.0) -> Batch:
    """Sample (observation, chunk) pairs and draw one flow sample per chunk.

    Chunks are divided by `action_scale` so the flow runs in the model's
    normalized action space, where the clean signal and the unit noise are
    comparable in magnitude.
    """
    idx = rng.integers(0, len(samples), size=batch_size)
    observations, noisy, taus, targets = [], [], [], []
    for i in idx:
        obs, chunk = samples[int(i)]
        fs: FlowSample = make_flow_sample(chunk / action_scale, rng)
        observations.append(obs)
        noisy.append(fs.noisy)
        taus.append(fs.tau)
        targets.append(fs.target)
    return Batch(observations=observations, noisy=np.stack(noisy),
                 taus=np.array(taus), targets=np.stack(targets))


def total_loss(model: PolicyModel, batch: Batch,
               lambda_balance: float) -> tuple[Tensor, dict, list]:
    """Flow-matching loss plus lambda * mean per-layer balance loss."""
    if not batch.observations:
        raise ContractError("empty batch")
    v, decisions = model.forward_batch(batch.noisy, batch.observations, batch.taus)
    fm = mse(v, Tensor(batch.targets))
    if not np.isfinite(fm.data):
        raise NumericalError("flow-matching loss is non-finite")
    metrics = {"loss_fm": fm.item()}
    total = fm
    balance_value = 0.0
    if decisions:
        moe_cfg = model.cfg.moe_config()
        balance = load_balance_loss(decisions[0], moe_cfg)
        for d in decisions[1:]:
            balance = balance + load_balance_loss(d, moe_cfg)
        balance = balance * (1.0 / len(decisions))
        if not np.isfinite(balance.data):
            raise NumericalError("balance loss is non-finite")
        balance_value = balance.item()
        total = total + balance * lambda_balance
    metrics["loss_balance"] = balance_value
    metrics["loss_total"] = total.item()
    return total, metrics, decisions


@dataclass
class TrainState:
    step: int
    optimizer: AdamW
    ema: EMA
    rng: np.random.Generator


def init_train_state(model: PolicyModel, cfg: TrainConfig) -> TrainState:
    params = model.named_parameters()
    return TrainState(step=0, optimizer=AdamW(params, cfg),
                      ema=EMA(params, cfg.ema_decay),
                      rng=np.random.default_rng(cfg.seed))


def train_step(model: PolicyModel, batch: Batch, state: TrainState,
               cfg: TrainConfig) -> dict:
    params = model.named_parameters()
    loss, metrics, decisions = total_loss(model, batch, cfg.lambda_balance)
    state.optimizer.zero_grad()
    backward(loss)
    grad_norm = clip_gradients(params, cfg.grad_clip_norm)
    factor = lr_factor(state.step, cfg.total_steps, cfg.warmup_frac)
    lr_base = cfg.base_lr * factor
    lr_router = lr_base * cfg.router_lr_ratio
    state.optimizer.step(lr_base, lr_router)
    state.ema.update(params)
    state.step += 1
    metrics.update(grad_norm=grad_norm, lr_base=lr_base, lr_router=lr_router)
    for layer_i, decision in enumerate(decisions):
        f = np.bincount(decision.indices.ravel(), minlength=decision.n_experts) / decision.n_tokens
        for e, value in enumerate(f):
            metrics[f"f_l{layer_i}_e{e}"] = float(value)
    return metrics


class MetricsWriter:
    """Append-only CSV; the header is fixed by the first row."""

    def __init__(self, path: str):
        self.path = path
        self._columns: list[str] | None = None

    def write(self, step: int, metrics: dict) -> None:
        row = {"step": step, **metrics}
        new = not os.path.exists(self.path)
        if self._columns is None:
            self._columns = list(row.keys())
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=self._columns, extrasaction="ignore")
            if new:
                writer.writeheader()
            writer.writerow(row)


def run_training(model: PolicyModel, trajectories: list[Trajectory], cfg: TrainConfig,
                 out_dir: str | None = None, state: TrainState | None = None,
                 stop_after_step: int | None = None) -> tuple[TrainState, list[dict]]:
    """Train until cfg.total_steps; returns the final state and per-step metrics.

    With `out_dir` set, writes metrics.csv and a final checkpoint under ckpt/.
    Passing `state` resumes from a checkpointed position; `stop_after_step`
    interrupts early while keeping the full run's learning-rate schedule.
    """
    samples = dataset_samples(trajectories)
    if state is None:
        state = init_train_state(model, cfg)
    writer = None
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "ckpt"), exist_ok=True)
        writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    limit = cfg.total_steps if stop_after_step is None else min(cfg.total_steps, stop_after_step)
    rows = []
    while state.step < limit:
        batch = make_batch(samples, cfg.batch_size, state.rng, model.cfg.action_scale)
        metrics = train_step(model, batch, state, cfg)
        rows.append(metrics)
        if writer is not None:
            writer.write(state.step, metrics)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "ckpt", "final.ckpt"), model, state)
    return state, rows


def ema_model(model: PolicyModel, state: TrainState) -> PolicyModel:
    """Fresh model carrying the EMA shadow weights (evaluation default)."""
    out = PolicyModel(model.cfg, seed=0)
    out.load_state_dict(state.ema.shadow)
    return out


# --- checkpoint format --------------------------------------------------------
#
# magic "AMOE" | u32 version | u32 header_len | header JSON (utf-8)
# then per tensor, sorted by name:
#   u32 name_len | name utf-8 | u32 rank | u32 extents... | f64 data (LE)


def config_digest(cfg: ModelConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _canonical_rng_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return (struct.pack("<I", len(raw)) + raw
            + struct.pack("<I", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape)
            + arr.tobytes())


def save_checkpoint(path: str, model: PolicyModel, state: TrainState) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "config_digest": config_digest(model.cfg),
        "model_config": asdict(model.cfg),
        "step": state.step,
        "adam_t": state.optimizer.t,
        "rng_state": _canonical_rng_state(state.rng),
        "ema_decay": state.ema.decay,
    }
    header_blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters().items():
        tensors[f"param/{name}"] = p.data
        tensors[f"adam_m/{name}"] = state.optimizer.m[name]
        tensors[f"adam_v/{name}"] = state.optimizer.v[name]
        tensors[f"ema/{name}"] = state.ema.shadow[name]
    payload = b"".join(_pack_tensor(n, tensors[n]) for n in sorted(tensors))
    blob = (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<I", len(header_blob)) + header_blob + payload)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(blob)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str, expected_config: ModelConfig | None = None):
    """Returns (ModelConfig, header dict, tensor dict). Fails loudly on a
    version, magic, or config-digest mismatch."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes in {path}")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header_len = struct.unpack("<I", _read_exact(fh, 4, "header length"))[0]
        header = json.loads(_read_exact(fh, header_len, "header"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            raw = fh.read(4)
            if not raw:
                break
            name_len = struct.unpack("<I", raw)[0]
            name = _read_exact(fh, name_len, "tensor name").decode()
            rank = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))[0]
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor shape"))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 8 * count, f"tensor {name}"), dtype="<f8")
            tensors[name] = data.reshape(shape).astype(np.float64)
    mask = header["model_config"].get("moe_layer_mask")
    header["model_config"]["moe_layer_mask"] = tuple(mask) if mask is not None else None
    cfg = ModelConfig(**header["model_config"])
    if config_digest(cfg) != header["config_digest"]:
        raise CheckpointError("checkpoint header digest does not match its own config")
    if expected_config is not None and config_digest(expected_config) != header["config_digest"]:
        raise CheckpointError("checkpoint config digest does not match the expected model config")
    return cfg, header, tensors


def restore_training(path: str, cfg: TrainConfig) -> tuple[PolicyModel, TrainState]:
    model_cfg, header, tensors = load_checkpoint(path)
    model = PolicyModel(model_cfg, seed=0)
    params = model.named_parameters()
    model.load_state_dict({n: tensors[f"param/{n}"] for n in params})
    state = init_train_state(model, cfg)
    state.step = header["step"]
    state.optimizer.t = header["adam_t"]
    params = model.named_parameters()
    state.optimizer.params = params
    state.optimizer.m = {n: tensors[f"adam_m/{n}"].copy() for n in params}
    state.optimizer.v = {n: tensors[f"adam_v/{n}"].copy() for n in params}
    state.ema.shadow = {n: tensors[f"ema/{n}"].copy() for n in params}
    state.rng.bit_generator.state = header["rng_state"]
    return model, state


def policy_for_eval(model: PolicyModel, state: TrainState, cfg: TrainConfig) -> PolicyModel:
    return ema_model(model, state) if cfg.eval_with_ema else model


# --- experiment grid -------------------------------------------------------------


def run_experiment(cells: list[dict], trajectories: list[Trajectory],
                   specs: list[TaskSpec], model_base: dict, train_base: dict,
                   out_dir: str, trials: int = 20,
                   eval_seed: int = 1234) -> list[dict]:
    """Train and evaluate every grid cell; per-cell failures are recorded and
    the grid continues. Writes results.csv and results.json under out_dir.

    Cell keys: variant, and optionally n_experts, top_k, lambda_balance, seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, cell in enumerate(cells):
        row = {"variant": cell.get("variant", "adamoe"),
               "n_experts": cell.get("n_experts", model_base.get("n_experts", 4)),
               "top_k": cell.get("top_k", model_base.get("top_k", 1)),
               "lambda_balance": cell.get("lambda_balance", train_base.get("lambda_balance", 0.01)),
               "seed": cell.get("seed", 0)}
        try:
            model_kwargs = {**model_base,
                            "variant": row["variant"],
                            "n_experts": row["n_experts"],
                            "top_k": row["top_k"]}
            model = PolicyModel(ModelConfig(**model_kwargs), seed=row["seed"])
            cfg = TrainConfig(**{**train_base,
                                 "lambda_balance": row["lambda_balance"],
                                 "seed": row["seed"]})
            state, _ = run_training(model, trajectories, cfg,
                                    out_dir=os.path.join(out_dir, f"cell{i:03d}"))
            policy = policy_for_eval(model, state, cfg)
            rates = []
            for spec in specs:
                result = evaluate(policy, spec, trials=trials, seed=eval_seed)
                row[spec.name] = result.rate
                row[f"{spec.name}_ci"] = f"{result.ci_low:.3f}-{result.ci_high:.3f}"
                rates.append(result.rate)
            row["average"] = sum(rates) / len(rates)
        except Exception as exc:  # keep the grid going, record the failure
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(os.path.join(out_dir, "results.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    with open(os.path.join(out_dir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rows
