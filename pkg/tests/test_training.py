import numpy as np
import pytest

from adamoe.bench import generate_dataset, load_dataset, resolve_tasks
from adamoe.errors import CheckpointError, ConfigError, NumericalError
from adamoe.policy import ModelConfig, PolicyModel
from adamoe.tensor import Tensor
from adamoe.train import (
    EMA,
    AdamW,
    MetricsWriter,
    TrainConfig,
    clip_gradients,
    config_digest,
    dataset_samples,
    ema_model,
    init_train_state,
    is_router_param,
    load_checkpoint,
    lr_factor,
    make_batch,
    paper_preset,
    restore_training,
    run_experiment,
    run_training,
    save_checkpoint,
    total_loss,
    train_step,
)

TINY = dict(d_model=8, d_ff=16, n_layers=2, n_heads=2, horizon=4, d_action=3,
            d_state=3, d_scene=8, n_tasks=3, tau_dim=4)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "train.jsonl"
    generate_dataset(resolve_tasks(["reach"]), per_task=4, seed=5,
                     out_path=str(path), horizon=4)
    return load_dataset(str(path))


def tiny_model(variant="adamoe", seed=0):
    return PolicyModel(ModelConfig(variant=variant, n_experts=2, top_k=1, **TINY), seed=seed)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(ema_decay=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    assert paper_preset().total_steps == 120_000
    assert paper_preset().base_lr == 2.5e-5


def test_router_param_grouping():
    model = tiny_model()
    names = model.named_parameters()
    router_names = {n for n in names if is_router_param(n)}
    assert any(".router." in n for n in router_names)
    assert any(".adapter." in n for n in router_names)
    assert "out_proj.w" not in router_names


def test_adamw_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW({"p": p}, TrainConfig(weight_decay=0.0))
    p.grad = np.zeros(2)
    opt.step(1e-2, 2e-2)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_matches_hand_recurrence_three_steps():
    cfg = TrainConfig(base_lr=0.1, beta1=0.9, beta2=0.95, adam_eps=1e-8)
    p = Tensor(np.array(2.0), requires_grad=True)
    opt = AdamW({"p": p}, cfg)
    grads = [0.5, -1.25, 3.0]

    # independent oracle: the textbook recurrence iterated by hand
    theta, m, v = 2.0, 0.0, 0.0
    lr = 0.1
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        m_hat = m / (1 - 0.9 ** t)
        v_hat = v / (1 - 0.95 ** t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)

    for g in grads:
        p.grad = np.array(g)
        opt.step(lr, lr)
    np.testing.assert_allclose(p.data, theta, atol=1e-15)


def test_two_group_learning_rate_probe():
    # equal unit gradients at step 1: router parameters move exactly twice as far
    model = tiny_model()
    params = model.named_parameters()
    before = {n: p.data.copy() for n, p in params.items()}
    opt = AdamW(params, TrainConfig())
    for p in params.values():
        p.grad = np.ones_like(p.data)
    opt.step(1e-3, 2e-3)
    base_delta = np.abs(params["out_proj.w"].data - before["out_proj.w"]).max()
    router_delta = np.abs(params["block0.ffn.router.w"].data - before["block0.ffn.router.w"]).max()
    np.testing.assert_allclose(router_delta / base_delta, 2.0, rtol=1e-12)


def test_clip_scales_norm_10_to_1():
    p = Tensor(np.zeros(4), requires_grad=True)
    p.grad = np.array([10.0, 0.0, 0.0, 0.0])
    norm = clip_gradients({"p": p}, 1.0)
    assert abs(norm - 10.0) <= 1e-12
    np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0, atol=1e-12)


def test_clip_noop_when_small():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([0.3, 0.4])
    norm = clip_gradients({"p": p}, 1.0)
    assert abs(norm - 0.5) <= 1e-12
    np.testing.assert_array_equal(p.grad, [0.3, 0.4])


def test_clip_rejects_nonfinite_with_name():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericalError, match="offending"):
        clip_gradients({"offending": p}, 1.0)


def test_ema_equals_params_at_step_zero_then_contracts():
    model = tiny_model()
    params = model.named_parameters()
    ema = EMA(params, decay=0.9)
    for n, p in params.items():
        np.testing.assert_array_equal(ema.shadow[n], p.data)
    params["out_proj.w"].data = params["out_proj.w"].data + 1.0
    gaps = []
    for _ in range(5):
        ema.update(params)
        gaps.append(np.abs(ema.shadow["out_proj.w"] - params["out_proj.w"].data).max())
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    np.testing.assert_allclose(gaps[-1] / gaps[-2], 0.9, rtol=1e-9)


def test_lr_schedule_warmup_then_cosine():
    total = 1000
    assert lr_factor(0, total, 0.01) == 0.1  # 1 / warmup(10)
    assert lr_factor(9, total, 0.01) == 1.0  # end of warmup
    assert lr_factor(10, total, 0.01) == 1.0  # cosine starts at the peak
    assert lr_factor(11, total, 0.01) < 1.0
    assert lr_factor(999, total, 0.01) < 0.01
    values = [lr_factor(s, total, 0.01) for s in range(10, total)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_total_loss_lambda_zero_is_flow_loss(tiny_dataset):
    model = tiny_model()
    batch = make_batch(dataset_samples(tiny_dataset), 4, np.random.default_rng(0))
    loss, metrics, _ = total_loss(model, batch, 0.0)
    assert metrics["loss_total"] == metrics["loss_fm"]
    assert abs(loss.item() - metrics["loss_fm"]) <= 1e-12


def test_total_loss_terms_sum(tiny_dataset):
    model = tiny_model()
    batch = make_batch(dataset_samples(tiny_dataset), 4, np.random.default_rng(1))
    loss, metrics, _ = total_loss(model, batch, 0.01)
    assert abs(metrics["loss_fm"] + 0.01 * metrics["loss_balance"] - metrics["loss_total"]) <= 1e-12


def test_total_loss_perfect_prediction_uniform_routing(tiny_dataset):
    # targets set to the model's own output and exactly uniform router probs:
    # the flow term vanishes and the balance term is alpha = 1 per layer
    model = tiny_model()
    for block in model.blocks:
        block.ffn.router.w.data[:] = 0.0
        block.ffn.router.b.data[:] = 0.0
    batch = make_batch(dataset_samples(tiny_dataset), 4, np.random.default_rng(2))
    v, _ = model.forward_batch(batch.noisy, batch.observations, batch.taus)
    batch.targets = v.data.copy()
    loss, metrics, _ = total_loss(model, batch, 0.01)
    assert metrics["loss_fm"] == 0.0
    assert abs(loss.item() - 0.01) <= 1e-15


def test_train_step_metrics_and_progress(tiny_dataset):
    model = tiny_model()
    cfg = TrainConfig(batch_size=4, total_steps=10, seed=0)
    state = init_train_state(model, cfg)
    batch = make_batch(dataset_samples(tiny_dataset), 4, state.rng)
    metrics = train_step(model, batch, state, cfg)
    assert state.step == 1
    for key in ("loss_total", "loss_fm", "loss_balance", "grad_norm", "lr_base", "lr_router"):
        assert key in metrics
    assert "f_l0_e0" in metrics and "f_l1_e1" in metrics
    assert metrics["lr_router"] == 2 * metrics["lr_base"]


def test_training_deterministic_bit_exact(tiny_dataset):
    losses = []
    for _ in range(2):
        model = tiny_model(seed=3)
        cfg = TrainConfig(batch_size=4, total_steps=6, seed=7)
        _, rows = run_training(model, tiny_dataset, cfg)
        losses.append([r["loss_total"] for r in rows])
    assert losses[0] == losses[1]


def test_metrics_csv_rows(tiny_dataset, tmp_path):
    model = tiny_model(seed=4)
    cfg = TrainConfig(batch_size=4, total_steps=10, seed=8)
    run_training(model, tiny_dataset, cfg, out_dir=str(tmp_path / "run"))
    lines = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
    assert len(lines) == 11  # header + one row per step
    assert lines[0].startswith("step,loss_fm,loss_balance,loss_total,grad_norm,lr_base,lr_router")


def test_checkpoint_save_load_save_byte_identical(tiny_dataset, tmp_path):
    model = tiny_model(seed=5)
    cfg = TrainConfig(batch_size=4, total_steps=3, seed=9)
    state, _ = run_training(model, tiny_dataset, cfg)
    p1 = tmp_path / "a.ckpt"
    save_checkpoint(str(p1), model, state)
    model2, state2 = restore_training(str(p1), cfg)
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(str(p2), model2, state2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_corrupt_magic(tmp_path):
    model = tiny_model(seed=6)
    cfg = TrainConfig(batch_size=4, total_steps=1, seed=10)
    state = init_train_state(model, cfg)
    path = tmp_path / "c.ckpt"
    save_checkpoint(str(path), model, state)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(path))


def test_checkpoint_digest_mismatch_is_error(tmp_path):
    model = tiny_model(seed=7)
    cfg = TrainConfig(batch_size=4, total_steps=1, seed=11)
    state = init_train_state(model, cfg)
    path = tmp_path / "d.ckpt"
    save_checkpoint(str(path), model, state)
    other_cfg = ModelConfig(variant="vanilla", n_experts=2, top_k=1, **TINY)
    assert config_digest(other_cfg) != config_digest(model.cfg)
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(str(path), expected_config=other_cfg)


def test_resume_matches_uninterrupted_run(tiny_dataset, tmp_path):
    cfg = TrainConfig(batch_size=4, total_steps=10, seed=12)
    model_a = tiny_model(seed=8)
    _, rows_a = run_training(model_a, tiny_dataset, cfg)

    model_b = tiny_model(seed=8)
    state_b, rows_b1 = run_training(model_b, tiny_dataset, cfg, stop_after_step=5)
    path = tmp_path / "mid.ckpt"
    save_checkpoint(str(path), model_b, state_b)

    model_c, state_c = restore_training(str(path), cfg)
    _, rows_b2 = run_training(model_c, tiny_dataset, cfg, state=state_c)

    full = [r["loss_total"] for r in rows_a]
    stitched = [r["loss_total"] for r in rows_b1 + rows_b2]
    assert full == stitched


def test_ema_model_uses_shadow_weights(tiny_dataset):
    model = tiny_model(seed=9)
    cfg = TrainConfig(batch_size=4, total_steps=5, seed=13)
    state, _ = run_training(model, tiny_dataset, cfg)
    shadow = ema_model(model, state)
    name = "out_proj.w"
    np.testing.assert_array_equal(shadow.named_parameters()[name].data, state.ema.shadow[name])
    assert not np.array_equal(shadow.named_parameters()[name].data,
                              model.named_parameters()[name].data)


def test_run_experiment_single_cell_and_layout(tiny_dataset, tmp_path):
    specs = resolve_tasks(["reach"])
    rows = run_experiment(
        [{"variant": "dense", "seed": 0}],
        tiny_dataset, specs,
        model_base=dict(TINY), train_base=dict(batch_size=4, total_steps=3),
        out_dir=str(tmp_path / "grid"), trials=2)
    assert len(rows) == 1
    assert rows[0]["variant"] == "dense"
    assert "reach" in rows[0] and "average" in rows[0]
    assert abs(rows[0]["average"] - rows[0]["reach"]) <= 1e-12
    assert (tmp_path / "grid" / "results.csv").exists()
    assert (tmp_path / "grid" / "results.json").exists()


def test_run_experiment_records_cell_failures(tiny_dataset, tmp_path):
    rows = run_experiment(
        [{"variant": "vanilla", "n_experts": 2, "top_k": 5, "seed": 0}],
        tiny_dataset, resolve_tasks(["reach"]),
        model_base=dict(TINY), train_base=dict(batch_size=4, total_steps=2),
        out_dir=str(tmp_path / "grid2"), trials=1)
    assert "error" in rows[0]
