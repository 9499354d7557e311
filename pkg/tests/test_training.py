"""Loss, optimizer, training loop, metrics, checkpoints."""

import math

import numpy as np
import pytest

from depthact import tensor as tt
from depthact import training as tr
from depthact.errors import ContractError, FormatError, NumericError
from depthact.model import ActionModel, ModelConfig
from depthact.synthvid import GenConfig, build_dataset
from depthact.tensor import Tensor, backward

MICRO_MODEL = ModelConfig(frames=2, height=16, width=16, num_classes=2,
                          patch_size=8, backbone_dim=8, backbone_layers=2,
                          backbone_heads=2, side_dim=8, side_heads=2,
                          ssm_state=4, ssm_expand=2, ssm_blocks=1, ssm_conv=2)
MICRO_GEN = GenConfig(height=16, width=16, raw_frames=4, num_classes=2)


def micro_setup(n_per_class=4, mode="rgb_depth_mamba", seed=0):
    cfg = ModelConfig(**{**MICRO_MODEL.__dict__, "mode": mode})
    model = ActionModel(cfg, seed=seed)
    provider = tr.ClipProvider(MICRO_GEN, frames=2, stride=2)
    train_recs, val_recs = build_dataset(MICRO_GEN, n_per_class, 0.5, 3)
    return model, provider, train_recs, val_recs


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------

def test_cross_entropy_perfect_prediction():
    y = np.array([[0.0, 1.0]])
    probs = Tensor([[0.0, 1.0]])
    assert float(tr.cross_entropy(y, probs).data) == pytest.approx(0.0, abs=1e-10)


def test_cross_entropy_uniform():
    y = tr.onehot([2], 4)
    probs = Tensor(np.full((1, 4), 0.25))
    assert float(tr.cross_entropy(y, probs).data) == pytest.approx(math.log(4.0), abs=1e-12)


def test_cross_entropy_hand_value():
    y = tr.onehot([0], 2)
    loss = tr.cross_entropy(y, Tensor([[0.7, 0.3]]))
    assert float(loss.data) == pytest.approx(-math.log(0.7), abs=1e-12)


def test_cross_entropy_nonuniform_differs_from_ln_c():
    y = tr.onehot([0], 3)
    loss = float(tr.cross_entropy(y, Tensor([[0.5, 0.3, 0.2]])).data)
    assert loss > 0.0
    assert abs(loss - math.log(3.0)) > 1e-3


def test_cross_entropy_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = rng.normal(size=(4, 6))
        probs = tt.softmax(Tensor(logits))
        y = tr.onehot(rng.integers(0, 6, size=4), 6)
        assert float(tr.cross_entropy(y, probs).data) >= 0.0


def test_cross_entropy_rejects_non_onehot():
    with pytest.raises(ContractError):
        tr.cross_entropy(np.array([[0.5, 0.5]]), Tensor([[0.5, 0.5]]))
    with pytest.raises(ContractError):
        tr.cross_entropy(np.array([[1.0, 1.0]]), Tensor([[0.5, 0.5]]))


def test_cross_entropy_shape_mismatch():
    with pytest.raises(ContractError):
        tr.cross_entropy(tr.onehot([0], 3), Tensor([[0.5, 0.5]]))


def test_softmax_cross_entropy_closed_form_gradient():
    # d loss / d logits == (p - y) / B
    rng = np.random.default_rng(1)
    for _ in range(10):
        b, c = int(rng.integers(1, 8)), int(rng.integers(2, 7))
        logits = Tensor(rng.normal(scale=3.0, size=(b, c)), requires_grad=True)
        y = tr.onehot(rng.integers(0, c, size=b), c)
        probs = tt.softmax(logits)
        backward(tr.cross_entropy(y, probs))
        closed = (probs.data - y) / b
        assert np.abs(logits.grad - closed).max() < 1e-10


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

def test_adamw_zero_grad_fixed_point():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = tr.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    before = p.data.copy()
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, before)


def test_adamw_decoupled_decay():
    p = Tensor([2.0, -4.0], requires_grad=True)
    opt = tr.AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    before = p.data.copy()
    p.grad = np.zeros(2)
    opt.step()
    assert np.allclose(p.data, before * (1.0 - 0.1 * 0.5), atol=1e-15)


def test_adamw_first_step_hand_value():
    # g=1 at step 1 with tiny eps: bias correction makes the update -lr
    p = Tensor([0.0], requires_grad=True)
    opt = tr.AdamW({"p": p}, lr=0.01, eps=1e-12, weight_decay=0.0)
    p.grad = np.ones(1)
    opt.step()
    assert p.data[0] == pytest.approx(-0.01, rel=1e-9)


def test_adamw_nan_grad_aborts_without_mutation():
    p = Tensor([1.0], requires_grad=True)
    q = Tensor([2.0], requires_grad=True)
    opt = tr.AdamW({"p": p, "q": q}, lr=0.1)
    p.grad = np.array([np.nan])
    q.grad = np.array([1.0])
    with pytest.raises(NumericError):
        opt.step()
    assert p.data[0] == 1.0 and q.data[0] == 2.0
    assert opt.step_count == 0


def test_adamw_validation():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError):
        tr.AdamW({"p": p}, lr=0.0)
    with pytest.raises(ContractError):
        tr.AdamW({"p": p}, lr=0.1, betas=(1.0, 0.999))


def test_adamw_monotonic_on_convex_quadratics():
    rng = np.random.default_rng(2)
    for _ in range(20):
        # random SPD quadratic 0.5 x^T H x
        m = rng.normal(size=(2, 2))
        hess = m @ m.T + 0.5 * np.eye(2)
        x = Tensor(rng.normal(scale=2.0, size=2), requires_grad=True)
        # small enough lr that the normalized Adam step stays in the
        # monotone regime far from the minimum
        opt = tr.AdamW({"x": x}, lr=1e-3, weight_decay=0.0)
        prev = 0.5 * x.data @ hess @ x.data
        for _ in range(30):
            x.grad = hess @ x.data
            opt.step()
            cur = 0.5 * x.data @ hess @ x.data
            assert cur <= prev + 1e-12
            prev = cur


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------

def test_train_empty_dataset_rejected():
    model, provider, _, val = micro_setup()
    with pytest.raises(ContractError):
        tr.train(model, provider, [], val, tr.TrainConfig(epochs=1))


def test_train_deterministic_loss_curves():
    curves = []
    for _ in range(2):
        model, provider, train_recs, val_recs = micro_setup()
        metrics, _ = tr.train(model, provider, train_recs, val_recs,
                              tr.TrainConfig(lr=1e-3, epochs=3, batch_size=4, seed=5))
        curves.append([m.train_loss for m in metrics])
    assert curves[0] == curves[1]


def test_train_frozen_backbone_untouched():
    model, provider, train_recs, val_recs = micro_setup()
    blobs = {n: t.data.tobytes() for n, t in model.frozen_params().items()}
    tr.train(model, provider, train_recs, val_recs,
             tr.TrainConfig(lr=1e-3, epochs=2, batch_size=4))
    for n, t in model.frozen_params().items():
        assert t.data.tobytes() == blobs[n], n


def test_train_overfits_small_subset():
    model, provider, train_recs, _ = micro_setup(n_per_class=8)
    cfg = tr.TrainConfig(lr=1e-2, weight_decay=0.0, epochs=25, batch_size=8, seed=1)
    tr.train(model, provider, train_recs, [], cfg)
    rec = tr.evaluate(model, provider, train_recs, cfg)
    assert rec.top1 >= 0.99


def test_evaluate_constant_predictor_floor():
    # zero head on an rgb_only model predicts one class everywhere
    model, provider, train_recs, _ = micro_setup(mode="rgb_only")
    model.head_rgb[0].data[:] = 0.0
    rec = tr.evaluate(model, provider, train_recs, tr.TrainConfig())
    assert rec.top1 == pytest.approx(1.0 / 2.0)
    assert sorted(rec.per_class) == [0.0, 1.0]


def test_evaluate_order_invariant():
    model, provider, train_recs, _ = micro_setup()
    cfg = tr.TrainConfig(eval_batch_size=3)
    a = tr.evaluate(model, provider, train_recs, cfg)
    b = tr.evaluate(model, provider, list(reversed(train_recs)), cfg)
    assert a.top1 == b.top1
    assert a.per_class == b.per_class


def test_per_class_delta_identity():
    rec = tr.MetricsRecord(0, 0.0, 0.5, [0.4, 0.6], 0.0)
    deltas = tr.per_class_delta(rec, rec)
    assert all(d["delta"] == 0.0 for d in deltas)


def test_per_class_delta_report_format():
    # analysis-format example: 0.617 -> 0.729 reads as a +0.112 gain
    fused = tr.MetricsRecord(0, 0.0, 0.0, [0.729, 0.5], 0.0)
    base = tr.MetricsRecord(0, 0.0, 0.0, [0.617, 0.5], 0.0)
    rows = tr.per_class_delta(fused, base)
    assert rows[0]["class_id"] == 0
    assert rows[0]["delta"] == pytest.approx(0.112, abs=1e-12)
    assert [r["delta"] for r in rows] == sorted((r["delta"] for r in rows), reverse=True)


def test_per_class_delta_mismatch():
    a = tr.MetricsRecord(0, 0.0, 0.0, [0.5, 0.5], 0.0)
    b = tr.MetricsRecord(0, 0.0, 0.0, [0.5, 0.5, 0.5], 0.0)
    with pytest.raises(ContractError):
        tr.per_class_delta(a, b)


def test_train_config_validation():
    with pytest.raises(ContractError):
        tr.TrainConfig(lr=-1.0)
    with pytest.raises(ContractError):
        tr.TrainConfig(fuse_space="odds")
    with pytest.raises(ContractError):
        tr.TrainConfig(lr_schedule="warmup")


def test_fuse_space_prob_trains():
    model, provider, train_recs, val_recs = micro_setup(n_per_class=2)
    cfg = tr.TrainConfig(lr=1e-3, epochs=1, batch_size=2, fuse_space="prob")
    metrics, _ = tr.train(model, provider, train_recs, val_recs, cfg)
    assert np.isfinite(metrics[0].train_loss)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_save_load_save_identical(tmp_path):
    model, provider, train_recs, val_recs = micro_setup()
    cfg = tr.TrainConfig(lr=1e-3, epochs=1, batch_size=4)
    _, opt = tr.train(model, provider, train_recs, val_recs, cfg)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    tr.save_checkpoint(p1, model, opt, cfg, next_epoch=1)
    model2, meta, records = tr.load_checkpoint(p1)
    opt2 = tr.restore_optimizer(model2, records, cfg)
    tr.save_checkpoint(p2, model2, opt2, cfg, next_epoch=meta["next_epoch"])
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_mismatched_config(tmp_path):
    model, _, _, _ = micro_setup()
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(path, model)
    wrong = ModelConfig(**{**MICRO_MODEL.__dict__, "side_dim": 4})
    with pytest.raises(FormatError) as e:
        tr.load_checkpoint(path, wrong)
    assert "side_dim" in str(e.value)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"WRONGMAG" + b"\0" * 32)
    with pytest.raises(FormatError):
        tr.read_checkpoint(path)


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tr.TrainConfig(lr=1e-3, epochs=4, batch_size=4, seed=9)

    # uninterrupted
    model_a, provider, train_recs, val_recs = micro_setup(seed=2)
    metrics_a, opt_a = tr.train(model_a, provider, train_recs, val_recs, cfg)

    # interrupted after 2 epochs, checkpointed, resumed
    model_b, _, _, _ = micro_setup(seed=2)
    half = tr.TrainConfig(**{**cfg.__dict__, "epochs": 2})
    _, opt_b = tr.train(model_b, provider, train_recs, val_recs, half)
    path = tmp_path / "half.ckpt"
    tr.save_checkpoint(path, model_b, opt_b, cfg, next_epoch=2)
    model_c, meta, records = tr.load_checkpoint(path)
    opt_c = tr.restore_optimizer(model_c, records, cfg)
    metrics_c, _ = tr.train(model_c, provider, train_recs, val_recs, cfg,
                            optimizer=opt_c, start_epoch=meta["next_epoch"])

    for name, p in model_a.trainable_params().items():
        assert p.data.tobytes() == model_c.trainable_params()[name].data.tobytes(), name
    assert [m.train_loss for m in metrics_a[2:]] == [m.train_loss for m in metrics_c]
