import math

import numpy as np
import pytest

from asr_robust_ser import numkernel as nk
from asr_robust_ser import trainer as T
from asr_robust_ser.fusion import TECHNIQUES
from asr_robust_ser.numkernel import CounterRNG, DimensionError, Tensor


def separable(n=200, dim=8, seed=0):
    """Two classes split by the sign of a fixed direction, with a clear margin."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    samples = []
    for i in range(n):
        label = i % 2
        x = rng.normal(size=(1, dim))
        x -= (x @ direction)[:, None] * direction
        x += (1.5 + rng.uniform()) * (1 if label else -1) * direction
        samples.append(T.Sample(x, None, label))
    return samples


# ---------------------------------------------------------------- backbone


def test_parameter_count():
    assert T.BackboneParams.init(CounterRNG(0), 768, 4).count() == 100_564
    assert T.TextOnlyModel(CounterRNG(0), 768, 4).backbone.count() == 768 * 128 + 128 + 128 * 16 + 16 + 16 * 4 + 4


def test_zero_input_zero_bias_gives_zero_logits():
    p = T.BackboneParams.init(CounterRNG(1), 6, 4)
    for dense in (p.dense1, p.dense2, p.head):
        dense.bias._assign(np.zeros_like(dense.bias.data))
    assert np.array_equal(T.backbone_forward(Tensor(np.zeros(6)), p).data, np.zeros(4))


def test_backbone_dim_mismatch():
    p = T.BackboneParams.init(CounterRNG(1), 6, 4)
    with pytest.raises(DimensionError):
        T.backbone_forward(Tensor(np.zeros(5)), p)


def relu_safe_input(p, rng, n=3):
    """Inputs whose hidden pre-activations stay away from the ReLU kink."""
    while True:
        x = rng.normal(size=(n, p.in_dim))
        h1 = x @ p.dense1.weight.data + p.dense1.bias.data
        h2 = np.maximum(h1, 0) @ p.dense2.weight.data + p.dense2.bias.data
        if np.min(np.abs(h1)) > 1e-3 and np.min(np.abs(h2)) > 1e-3:
            return x


@pytest.mark.parametrize("kind,out_dim", [("classification", 4), ("regression", 3)])
def test_backbone_loss_gradients(rng, kind, out_dim):
    p = T.BackboneParams.init(CounterRNG(2), 5, out_dim, hidden=(7, 6))
    x = relu_safe_input(p, rng)
    labels = rng.integers(0, out_dim, 3) if kind == "classification" else rng.normal(size=(3, out_dim))

    def f(x, *params):
        b = T.BackboneParams(T.Dense(*params[0:2]), T.Dense(*params[2:4]), T.Dense(*params[4:6]))
        return T.loss(T.backbone_forward(x, b), labels, kind)

    assert nk.finite_diff_check(f, [Tensor(x)] + p.parameters()) < 1e-4


# ---------------------------------------------------------------- losses


def test_uniform_logits_cross_entropy():
    assert T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-15)


def test_losses_match_direct_formulas(rng):
    for _ in range(20):
        logits = rng.normal(size=(5, 4)) * 3
        labels = rng.integers(0, 4, 5)
        direct = -np.mean([logits[i, y] - math.log(sum(math.exp(v) for v in logits[i])) for i, y in enumerate(labels)])
        assert abs(T.cross_entropy(Tensor(logits), labels).item() - direct) < 1e-12
        out, target = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        direct = sum(sum((a - b) ** 2 for a, b in zip(r, t)) for r, t in zip(out, target)) / 5
        assert abs(T.mse(Tensor(out), target).item() - direct) < 1e-12
    assert T.mse(Tensor(np.ones((2, 3))), np.ones((2, 3))).item() == 0.0


def test_loss_shape_errors():
    with pytest.raises(DimensionError):
        T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1])
    with pytest.raises(DimensionError):
        T.mse(Tensor(np.zeros((3, 2))), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        T.loss(Tensor(np.zeros((1, 2))), [0], "ranking")


# ---------------------------------------------------------------- optimizers


def test_adamw_hand_computed_step():
    w = nk.parameter([1.0])
    state = T.OptimizerState(lr=0.1)
    T.adamw_step([w], {w: np.array([1.0])}, state)
    # decay: 1 - 0.1 * 1e-5; moments after one step bias-correct to m=1, v=1
    expected = (1.0 - 0.1 * 1e-5) - 0.1 * 1.0 / (math.sqrt(1.0) + 1e-8)
    assert abs(w.data[0] - expected) < 1e-15
    assert state.step == 1


def test_zero_grad_zero_decay_is_a_no_op():
    w = nk.parameter([0.3, -2.0])
    T.adamw_step([w], {w: np.zeros(2)}, T.OptimizerState(lr=0.1, weight_decay=0.0))
    assert np.array_equal(w.data, [0.3, -2.0])


def test_decay_alone_is_multiplicative_shrink():
    w = nk.parameter([0.3, -2.0])
    T.adamw_step([w], {w: np.zeros(2)}, T.OptimizerState(lr=0.1, weight_decay=0.01))
    assert np.allclose(w.data, np.array([0.3, -2.0]) * (1 - 0.1 * 0.01), rtol=0, atol=1e-16)


def test_adamw_without_decay_is_adam_bit_for_bit(rng):
    shapes = [(3, 4), (4,), (2, 2)]
    a = [nk.parameter(rng.normal(size=s)) for s in shapes]
    b = [nk.parameter(p.data.copy()) for p in a]
    sa, sb = T.OptimizerState(lr=0.01, weight_decay=0.0), T.OptimizerState(lr=0.01, weight_decay=0.0)
    for _ in range(100):
        grads = [rng.normal(size=s) for s in shapes]
        T.adamw_step(a, dict(zip(a, grads)), sa)
        T.adam_step(b, dict(zip(b, grads)), sb)
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y.data)


# ---------------------------------------------------------------- splits


def test_kfold():
    folds = T.kfold_split(10, 5, seed=3)
    assert [len(f) for f in folds] == [2] * 5
    assert sorted(np.concatenate(folds).tolist()) == list(range(10))
    assert all(np.array_equal(x, y) for x, y in zip(folds, T.kfold_split(10, 5, seed=3)))
    sizes = [len(f) for f in T.kfold_split(23, 5, seed=0)]
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == 23
    with pytest.raises(ValueError):
        T.kfold_split(3, 5)


def test_holdout():
    fit, test = T.holdout_split(50, 0.2, seed=1)
    assert len(test) == 10 and not set(fit) & set(test)
    assert sorted(np.concatenate([fit, test]).tolist()) == list(range(50))


# ---------------------------------------------------------------- training


def test_lr_zero_leaves_parameters_unchanged():
    samples = separable(40)
    model = T.TextOnlyModel(CounterRNG(0), 8, 2)
    before = [p.data.copy() for p in model.parameters()]
    res = T.train(samples, model, T.TrainConfig(lr=0.0, epochs=3, weight_decay=1e-5))
    assert all(np.array_equal(b, p.data) for b, p in zip(before, model.parameters()))
    losses = [h["loss"] for h in res.history]
    assert max(losses) - min(losses) < 1e-12


def test_training_is_deterministic():
    samples = separable(100)

    def run():
        model = T.TextOnlyModel(CounterRNG(4), 8, 2)
        return T.train(samples, model, T.TrainConfig(epochs=5, seed=9)), model

    (r1, m1), (r2, m2) = run(), run()
    assert [h["loss"] for h in r1.history] == [h["loss"] for h in r2.history]
    assert all(np.array_equal(a.data, b.data) for a, b in zip(m1.parameters(), m2.parameters()))


def test_separable_task_is_learned():
    samples = separable()
    model = T.TextOnlyModel(CounterRNG(0), 8, 2)
    res = T.train(samples, model, T.TrainConfig(epochs=50))
    preds = T.predict(model, samples).argmax(axis=1)
    assert np.mean(preds == [s.label for s in samples]) >= 0.99
    res = T.train(samples, model, T.TrainConfig(epochs=50, seed=1))
    assert res.history[-1]["loss"] < 0.1


def test_empty_training_set():
    with pytest.raises(T.TrainingError):
        T.train([], T.TextOnlyModel(CounterRNG(0), 8, 2), T.TrainConfig(epochs=1))


def test_nan_loss_aborts():
    samples = [T.Sample(np.full((1, 4), np.nan), None, 0)]
    with pytest.raises(T.TrainingError, match="non-finite"):
        T.train(samples, T.TextOnlyModel(CounterRNG(0), 4, 2), T.TrainConfig(epochs=1))


@pytest.mark.parametrize("technique", TECHNIQUES)
def test_every_technique_trains_on_padded_batches(rng, technique):
    samples = [
        T.Sample(rng.normal(size=(int(rng.integers(2, 5)), 6)), rng.normal(size=(int(rng.integers(2, 6)), 5)), i % 3)
        for i in range(12)
    ]
    model = T.build_model(technique, CounterRNG(0), 6, 5, 3, d=8, heads=2, sub_dim=4)
    res = T.train(samples, model, T.TrainConfig(epochs=2, batch_size=5), record_gates=True)
    assert len(res.history) == 2
    assert T.predict(model, samples).shape == (12, 3)
    assert bool(res.gate_trace) == (technique == "modality_gated")


def test_regression_vad_training(rng):
    samples = [T.Sample(rng.normal(size=(3, 4)), None, rng.uniform(1, 7, 3)) for _ in range(20)]
    model = T.TextOnlyModel(CounterRNG(0), 4, 3)
    res = T.train(samples, model, T.TrainConfig(epochs=30, lr=5e-3), kind="regression")
    assert res.history[-1]["loss"] < res.history[0]["loss"]


def test_text_only_has_no_audio_requirement():
    with pytest.raises(ValueError):
        T.build_model("early", CounterRNG(0), 4, None, 2)


def test_checkpoint_round_trip(tmp_path):
    model = T.build_model("modality_gated", CounterRNG(0), 6, 5, 4, d=8, heads=2)
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(path, model, {"technique": "modality_gated"})
    raw = path.read_bytes()
    assert raw[:8] == b"ASRSERCK"
    values, meta = T.load_checkpoint(path)
    assert meta == {"technique": "modality_gated"}
    other = T.build_model("modality_gated", CounterRNG(99), 6, 5, 4, d=8, heads=2)
    T.restore(other, values)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(model.parameters(), other.parameters()))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError):
        T.load_checkpoint(bad)
