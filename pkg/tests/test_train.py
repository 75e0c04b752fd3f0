import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure tale package importable
ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from tale import autodiff as ad  # noqa: E402
from tale import train as train_module  # noqa: E402
from tale.errors import StateError, TrainingError  # noqa: E402
from tale.model import CORE_GROUPS, ModelState, group_of, loss_components  # noqa: E402
from tale.schemas import RunConfig, SyntheticTruth  # noqa: E402
from tale.simulation import simulate_dataset  # noqa: E402
from tale.storage import LossLog, load_checkpoint, save_checkpoint  # noqa: E402
from tale.tasks import make_window_task  # noqa: E402
from tale.train import (  # noqa: E402
    AdamState,
    Trainer,
    adam_step,
    batches,
    clip_gradients,
    evaluate_losses,
    finetune,
    pretrain,
)
from tale.vocab import random_vocabulary  # noqa: E402


def small_config(**train):
    return RunConfig.model_validate({
        "time_weight": {"order": 2},
        "model": {"d": 8, "d_z": 4, "g_hidden": [8], "f_hidden": [8]},
        "loss": {"n_mc": 8},
        "train": {"pretrain_lr": 1e-2, "batch_size": 4, "pretrain_epochs": 1, **train},
    })


def sequences(n=6, n_codes=5, seed=0):
    truth = SyntheticTruth(process_kind="const_poisson", rate=3.0)
    return [s for s in simulate_dataset(truth, 2.0, n_codes, n, seed) if len(s) > 0]


def new_model(config=None, n_codes=5):
    return ModelState(random_vocabulary(n_codes, 8, 0), config or small_config(), 2)


def joint_loss(model):
    def loss_fn(seq, seed):
        _, _, joint = loss_components(model, seq, seed)
        return joint, (joint.item(),)

    return loss_fn


def test_adam_hand_computed_step():
    p = ad.parameter(np.array([1.0]))
    state = AdamState()
    adam_step({"w": p}, {"w": np.array([2.0])}, state, 0.1)
    assert state.t == 1
    assert abs(p.data[0] - 0.9) < 1e-7


def test_adam_zero_gradient_leaves_parameters():
    p = ad.parameter(np.array([1.5, -2.0]))
    state = AdamState()
    adam_step({"w": p}, {"w": np.zeros(2)}, state, 0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    assert state.t == 1


def test_adam_descends_under_constant_gradient():
    p = ad.parameter(np.array([0.0]))
    state = AdamState()
    values = []
    for _ in range(5):
        adam_step({"w": p}, {"w": np.array([1.0])}, state, 0.01)
        values.append(p.data[0])
    assert all(a > b for a, b in zip(values, values[1:]))


def test_adam_skips_frozen_and_rejects_non_finite():
    frozen = ad.parameter(np.array([1.0]))
    frozen.requires_grad = False
    adam_step({"f": frozen}, {}, AdamState(), 0.1)
    assert frozen.data[0] == 1.0

    p = ad.parameter(np.array([1.0]))
    with pytest.raises(TrainingError) as info:
        adam_step({"g_head.mlp.0.weight": p}, {"g_head.mlp.0.weight": np.array([np.nan])}, AdamState(), 0.1)
    assert info.value.group == "g_head"


def test_clip_gradients_scales_to_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(grads, 1.0) == 5.0
    np.testing.assert_allclose(grads["a"], [0.6])
    np.testing.assert_allclose(grads["b"], [0.8])
    assert clip_gradients({"a": np.array([0.1])}, None) == pytest.approx(0.1)


def test_batches_cover_items_deterministically():
    items = list(range(10))
    first = batches(items, 4, seed=1, epoch=2)
    assert [len(b) for b in first] == [4, 4, 2]
    assert sorted(sum(first, [])) == items
    assert first == batches(items, 4, seed=1, epoch=2)
    assert first != batches(items, 4, seed=1, epoch=3)


def test_single_sequence_single_epoch_is_one_step():
    model = new_model(small_config(batch_size=16))
    embeddings = model.vocab.embeddings.copy()
    result = pretrain(model, sequences()[:1])
    assert result.steps == 1
    assert model.stage == "pretrained"
    np.testing.assert_array_equal(model.vocab.embeddings, embeddings)


def test_pretraining_is_deterministic_across_threads():
    data = sequences(8)
    a, b, c = new_model(), new_model(), new_model()
    pretrain(a, data, threads=1)
    pretrain(b, data, threads=1)
    pretrain(c, data, threads=3)
    snap_a, snap_b, snap_c = a.snapshot(), b.snapshot(), c.snapshot()
    for name in snap_a:
        np.testing.assert_array_equal(snap_a[name], snap_b[name], err_msg=name)
        np.testing.assert_array_equal(snap_a[name], snap_c[name], err_msg=name)


def test_pretraining_writes_loss_log_and_checkpoint(tmp_path):
    data = sequences(8)
    model = new_model(small_config(pretrain_epochs=2))
    result = pretrain(model, data[:5], data[5:], out_dir=tmp_path)
    rows = LossLog(tmp_path / "losses.csv").rows()
    assert [(r["epoch"], r["split"]) for r in rows] == [
        ("0", "val"), ("1", "train"), ("1", "val"), ("2", "train"), ("2", "val")
    ]
    assert set(rows[0]) == {"epoch", "split", "loss_time", "loss_code", "loss_joint"}
    assert len(result.history) == 5
    loaded, optimizer = load_checkpoint(tmp_path)
    assert loaded.stage == "pretrained"
    assert optimizer["t"] == result.steps


def test_resume_from_checkpoint_matches_uninterrupted_run(tmp_path):
    data = sequences(8)
    steps = [data[i : i + 2] for i in range(0, 6, 2)] * 2
    rates = {g: 1e-2 for g in CORE_GROUPS}

    straight = new_model()
    with Trainer(straight, straight.config.train, rates) as trainer:
        for batch in steps:
            trainer.step(batch, joint_loss(straight))

    first = new_model()
    with Trainer(first, first.config.train, rates) as trainer:
        for batch in steps[:3]:
            trainer.step(batch, joint_loss(first))
        save_checkpoint(first, tmp_path / "ckpt", trainer.optimizer_state())
    resumed, optimizer = load_checkpoint(tmp_path / "ckpt")
    with Trainer(resumed, resumed.config.train, rates, optimizer_state=optimizer) as trainer:
        for batch in steps[3:]:
            trainer.step(batch, joint_loss(resumed))

    expected, got = straight.snapshot(), resumed.snapshot()
    for name in expected:
        np.testing.assert_array_equal(expected[name], got[name], err_msg=name)


def test_divergence_restores_last_good_parameters(monkeypatch, tmp_path):
    monkeypatch.setattr(ad.settings, "check_finite", False)
    real = train_module.loss_components
    calls = []

    def flaky(model, seq, seed=0, gamma_mix=None):
        calls.append(seed)
        time_part, code_part, joint = real(model, seq, seed, gamma_mix)
        if len(calls) > 1:
            joint = ad.scale(joint, float("nan"))
        return time_part, code_part, joint

    monkeypatch.setattr(train_module, "loss_components", flaky)
    model = new_model(small_config(batch_size=1))
    with pytest.raises(TrainingError):
        pretrain(model, sequences(4)[:2], out_dir=tmp_path)
    for p in model.named_parameters().values():
        assert np.all(np.isfinite(p.data))
    assert (tmp_path / "model.tck").exists()


def test_evaluate_losses_is_gradient_free():
    model = new_model()
    values = evaluate_losses(model, sequences())
    assert len(values) == 3 and all(np.isfinite(values))
    assert all(p.grad is None for p in model.named_parameters().values())


def test_finetune_requires_pretrained_model():
    examples = make_window_task(6, 5, seed=0)
    with pytest.raises(StateError):
        finetune(new_model(), examples, [], "window")


def test_finetune_freezes_projections_and_heads():
    config = small_config(finetune_epochs=2, finetune_lr_pretrained=1e-3, finetune_lr_new=1e-2)
    model = new_model(config)
    pretrain(model, sequences())
    before = model.snapshot()
    examples = make_window_task(10, 5, seed=1)
    tuned, result = finetune(model, examples[:8], examples[8:], "window")

    assert tuned.stage == "finetuned" and result.steps == 4
    assert "window" in tuned.task_heads and not model.task_heads
    after = tuned.snapshot()
    for name, value in before.items():
        if group_of(name) in ("wfn", "q_base"):
            continue
        np.testing.assert_array_equal(after[name], value, err_msg=name)
    assert not np.array_equal(after["wfn.coefficients"], before["wfn.coefficients"])
    assert not np.array_equal(after["q_base"], before["q_base"])
    # the source model is untouched
    for name, value in model.snapshot().items():
        np.testing.assert_array_equal(value, before[name])
