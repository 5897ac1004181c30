import statistics

import numpy as np
import pytest

from dfil import trainer as tr
from dfil.datasets import Task, TaskSequence, preset_stream
from dfil.numkernel import NumericError
from dfil.trainer import (AdamState, ConfigError, TrainConfig, adam_step, make_batches, run, run_baseline,
                          run_dfil)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = [np.array([1.0, -2.0])]
        state = AdamState([np.array([0.4, 0.2])], [np.array([0.1, 0.3])], t=3)
        adam_step(p, [np.zeros(2)], state, 1e-3)
        np.testing.assert_allclose(p[0], [1.0, -2.0] - 1e-3 * (0.9 * np.array([0.4, 0.2]) / (1 - 0.9 ** 4))
                                   / (np.sqrt(0.999 * np.array([0.1, 0.3]) / (1 - 0.999 ** 4)) + 1e-8))
        np.testing.assert_allclose(state.m[0], [0.36, 0.18])
        np.testing.assert_allclose(state.v[0], [0.0999, 0.2997])

    def test_zero_gradient_from_fresh_state(self):
        p = [np.array([1.0, -2.0])]
        adam_step(p, [np.zeros(2)], AdamState.fresh(p), 1e-3)
        assert p[0].tolist() == [1.0, -2.0]

    def test_first_step_hand_formula(self):
        g = np.array([0.3, -2.0, 1e-9])
        p = [np.zeros(3)]
        adam_step(p, [g], AdamState.fresh(p), 5e-4)
        np.testing.assert_allclose(p[0], -5e-4 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_constant_gradient_step_tends_to_lr(self):
        p = [np.zeros(1)]
        state = AdamState.fresh(p)
        for _ in range(3000):
            before = p[0].copy()
            adam_step(p, [np.array([0.7])], state, 1e-3)
        assert abs(before[0] - p[0][0]) == pytest.approx(1e-3, rel=1e-6)

    def test_non_finite_gradient(self):
        p = [np.zeros(2)]
        with pytest.raises(NumericError):
            adam_step(p, [np.array([np.nan, 0.0])], AdamState.fresh(p), 1e-3)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs_per_task, c.batch_size, c.learning_rate, c.K) == (20, 32, 5e-4, 40)
        assert (c.weights.alpha, c.weights.beta, c.weights.gamma) == (1.0, 1.0, 1.0)
        assert (c.weights.kd_temperature, c.weights.scl_temperature) == (20.0, 0.1)

    def test_lr_schedule(self):
        c = TrainConfig()
        assert [c.lr_at(e) for e in (0, 4, 5, 9, 10, 19)] == [5e-4, 5e-4, 2.5e-4, 2.5e-4, 1.25e-4, 6.25e-5]

    @pytest.mark.parametrize("bad", [{"batch_size": 1}, {"epochs_per_task": 0}, {"learning_rate": 0},
                                     {"method": "ewc"}, {"K": 6}, {"replay_strategy": "best"}, {"nope": 1}])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)

    def test_dict_round_trip(self):
        c = TrainConfig(method="lwf", seed=3, weights={"alpha": 0.5})
        assert TrainConfig.from_dict(c.to_dict()) == c


class TestBatches:
    def test_singleton_tail_merged(self):
        labels = np.array([0, 1] * 5)
        batches = make_batches(np.arange(9), labels, 4)
        assert [len(b) for b in batches] == [4, 5]

    def test_single_class_tail_merged(self):
        labels = np.array([0, 1, 0, 1, 1, 1])
        batches = make_batches(np.arange(6), labels, 4)
        assert [len(b) for b in batches] == [6]

    def test_mixed_tail_kept(self):
        labels = np.array([0, 1, 0, 1, 0, 1])
        assert [len(b) for b in make_batches(np.arange(6), labels, 4)] == [4, 2]


def small_cfg(**kw):
    kw.setdefault("epochs_per_task", 4)
    return TrainConfig(**kw)


def af(record):
    return record.final()[1]


class TestProtocols:
    def test_single_task_dfil(self, four_domain):
        seq = TaskSequence(four_domain.tasks[:1])
        rec = run_dfil(seq, small_cfg(seed=1))
        assert rec.replay_sizes == [40]
        assert all(r["kd"] is None and r["fd"] is None and r["scl"] is not None for r in rec.losses)
        assert all(r["total"] == pytest.approx(r["ce"] + r["scl"], rel=1e-13) for r in rec.losses)
        assert list(rec.matrix.rows) == [1]

    def test_repeated_domain_keeps_accuracy(self, four_domain):
        t = four_domain[0]
        seq = TaskSequence([t, Task("again", t.train, t.test)])
        rec = run_dfil(seq, TrainConfig(seed=2))
        assert rec.matrix[2, 1] >= rec.matrix[1, 1] - 2.0

    def test_offline_equals_finetune_on_one_task(self, four_domain):
        seq = TaskSequence(four_domain.tasks[:1])
        ft = run_baseline(seq, small_cfg(method="finetune", seed=4))
        ol = run_baseline(seq, small_cfg(method="offline", seed=4))
        assert ft.checkpoints[1].fingerprint() == ol.checkpoints[1].fingerprint()

    def test_offline_records_final_row_only(self, four_domain):
        rec = run(four_domain, small_cfg(method="offline", epochs_per_task=2))
        assert list(rec.matrix.rows) == [4]
        assert rec.final()[1] is None

    def test_finetune_forgets(self, four_domain):
        rec = run(four_domain, TrainConfig(method="finetune", seed=7))
        assert af(rec) > 0

    def test_replay_reduces_forgetting(self, four_domain):
        ft = run(four_domain, TrainConfig(method="finetune", seed=7))
        er = run(four_domain, TrainConfig(method="er", seed=7))
        assert af(er) <= af(ft)
        assert er.replay_sizes == [40, 80, 120, 160]
        assert {e.criterion for es in er.replay.values() for e in es} == {"random"}

    def test_no_shift_means_little_forgetting(self):
        seq = preset_stream("same-fake", 7)
        rec = run(seq, TrainConfig(method="finetune", seed=7))
        assert abs(af(rec)) <= 3.0

    def test_lwf_uses_only_ce_and_kd(self, four_domain):
        rec = run(TaskSequence(four_domain.tasks[:2]), small_cfg(method="lwf", epochs_per_task=1))
        task2 = [r for r in rec.losses if r["task"] == 2]
        assert all(r["kd"] is not None and r["fd"] is None and r["scl"] is None for r in task2)
        assert rec.replay_sizes == [0, 0]

    def test_ablation_without_replay(self, four_domain):
        rec = run(four_domain, small_cfg(use_replay=False, epochs_per_task=1))
        assert rec.replay_sizes == [0, 0, 0, 0] and not rec.replay


class TestInvariants:
    def test_reproducible(self, four_domain):
        seq = TaskSequence(four_domain.tasks[:2])
        a = run(seq, small_cfg(seed=11))
        b = run(seq, small_cfg(seed=11))
        assert a.matrix == b.matrix
        assert a.losses == b.losses
        assert [m.fingerprint() for m in a.checkpoints.values()] == [m.fingerprint() for m in b.checkpoints.values()]

    def test_teacher_frozen_and_replay_growth(self, four_domain):
        seen: dict[int, set] = {}

        def hook(task, epoch, batch, student, teacher):
            if teacher is not None:
                seen.setdefault(task, set()).add(teacher.fingerprint())
            else:
                assert task == 1

        rec = run_dfil(four_domain, small_cfg(epochs_per_task=2), hook)
        assert sorted(seen) == [2, 3, 4]
        assert all(len(v) == 1 for v in seen.values())
        assert len(set().union(*seen.values())) == 3
        assert rec.replay_sizes == [40 * i for i in range(1, 5)]

    def test_lr_reset_per_task(self, four_domain, monkeypatch):
        lrs = []
        real = tr.adam_step

        def spy(params, grads, state, lr, *a):
            lrs.append(lr)
            return real(params, grads, state, lr, *a)

        monkeypatch.setattr(tr, "adam_step", spy)
        cfg = TrainConfig(epochs_per_task=6, lr_decay_every=5)
        rec = run(TaskSequence(four_domain.tasks[:2]), cfg)
        per_task = {}
        for row, lr in zip(rec.losses, lrs):
            per_task.setdefault((row["task"], row["epoch"]), set()).add(lr)
        for (task, epoch), vals in per_task.items():
            assert vals == {cfg.lr_at(epoch)}
        assert per_task[(2, 0)] == {5e-4}

    def test_optimizer_state_reset_by_default(self, four_domain, monkeypatch):
        steps = []
        real = tr.adam_step
        monkeypatch.setattr(tr, "adam_step", lambda p, g, s, lr, *a: (steps.append(s.t), real(p, g, s, lr, *a))[1])
        run(TaskSequence(four_domain.tasks[:2]), small_cfg(method="finetune", epochs_per_task=1))
        assert steps.count(0) == 2
        steps.clear()
        run(TaskSequence(four_domain.tasks[:2]),
            small_cfg(method="finetune", epochs_per_task=1, carry_optimizer_state=True))
        assert steps.count(0) == 1

    def test_loss_trend_by_lr_stage(self):
        good = total = 0
        for seed in range(3):
            rec = run(preset_stream("four-domain", seed), TrainConfig(seed=seed))
            for task in range(1, 5):
                e = rec.epoch_losses(task)
                stages = [statistics.fmean(e[k:k + 5]) for k in range(0, len(e), 5)]
                total += 1
                good += all(b <= a for a, b in zip(stages, stages[1:]))
        assert good / total >= 0.9

    def test_numeric_abort_reports_location(self, four_domain, monkeypatch):
        def boom(*a, **k):
            raise NumericError("injected")
        monkeypatch.setattr(tr, "adam_step", boom)
        with pytest.raises(tr.TrainingAborted) as info:
            run(four_domain, small_cfg())
        assert info.value.diagnostics["task"] == 1 and info.value.diagnostics["batch"] == 0
