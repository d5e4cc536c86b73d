"""Optimizer, schedules, config plumbing, and the training loop."""

import dataclasses
import functools
import math

import numpy as np
import pytest

from microfusion import model
from microfusion.data import synth_dataset
from microfusion.errors import ConfigError, NumericalError
from microfusion.params import GradStore, pack
from microfusion.train import (
    Adam,
    EarlyStop,
    PlateauScheduler,
    TrainConfig,
    build_config,
    compute_predictions,
    evaluate,
    hyperparameter_sweep,
    load_model,
    make_client,
    read_history,
    run_ablations,
    run_cv,
    save_model,
    sweep_table,
    train,
    write_history,
)


@functools.lru_cache(maxsize=None)
def tiny_dataset():
    return synth_dataset(c=3, per_class=6, size=12, noise=0.0, seed=0)


def tiny_config(**overrides):
    base = dict(image_size=12, patch=4, d=16, heads=2, d_h=8, depth=1,
                epochs=6, batch=8, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig().validate()
        assert cfg.d == 64 and cfg.batch == 48 and cfg.lr == 1e-3
        assert cfg.epochs == 50 and cfg.heads == 4 and cfg.d_h == 16
        assert cfg.scheduler_patience == 5 and cfg.lr_factor == 0.5
        assert cfg.early_stop_patience == 10
        assert cfg.ablation == "full" and cfg.alignment_weight == 0.5
        assert cfg.k == 10 and cfg.workers == 1

    def test_rejections(self):
        bad = [dict(batch=0), dict(lr=0.0), dict(epochs=-1),
               dict(lr_factor=1.0), dict(scheduler_patience=0),
               dict(client="psychic"), dict(strategy="best"),
               dict(val_fraction=1.5), dict(ambiguous_fraction=0.0),
               dict(d=64, heads=4, d_h=8), dict(workers=0)]
        for kwargs in bad:
            with pytest.raises(ConfigError):
                TrainConfig(**kwargs).validate()

    def test_file_overrides(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[run]\nd = 32\nd_h = 8\nlr = 0.005\n"
                        "token_set = true\nablation = no-mha\n")
        cfg = build_config(file_path=str(path))
        assert cfg.d == 32 and cfg.d_h == 8 and cfg.lr == 0.005
        assert cfg.token_set is True and cfg.ablation == "no-mha"
        assert cfg.batch == 48  # untouched default

    def test_cli_beats_file(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[run]\nlr = 0.005\nbatch = 16\n")
        cfg = build_config(file_path=str(path),
                           cli_overrides={"lr": 0.01, "seed": 9})
        assert cfg.lr == 0.01      # CLI wins
        assert cfg.batch == 16     # file wins over default
        assert cfg.seed == 9

    def test_none_cli_values_ignored(self, tmp_path):
        cfg = build_config(cli_overrides={"lr": None, "d": 32, "d_h": 8})
        assert cfg.lr == 1e-3 and cfg.d == 32

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[run]\nmomentum = 0.9\n")
        with pytest.raises(ConfigError):
            build_config(file_path=str(path))
        with pytest.raises(ConfigError):
            build_config(cli_overrides={"momentum": 0.9})

    def test_wrong_section_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[training]\nlr = 0.1\n")
        with pytest.raises(ConfigError):
            build_config(file_path=str(path))

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            build_config(file_path=str(tmp_path / "absent.ini"))

    def test_bad_boolean_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[run]\ntoken_set = maybe\n")
        with pytest.raises(ConfigError):
            build_config(file_path=str(path))


@dataclasses.dataclass
class OneArray:
    w: np.ndarray


class TestAdam:
    def test_matches_reference_formulas(self):
        tree = OneArray(w=np.array([1.0, -2.0, 0.5]))
        g = np.array([0.3, -0.1, 0.7])
        opt = Adam()
        lr = 0.01
        ref_w = tree.w.copy()
        m = np.zeros(3)
        v = np.zeros(3)
        for t in range(1, 4):
            grads = GradStore()
            grads.add("w", g)
            opt.step(tree, grads, lr)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9 ** t)
            v_hat = v / (1 - 0.999 ** t)
            ref_w = ref_w - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
            assert np.allclose(tree.w, ref_w, atol=1e-15)

    def test_converges_on_quadratic(self):
        target = np.array([3.0, -1.0, 0.25, 4.0])
        tree = OneArray(w=np.zeros(4))
        opt = Adam()
        for _ in range(2000):
            grads = GradStore()
            grads.add("w", tree.w - target)
            opt.step(tree, grads, 0.05)
        assert np.abs(tree.w - target).max() < 1e-3

    def test_missing_grad_means_no_update(self):
        tree = OneArray(w=np.ones(2))
        opt = Adam()
        opt.step(tree, GradStore(), 0.1)
        assert np.array_equal(tree.w, np.ones(2))


class TestPlateauScheduler:
    def test_halves_after_exactly_five_stagnant(self):
        sched = PlateauScheduler(1e-3, patience=5, factor=0.5)
        sched.update(1.0)  # improvement over +inf
        for i in range(4):
            assert sched.update(1.0) == 1e-3, i  # stagnant 1..4: unchanged
        assert sched.update(1.0) == 5e-4  # 5th stagnant epoch halves

    def test_improvement_resets_counter(self):
        sched = PlateauScheduler(1e-3, patience=3, factor=0.5)
        sched.update(1.0)
        sched.update(1.0)
        sched.update(1.0)
        sched.update(0.5)  # reset
        sched.update(0.5)
        sched.update(0.5)
        assert sched.lr == 1e-3
        assert sched.update(0.5) == 5e-4

    def test_equal_loss_counts_as_stagnant(self):
        sched = PlateauScheduler(1.0, patience=1, factor=0.5)
        sched.update(2.0)
        assert sched.update(2.0) == 0.5

    def test_repeated_halving(self):
        sched = PlateauScheduler(1e-3, patience=2, factor=0.5)
        sched.update(1.0)
        for _ in range(4):
            sched.update(1.0)
        assert sched.lr == 2.5e-4


class TestEarlyStop:
    def test_stops_after_patience(self):
        stop = EarlyStop(patience=3)
        assert not stop.update(1.0)
        assert not stop.update(1.0)
        assert not stop.update(1.0)
        assert stop.update(1.0)

    def test_improvement_resets(self):
        stop = EarlyStop(patience=2)
        stop.update(1.0)
        stop.update(1.0)
        assert not stop.update(0.9)
        assert not stop.update(0.9)
        assert stop.update(0.9)


class CaptureClient:
    """Records every bundle and answers with a constant label."""

    def __init__(self, answer=0):
        self.answer = answer
        self.bundles = []

    def predict(self, bundle, query_label=None):
        self.bundles.append(bundle)
        return self.answer


class TestPredictions:
    def test_majority_exact_on_separable_data(self):
        ds = tiny_dataset()
        cfg = tiny_config()
        ids = ds.manifest.ids()
        train_ids = ids[::2]
        preds = compute_predictions(ds, train_ids, ids, cfg)
        labels = ds.manifest.labels_by_id()
        assert all(preds[i] == labels[i] for i in ids)

    def test_oracle_returns_truth(self):
        ds = tiny_dataset()
        cfg = tiny_config(client="oracle", strategy="random")
        ids = ds.manifest.ids()
        preds = compute_predictions(ds, ids[:12], ids, cfg)
        labels = ds.manifest.labels_by_id()
        assert all(preds[i] == labels[i] for i in ids)

    def test_demos_come_from_train_pool_only(self):
        ds = tiny_dataset()
        cfg = tiny_config()
        ids = ds.manifest.ids()
        train_ids = ids[:9]
        train_refs = {ds.manifest.by_id(i).ref for i in train_ids}
        client = CaptureClient()
        compute_predictions(ds, train_ids, ids, cfg, client=client)
        assert len(client.bundles) == len(ids)
        for bundle in client.bundles:
            for demo in bundle["demonstrations"]:
                assert demo["image_path"] in train_refs
            assert bundle["query_image_path"] not in {
                d["image_path"] for d in bundle["demonstrations"]}

    def test_ambiguous_fraction_limits_queries(self):
        ds = tiny_dataset()
        cfg = tiny_config(ambiguous_fraction=0.25, pca_k=4)
        ids = ds.manifest.ids()
        preds = compute_predictions(ds, ids, ids, cfg)
        answered = [i for i, p in preds.items() if p is not None]
        assert len(answered) == math.ceil(0.25 * len(ids))
        assert all(preds[i] is None for i in set(ids) - set(answered))

    def test_client_construction(self, tmp_path, monkeypatch):
        assert make_client(TrainConfig(client="oracle"), 3) is not None
        assert make_client(TrainConfig(client="noisy"), 3) is not None
        with pytest.raises(ConfigError):
            make_client(TrainConfig(client="replay"), 3)
        replay = tmp_path / "replies.jsonl"
        replay.write_text("")
        assert make_client(
            TrainConfig(client="replay", replay_path=str(replay)), 3)
        monkeypatch.delenv("MICROFUSION_LMM_URL", raising=False)
        monkeypatch.delenv("MICROFUSION_LMM_KEY", raising=False)
        with pytest.raises(ConfigError):
            make_client(TrainConfig(client="live"), 3)


class TestTrain:
    def test_zero_epochs_is_identity(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs=0)
        result = train(ds, cfg)
        assert result.history == []
        fresh = model.model_init(cfg.model_config(ds.manifest.c),
                                 seed=cfg.seed,
                                 transcripts=ds.transcripts)
        assert np.array_equal(pack(result.params), pack(fresh))

    def test_first_five_full_batch_steps_strictly_decrease(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs=5, batch=64)  # every epoch is one step
        result = train(ds, cfg)
        losses = [r.train_loss for r in result.history]
        assert len(losses) == 5
        assert all(a > b for a, b in zip(losses, losses[1:])), losses

    def test_history_rows(self):
        ds = tiny_dataset()
        result = train(ds, tiny_config(epochs=4))
        assert [r.epoch for r in result.history] == [1, 2, 3, 4]
        assert all(r.lr == 1e-3 for r in result.history)
        assert all(math.isfinite(r.val_loss) for r in result.history)

    def test_deterministic_across_runs(self):
        ds = tiny_dataset()
        a = train(ds, tiny_config(epochs=3))
        b = train(ds, tiny_config(epochs=3))
        assert [(r.epoch, r.train_loss, r.val_loss, r.lr)
                for r in a.history] == [(r.epoch, r.train_loss, r.val_loss,
                                         r.lr) for r in b.history]
        assert pack(a.params).tobytes() == pack(b.params).tobytes()
        c = train(ds, tiny_config(epochs=3, seed=5))
        assert a.history[-1].train_loss != c.history[-1].train_loss

    def test_converges_on_separable_data(self):
        ds = tiny_dataset()
        result = train(ds, tiny_config(epochs=10))
        report = evaluate(result, ds)
        assert report.topn[1] >= 0.95

    def test_underflow_lr_records_halving_then_stops(self):
        # An LR of 1e-300 underflows every Adam update, so parameters
        # and the validation loss are bitwise constant: epoch 1 improves
        # on +inf, epochs 2-6 stagnate (halving recorded from epoch 7),
        # and the stopper quits after ten stagnant epochs.
        ds = tiny_dataset()
        cfg = tiny_config(epochs=50, lr=1e-300)
        result = train(ds, cfg)
        assert result.stopped_early
        lrs = [r.lr for r in result.history]
        assert len(lrs) == 11
        assert lrs[:6] == [1e-300] * 6
        assert lrs[6:] == [5e-301] * 5

    def test_non_finite_loss_names_epoch_and_batch(self, monkeypatch):
        ds = tiny_dataset()
        real = model.batch_loss

        def poisoned(*args, **kwargs):
            _, store = real(*args, **kwargs)
            return float("nan"), store

        monkeypatch.setattr(model, "batch_loss", poisoned)
        with pytest.raises(NumericalError) as err:
            train(ds, tiny_config(epochs=2, batch=64))
        message = str(err.value)
        assert "epoch 1" in message and "batch 0" in message

    def test_non_finite_gradient_names_parameter_block(self, monkeypatch):
        ds = tiny_dataset()
        real = model.batch_loss

        def poisoned(*args, **kwargs):
            loss, store = real(*args, **kwargs)
            store.add("fusion.w_out",
                      np.full_like(store.get("fusion.w_out"), np.nan))
            return loss, store

        monkeypatch.setattr(model, "batch_loss", poisoned)
        with pytest.raises(NumericalError) as err:
            train(ds, tiny_config(epochs=2, batch=64))
        message = str(err.value)
        assert "epoch 1 batch 0" in message and "fusion.w_out" in message

    def test_explicit_splits_respected(self):
        ds = tiny_dataset()
        ids = ds.manifest.ids()
        result = train(ds, tiny_config(epochs=1), train_ids=ids[:12],
                       val_ids=ids[12:])
        assert result.train_ids == sorted(ids[:12])
        assert result.val_ids == sorted(ids[12:])


class TestHistoryFile:
    def test_round_trip(self, tmp_path):
        ds = tiny_dataset()
        result = train(ds, tiny_config(epochs=3))
        path = str(tmp_path / "history.csv")
        write_history(path, result.history)
        lines = open(path).read().strip().split("\n")
        assert lines[0] == "epoch,train_loss,val_loss,lr"
        assert len(lines) == 4
        back = read_history(path)
        for a, b in zip(result.history, back):
            assert a.epoch == b.epoch
            assert abs(a.train_loss - b.train_loss) < 1e-9
            assert a.lr == b.lr


class TestCheckpointIntegration:
    def test_save_load_identical_forward(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_config(epochs=2)
        result = train(ds, cfg)
        path = str(tmp_path / "model.ckpt")
        save_model(path, result, ds.manifest.c)
        loaded_cfg, mc, params = load_model(path)
        assert loaded_cfg == cfg
        assert np.array_equal(pack(result.params), pack(params))
        text = model.text_matrix(params, mc, ds.manifest.categories,
                                 ds.transcripts)
        for i in ds.manifest.ids()[:4]:
            before = model.forward_sample(
                result.params, mc, ds.images[i], text,
                result.predictions.get(i)).probs
            after = model.forward_sample(
                params, mc, ds.images[i], text,
                result.predictions.get(i)).probs
            assert np.abs(before - after).max() == 0.0


class TestCrossValidation:
    def test_structure_and_aggregate(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs=4, k=2)
        cv = run_cv(ds, cfg)
        assert len(cv.fold_reports) == 2
        for key in ("top1", "macro_f1"):
            values = [r.metric_row()[key] for r in cv.fold_reports]
            assert cv.mean[key] == pytest.approx(np.mean(values), abs=1e-15)
            assert cv.std[key] == pytest.approx(np.std(values), abs=1e-15)

    def test_folds_use_distinct_seeds(self):
        ds = tiny_dataset()
        cv = run_cv(ds, tiny_config(epochs=1, k=2))
        seeds = [r.config.seed for r in cv.fold_results]
        assert seeds[0] != seeds[1]

    def test_validation_sets_partition_dataset(self):
        ds = tiny_dataset()
        cv = run_cv(ds, tiny_config(epochs=1, k=3))
        all_val = sorted(i for r in cv.fold_results for i in r.val_ids)
        assert all_val == sorted(ds.manifest.ids())


class TestAblationsAndSweep:
    def test_four_rows_in_order(self):
        ds = tiny_dataset()
        out = run_ablations(ds, tiny_config(epochs=2))
        assert list(out) == ["full", "no-llm", "no-lmm", "no-mha"]
        for report in out.values():
            assert 0.0 <= report.topn[1] <= 1.0

    def test_single_cell_matches_standalone_run(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs=3)
        rows = hyperparameter_sweep(ds, cfg, [(16, 8)])
        assert len(rows) == 1
        direct = evaluate(train(ds, dataclasses.replace(cfg, d=16, batch=8,
                                                        d_h=8)), ds)
        assert rows[0]["top1"] == direct.topn[1]

    def test_grid_structure(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs=1)
        rows = hyperparameter_sweep(ds, cfg, [(16, 4), (32, 4)])
        assert [(r["d"], r["batch"]) for r in rows] == [(16, 4), (32, 4)]
        table = sweep_table(rows)
        lines = table.strip().split("\n")
        assert lines[0] == "(16, 4) (32, 4)"
        assert len(lines[1].split()) == 2

    def test_bad_grid_rejected(self):
        ds = tiny_dataset()
        with pytest.raises(ConfigError):
            hyperparameter_sweep(ds, tiny_config(), [])
        with pytest.raises(ConfigError):
            hyperparameter_sweep(ds, tiny_config(), [(17, 8)])
