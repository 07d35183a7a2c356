import csv

import numpy as np
import pytest

from icnnmetric import tape as T
from icnnmetric.encoder import encode, encoder_init
from icnnmetric.episodes import EpisodeSpec, sample_task, split_classes, synth_gaussian, task_rng
from icnnmetric.icnn import IcnnConfig
from icnnmetric.tape import Tape
from icnnmetric import trainer
from icnnmetric.trainer import (
    ABLATION_FIELDS,
    ABLATION_ROWS,
    OptimizerConfig,
    TrainConfig,
    confidence_half_width,
    dump_embeddings,
    evaluate,
    nearest_centroid_accuracy,
    run_ablation_grid,
    task_loss,
    train,
    write_ablation_csv,
)

SMALL = dict(episode=EpisodeSpec(3, 2, 3), tasks_per_epoch=4, val_tasks=5, eval_tasks=10,
             hidden=(8,), embed_dim=4)


@pytest.fixture(scope="module")
def easy():
    return synth_gaussian(0, 6, 20, 5, 5.0, 1.0)


class TestStatistics:
    def test_zero_variance(self):
        assert confidence_half_width([1.0] * 50) == 0.0

    def test_binary_fixture(self):
        accs = np.array([0.0, 1.0] * 500)
        assert confidence_half_width(accs) == pytest.approx(1.96 * 0.5 / np.sqrt(1000), abs=1e-15)

    def test_lr_schedule(self):
        opt = OptimizerConfig(lr=0.1, lr_step=3, lr_decay=0.5)
        assert [opt.lr_at(e) for e in (0, 2, 3, 7)] == [0.1, 0.1, 0.05, 0.025]


class TestConfig:
    @pytest.mark.parametrize("weights", [{}, {"cross_entropy": -1.0}, {"icnn": 0.0}, {"mse": 1.0}])
    def test_bad_loss_combo(self, weights):
        with pytest.raises(ValueError):
            TrainConfig(loss_weights=weights)

    def test_bad_jobs(self):
        with pytest.raises(ValueError):
            TrainConfig(jobs=0)

    def test_mismatch_rejected_before_training(self, easy):
        with pytest.raises(ValueError, match="way"):
            train(easy, TrainConfig(**{**SMALL, "episode": EpisodeSpec(7, 1, 1)}))


class TestLoss:
    def test_weighted_sum_of_terms(self, easy):
        cfg = TrainConfig(**SMALL, loss_weights={"cross_entropy": 0.7, "proto_triplet": 1.3, "icnn": 0.4},
                          icnn=IcnnConfig(k_neighbors=2))
        enc = encoder_init(0, cfg.layer_dims(easy.dim))
        task = sample_task(easy, None, cfg.episode, task_rng(0, "train", 0, 0))
        total, values = task_loss(enc, task, cfg)
        expected = sum(cfg.loss_weights[k] * v for k, v in values.items())
        assert set(values) == {"cross_entropy", "proto_triplet", "icnn"}
        assert total.item() == pytest.approx(expected, abs=1e-12)

    def test_single_term_matches_standalone(self, easy):
        cfg = TrainConfig(**SMALL, loss_weights={"cross_entropy": 1.0})
        enc = encoder_init(1, cfg.layer_dims(easy.dim))
        task = sample_task(easy, None, cfg.episode, task_rng(0, "train", 0, 1))
        total, values = task_loss(enc, task, cfg)
        assert total.item() == values["cross_entropy"]

    def test_parameters_receive_gradients(self, easy):
        cfg = TrainConfig(**SMALL, loss_weights={"proto_triplet": 1.0, "icnn": 1.0},
                          icnn=IcnnConfig(k_neighbors=2))
        enc = encoder_init(2, cfg.layer_dims(easy.dim))
        task = sample_task(easy, None, cfg.episode, task_rng(0, "train", 0, 2))
        with Tape() as tp:
            params = enc.bind(tp)
            loss, _ = task_loss(enc, task, cfg, params)
        grads = T.backward(loss)
        assert all(np.isfinite(grads.wrt(p)).all() for p in params.values())
        assert np.abs(grads.wrt(params["W0"])).sum() > 0


class TestEvaluate:
    def test_perfectly_separable(self):
        ds = synth_gaussian(0, 5, 20, 4, 100.0, 0.01)
        enc = encoder_init(0, (4, 4))
        enc.weights[0] = np.eye(4)
        mean, ci, accs = evaluate(enc, ds, None, EpisodeSpec(5, 1, 5), 20, seed=0)
        assert (mean, ci) == (1.0, 0.0)
        assert len(accs) == 20

    def test_untrained_is_at_chance(self):
        ds = synth_gaussian(0, 10, 40, 8, 1e-3, 1.0)
        enc = encoder_init(0, (8, 64, 64, 32))
        mean, _, _ = evaluate(enc, ds, None, EpisodeSpec(5, 5, 15), 1000, seed=0)
        assert 0.15 <= mean <= 0.25

    def test_jobs_do_not_change_results(self, easy):
        enc = encoder_init(0, (5, 8, 4))
        a = evaluate(enc, easy, None, EpisodeSpec(3, 2, 3), 12, seed=4, jobs=1)
        b = evaluate(enc, easy, None, EpisodeSpec(3, 2, 3), 12, seed=4, jobs=3)
        assert a == b

    def test_nearest_centroid_oracle(self):
        assert nearest_centroid_accuracy(synth_gaussian(0, 4, 30, 8, 6.0, 1.0), None) > 0.95


class TestTrain:
    def test_zero_epochs_returns_initial_encoder(self, easy):
        cfg = TrainConfig(**{**SMALL, "epochs": 0})
        enc, metrics = train(easy, cfg)
        init = encoder_init(cfg.seed, cfg.layer_dims(easy.dim))
        for a, b in zip(enc.weights, init.weights):
            np.testing.assert_array_equal(a, b)
        assert metrics.epochs == [] and metrics.best_epoch == -1

    def test_deterministic(self, easy):
        cfg = TrainConfig(**SMALL, epochs=2, loss_weights={"cross_entropy": 1.0, "icnn": 1.0},
                          icnn=IcnnConfig(k_neighbors=2))
        a, b = train(easy, cfg)[1], train(easy, cfg)[1]
        assert a.to_jsonl() == b.to_jsonl()

    def test_seed_changes_run(self, easy):
        cfg = TrainConfig(**SMALL, epochs=1)
        a, b = train(easy, cfg)[1], train(easy, TrainConfig(**SMALL, epochs=1, seed=1))[1]
        assert a.to_jsonl() != b.to_jsonl()

    def test_records(self, easy):
        cfg = TrainConfig(**SMALL, epochs=3, loss_weights={"cross_entropy": 1.0, "proto_triplet": 1.0})
        metrics = train(easy, cfg)[1]
        lines = metrics.to_jsonl().splitlines()
        assert len(lines) == 4
        assert set(metrics.epochs[0]) == {"epoch", "lr", "loss", "terms", "val_acc", "val_ci"}
        assert set(metrics.epochs[0]["terms"]) == {"cross_entropy", "proto_triplet"}
        assert '"final": true' in lines[-1]
        assert "wall" not in metrics.to_jsonl()

    def test_learning_beats_untrained(self):
        ds = synth_gaussian(3, 8, 30, 16, 3.0, 1.0)
        base = dict(episode=EpisodeSpec(5, 1, 5), tasks_per_epoch=10, val_tasks=0, eval_tasks=100,
                    hidden=(32,), embed_dim=16, optimizer=OptimizerConfig(lr=3e-3))
        untrained = train(ds, TrainConfig(**base, epochs=0))[1].test_acc
        trained = train(ds, TrainConfig(**base, epochs=8,
                                        loss_weights={"cross_entropy": 1.0, "proto_triplet": 1.0}))[1].test_acc
        assert trained > untrained

    def test_split_dataset_uses_best_validation_epoch(self):
        ds = split_classes(synth_gaussian(0, 9, 12, 4, 5.0, 1.0), 0, 3, 3, 3)
        cfg = TrainConfig(**{**SMALL, "epochs": 3})
        metrics = train(ds, cfg)[1]
        vals = [r["val_acc"] for r in metrics.epochs]
        assert metrics.best_epoch == int(np.argmax(vals))

    def test_split_without_validation_keeps_last_epoch(self):
        ds = split_classes(synth_gaussian(0, 6, 12, 4, 5.0, 1.0), 0, 3, 0, 3)
        metrics = train(ds, TrainConfig(**{**SMALL, "epochs": 2}))[1]
        assert metrics.best_epoch == 1
        assert "val_acc" not in metrics.epochs[0]

    def test_embedding_dump(self, easy, tmp_path):
        cfg = TrainConfig(**SMALL)
        enc = encoder_init(0, cfg.layer_dims(easy.dim))
        n = dump_embeddings(enc, easy, cfg, tmp_path / "e.csv", n_points=40)
        with open(tmp_path / "e.csv") as fh:
            rows = list(csv.reader(fh))
        assert n == 40 and len(rows) == 41
        assert rows[0] == ["task", "role", "class", "label", "e0", "e1", "e2", "e3"]
        assert rows[1][1] == "support"
        # first row is the first support point of test task 0
        task = sample_task(easy, None, cfg.episode, task_rng(0, "test", 0, 0))
        np.testing.assert_allclose([float(v) for v in rows[1][4:]], encode(enc, task.support_x[:1]).data[0], atol=1e-14)


class TestAblation:
    def test_row_catalogue(self):
        assert len(ABLATION_ROWS) == 12
        assert [r[0] for r in ABLATION_ROWS[:8]] == ["i", "ii", "iii", "iv", "v", "vi", "vii", "viii"]

    def test_grid_records_failures(self, easy, monkeypatch, tmp_path):
        real = trainer.train

        def flaky(ds, cfg):
            if cfg.icnn.mode == "query_vs_prototypes":
                raise RuntimeError("boom")
            return real(ds, cfg)

        monkeypatch.setattr(trainer, "train", flaky)
        base = TrainConfig(**{**SMALL, "epochs": 1, "val_tasks": 0}, icnn=IcnnConfig(k_neighbors=2))
        rows = run_ablation_grid(easy, base)
        assert len(rows) == 12
        bad = [r.row for r in rows if r.status != "ok"]
        assert bad == ["v", "vi"]
        assert rows[4].status == "error: boom"
        write_ablation_csv(rows, tmp_path / "a.csv")
        with open(tmp_path / "a.csv") as fh:
            table = list(csv.DictReader(fh))
        assert len(table) == 12 and tuple(table[0]) == ABLATION_FIELDS
        assert all(r["mean_acc"] and r["ci_half_width"] for r in table)
