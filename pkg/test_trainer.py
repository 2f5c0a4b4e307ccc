"""
Pruebas de checkpoints, del bucle de entrenamiento y de la partición en pliegues
"""
import math

import numpy as np
import pytest

from core.errors import CheckpointError, DataError, DivergenceError
from models import TrainConfig
from services.checkpoint_service import Checkpoint, checkpoint_service
from services.inference_service import inference_service
from services.metrics_service import metrics_service
from services.network_service import build_generator
from services.trainer_service import METRICS_HEADER, TrainingState, checkpoint_name, trainer_service
from services.volume_service import Volume, volume_service


def sample_checkpoint():
    tensors = {
        "G.w": np.arange(6, dtype=np.float32).reshape(2, 3),
        "G.b": np.array([0.5, -1.25, 3.0, 7.0]),
        "D.s": np.array(2.0, dtype=np.float32),
    }
    adam = {"G": (3, {"w.exp_avg": np.ones((2, 3), dtype=np.float32)}), "D": (0, {})}
    return Checkpoint(tensors, adam, 7, "lr=0.001\nseed=0\n", {"seed": 0, "next_step": 7, "running_dsc": 0.25})


class TestKFold:
    def test_sizes_and_disjointness(self):
        groups = trainer_service.kfold_split(10, 4, seed=0)
        assert sorted(len(g) for g in groups) == [2, 2, 3, 3]
        assert sorted(i for g in groups for i in g) == list(range(10))
        assert all(g == sorted(g) for g in groups)

    def test_deterministic(self):
        assert trainer_service.kfold_split(25, 4, seed=3) == trainer_service.kfold_split(25, 4, seed=3)

    def test_too_few_items(self):
        with pytest.raises(ValueError):
            trainer_service.kfold_split(3, 4)


class TestCheckpointFormat:
    def test_save_then_load(self, tmp_path):
        original = sample_checkpoint()
        path = checkpoint_service.save_checkpoint(tmp_path / "a.gcan", original)
        loaded = checkpoint_service.load_checkpoint(path)
        assert list(loaded.tensors) == list(original.tensors)
        for name, value in original.tensors.items():
            assert loaded.tensors[name].dtype == value.dtype
            assert np.array_equal(loaded.tensors[name], value)
        assert loaded.adam["G"][0] == 3
        assert np.array_equal(loaded.adam["G"][1]["w.exp_avg"], np.ones((2, 3)))
        assert loaded.adam["D"] == (0, {})
        assert (loaded.step, loaded.config, loaded.rng) == (7, original.config, original.rng)
        assert loaded.model_tensors("D") == {"s": loaded.tensors["D.s"]}

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gcan"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint_service.load_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        path = checkpoint_service.save_checkpoint(tmp_path / "v.gcan", sample_checkpoint())
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            checkpoint_service.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = checkpoint_service.save_checkpoint(tmp_path / "t.gcan", sample_checkpoint())
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncado"):
            checkpoint_service.load_checkpoint(path)

    def test_integer_tensor_rejected(self, tmp_path):
        ckpt = Checkpoint({"G.i": np.arange(3)}, {}, 0, "")
        with pytest.raises(CheckpointError):
            checkpoint_service.save_checkpoint(tmp_path / "i.gcan", ckpt)


class TestCaptureRestore:
    def test_restore_models_and_optimizers(self, tiny_config):
        state = TrainingState.fresh(tiny_config)
        state.adam_g.step = 4
        state.adam_g.exp_avg["conv1.weight"][...] = 0.5
        ckpt = checkpoint_service.capture(state.G, state.D, state.adam_g, state.adam_d, 4,
                                          tiny_config.snapshot())
        other = TrainingState.fresh(tiny_config.model_copy(update={"seed": 9}))
        checkpoint_service.restore(ckpt, other.G, other.D, other.adam_g, other.adam_d)
        for name, value in state.G.state_tensors().items():
            assert np.array_equal(other.G.state_tensors()[name], value), name
        assert other.adam_g.step == 4
        assert np.all(other.adam_g.exp_avg["conv1.weight"] == 0.5)

    def test_incompatible_configuration(self, tiny_config):
        state = TrainingState.fresh(tiny_config)
        ckpt = checkpoint_service.capture(state.G, state.D, state.adam_g, state.adam_d, 0, "")
        G = build_generator("tiny", gc_kernel=(5, 5, 3))
        with pytest.raises(CheckpointError):
            checkpoint_service.restore(ckpt, G)


class TestTrainStep:
    def test_fresh_discriminator_loss(self, tiny_config, phantoms):
        state = TrainingState.fresh(tiny_config)
        batch = trainer_service.make_batch(phantoms, tiny_config, 0)
        loss_g, loss_d = trainer_service.train_step(state.G, state.D, batch, tiny_config,
                                                    (state.adam_g, state.adam_d))
        assert loss_d == pytest.approx(2.0 * math.log(2.0), abs=0.02)
        assert math.isfinite(loss_g) and loss_g > 0.0
        assert state.adam_g.step == 1 and state.adam_d.step == 1

    def test_without_adversarial(self, tiny_config, phantoms):
        cfg = tiny_config.model_copy(update={"adversarial": False})
        state = TrainingState.fresh(cfg)
        batch = trainer_service.make_batch(phantoms, cfg, 0)
        _, loss_d = trainer_service.train_step(state.G, state.D, batch, cfg, (state.adam_g, state.adam_d))
        assert loss_d == 0.0
        assert state.adam_d.step == 0

    def test_divergence(self, tiny_config):
        cfg = tiny_config.model_copy(update={"adversarial": False})
        state = TrainingState.fresh(cfg)
        images = np.full((1, 8, 32, 32), np.nan, dtype=np.float32)
        labels = np.zeros((1, 8, 32, 32), dtype=np.uint8)
        with pytest.raises(DivergenceError) as info:
            trainer_service.train_step(state.G, state.D, (images, labels), cfg, (state.adam_g, state.adam_d), step=5)
        assert info.value.step == 5

    def test_batches_depend_only_on_step(self, tiny_config, phantoms):
        a = trainer_service.make_batch(phantoms, tiny_config, 3)
        b = trainer_service.make_batch(phantoms, tiny_config, 3)
        c = trainer_service.make_batch(phantoms, tiny_config, 4)
        assert a[0].shape == (1, 8, 32, 32) and a[1].dtype == np.uint8
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert not np.array_equal(a[0], c[0])


class TestTrain:
    def test_zero_steps_writes_initial_checkpoint(self, tmp_path, tiny_config, phantoms):
        cfg = tiny_config.model_copy(update={"steps": 0})
        result = trainer_service.train(phantoms, cfg, tmp_path)
        assert result.history == []
        assert [p.name for p in result.checkpoints] == [checkpoint_name(0)]
        assert (tmp_path / "metrics.csv").read_text() == METRICS_HEADER + "\n"
        assert checkpoint_service.load_checkpoint(tmp_path / checkpoint_name(0)).config == cfg.snapshot()

    def test_identical_runs(self, tmp_path, tiny_config, phantoms):
        first = trainer_service.train(phantoms, tiny_config, tmp_path / "a")
        second = trainer_service.train(phantoms, tiny_config, tmp_path / "b")
        log_a = (tmp_path / "a" / "metrics.csv").read_text()
        assert log_a == (tmp_path / "b" / "metrics.csv").read_text()
        assert len(log_a.splitlines()) == 3
        assert [p.name for p in first.checkpoints] == [checkpoint_name(0), checkpoint_name(2)]
        assert first.history == second.history

    def test_resume_matches_uninterrupted(self, tmp_path, tiny_config, phantoms):
        cfg = tiny_config.model_copy(update={"steps": 4})
        trainer_service.train(phantoms, cfg, tmp_path / "full")
        trainer_service.train(phantoms, cfg, tmp_path / "resumed",
                              resume=tmp_path / "full" / checkpoint_name(2))

        full = checkpoint_service.load_checkpoint(tmp_path / "full" / checkpoint_name(4))
        resumed = checkpoint_service.load_checkpoint(tmp_path / "resumed" / checkpoint_name(4))
        assert list(full.tensors) == list(resumed.tensors)
        for name, value in full.tensors.items():
            assert np.array_equal(resumed.tensors[name], value), name
        assert full.adam["G"][0] == resumed.adam["G"][0] == 4
        assert full.rng == resumed.rng

        full_rows = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
        resumed_rows = (tmp_path / "resumed" / "metrics.csv").read_text().splitlines()
        assert resumed_rows == [METRICS_HEADER] + full_rows[3:]

    def test_requires_labels(self, tmp_path, tiny_config):
        with pytest.raises(DataError):
            trainer_service.train([], tiny_config, tmp_path)
        with pytest.raises(DataError):
            trainer_service.train([Volume(np.ones((16, 48, 48)))], tiny_config, tmp_path)

    @pytest.mark.slow
    def test_cross_validate(self, tmp_path, tiny_config):
        dataset = [volume_service.normalize_zscore(v) for v in volume_service.phantom_generate(11, 4, (16, 48, 48))]
        cfg = tiny_config.model_copy(update={"steps": 1})
        results = trainer_service.cross_validate(dataset, cfg, tmp_path, k=2)
        assert [r.fold for r in results] == [0, 1]
        assert sorted(i for r in results for i in r.test_indices) == [0, 1, 2, 3]
        for result in results:
            assert len(result.reports) == len(result.test_indices) == 2
            assert 0.0 <= result.mean_whole()[0] <= 1.0


def held_out_scores(G, volumes):
    """DSC y 95%HD medios de la segmentación por ventana deslizante"""
    dscs, hds = [], []
    for volume in volumes:
        prob = inference_service.sliding_window_predict(G, volume, (32, 96, 96), (16, 48, 48))
        report = metrics_service.evaluate(inference_service.threshold_mask(prob.values), volume.label,
                                          volume.spacing)
        dscs.append(report.whole.dsc)
        hds.append(report.whole.hd95 if report.whole.hd95 is not None else float("inf"))
    return float(np.mean(dscs)), float(np.mean(hds))


@pytest.fixture(scope="module")
def phantom_split():
    normalize = volume_service.normalize_zscore
    train_set = [normalize(v) for v in volume_service.phantom_generate(100, 16, (32, 96, 96))]
    test_set = [normalize(v) for v in volume_service.phantom_generate(200, 4, (32, 96, 96))]
    return train_set, test_set


@pytest.fixture(scope="module")
def phantom_runs(phantom_split, tmp_path_factory):
    train_set, test_set = phantom_split
    cfg = TrainConfig(preset="tiny", steps=800, seed=0, checkpoint_every=800)
    scores = {}
    for adversarial in (True, False):
        run_cfg = cfg.model_copy(update={"adversarial": adversarial})
        out_dir = tmp_path_factory.mktemp("adversarial" if adversarial else "bce_only")
        trained = trainer_service.train(train_set, run_cfg, out_dir)
        scores[adversarial] = held_out_scores(trained.G, test_set)
    return scores


@pytest.mark.slow
def test_phantom_segmentation(phantom_runs):
    mean_dsc, mean_hd95 = phantom_runs[True]
    assert mean_dsc >= 0.85
    assert mean_hd95 <= 6.0


@pytest.mark.slow
def test_adversarial_and_bce_only_both_converge(phantom_runs):
    for adversarial, (mean_dsc, _) in phantom_runs.items():
        assert mean_dsc >= 0.85, f"adversarial={adversarial}"
