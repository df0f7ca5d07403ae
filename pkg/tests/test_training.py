import json

import numpy as np
import pytest

from avtlab import dataset as ds
from avtlab import training as tr
from avtlab.config import ExperimentConfig, LossConfig
from avtlab.errors import NumericError
from avtlab.evaluation import evaluate, export_event_embeddings
from avtlab.features import FeatureStore
from avtlab.models import cam
from avtlab.tensor import Tensor


class TestAdam:
    def test_first_step_hand_value(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        state = tr.AdamState()
        tr.adam_step([("p", p)], {"p": np.ones(1)}, state, lr=0.001, weight_decay=0.0)
        assert p.data[0] == pytest.approx(-0.001 * 1.0 / (1.0 + 1e-8), abs=1e-12)

    def test_zero_gradient_no_decay_is_identity(self):
        p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        tr.adam_step([("p", p)], {"p": np.zeros(2)}, tr.AdamState(), lr=0.01,
                     weight_decay=0.0)
        assert np.array_equal(p.data, [1.5, -2.0])

    def test_decay_applies_before_update(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        tr.adam_step([("p", p)], {"p": np.zeros(1)}, tr.AdamState(), lr=0.01,
                     weight_decay=0.1)
        assert p.data[0] == pytest.approx(1.0 - 0.01 * 0.1, abs=1e-15)

    def test_quadratic_converges(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = tr.AdamState()
        for _ in range(2000):
            tr.adam_step([("p", p)], {"p": p.data.copy()}, state, lr=0.01,
                         weight_decay=0.0)
        assert abs(p.data[0]) < 1e-3

    def test_matches_scalar_reference(self):
        def reference(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
            theta = m = v = 0.0
            out = []
            for t, g in enumerate(grads, start=1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                mhat = m / (1 - b1 ** t)
                vhat = v / (1 - b2 ** t)
                theta -= lr * mhat / (np.sqrt(vhat) + eps)
                out.append(theta)
            return out

        rng = np.random.default_rng(0)
        grads = rng.uniform(-2, 2, 100)
        p = Tensor(np.zeros(1), requires_grad=True)
        state = tr.AdamState()
        trace = []
        for g in grads:
            tr.adam_step([("p", p)], {"p": np.array([g])}, state, lr=0.003,
                         weight_decay=0.0)
            trace.append(p.data[0])
        ref = reference(grads, lr=0.003)
        assert np.max(np.abs(np.array(trace) - np.array(ref))) < 1e-12

    def test_nan_gradient_aborts(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        with pytest.raises(NumericError):
            tr.adam_step([("p", p)], {"p": np.array([np.nan])}, tr.AdamState(),
                         lr=0.01, weight_decay=0.0)


def toy_config(**kw):
    base = dict(scenes=2, events=2, pairs=60, image_size=32, feature_dim=16,
                image_depth=3, audio_depth=3, lr=1e-3, epochs=2, batch_size=32,
                teacher_lr=1e-2, teacher_epochs=20, seeds=[0])
    base.update(kw)
    loss = base.pop("loss", LossConfig())
    return ExperimentConfig(loss=loss, **base)


@pytest.fixture(scope="session")
def toy_setup(tmp_path_factory):
    """Separable two-scene corpus with a pretrained teacher."""
    root = tmp_path_factory.mktemp("toy")
    profile = np.array([[0.95, 0.05], [0.05, 0.95]])
    manifest = ds.build_dataset(root, scenes=2, events=2, pairs=60, seed=42,
                                image_size=32, class_decay=0.8, balance_low=1,
                                balance_floor=1, event_profile=profile)
    store = FeatureStore.build(manifest)
    config = toy_config()
    pre = tr.pretrain_teacher(config, manifest, store)
    return manifest, store, pre


class TestPretrain:
    def test_reaches_event_accuracy(self, toy_setup):
        _, _, pre = toy_setup
        assert pre.accuracy >= 0.95
        assert pre.epochs_run <= 20

    def test_probs_cached_everywhere(self, toy_setup):
        manifest, _, _ = toy_setup
        assert all(r.teacher is not None for r in manifest.records)
        arr = np.array([r.teacher for r in manifest.records])
        assert np.all((arr > 0) & (arr < 1))

    def test_snapshot_reload_reproduces_probs(self, toy_setup, tmp_path):
        manifest, store, pre = toy_setup
        pre.teacher.save(tmp_path / "teacher")
        from avtlab.models import FrozenTeacher
        back = FrozenTeacher.load(tmp_path / "teacher")
        recs = manifest.records[:8]
        _, audio = store.batch(recs, pre.normalizer)
        assert np.array_equal(back.predict(audio), pre.teacher.predict(audio))

    def test_teacher_detects_its_tone(self, toy_setup):
        manifest, _, _ = toy_setup
        for rec in manifest.split_records("train")[:20]:
            if rec.events[0] and not rec.events[1]:
                assert rec.teacher[0] > 0.5
            if rec.events[1] and not rec.events[0]:
                assert rec.teacher[1] > 0.5


class TestTrainRun:
    def test_zero_epochs_is_untrained_baseline(self, toy_setup):
        manifest, store, pre = toy_setup
        cfg = toy_config(epochs=0)
        result = tr.train_run(cfg, manifest, store, teacher=pre.teacher)
        assert result.log == []
        # zero heads predict class 0 everywhere
        assert result.confusion[:, 0].sum() == result.confusion.sum()

    def test_deterministic_reruns(self, toy_setup):
        manifest, store, pre = toy_setup
        cfg = toy_config(epochs=2)
        a = tr.train_run(cfg, manifest, store, teacher=pre.teacher, run_seed=3,
                         resplit=True)
        b = tr.train_run(cfg, manifest, store, teacher=pre.teacher, run_seed=3,
                         resplit=True)
        assert json.dumps(a.log) == json.dumps(b.log)
        assert a.test_metrics == b.test_metrics

    def test_teacher_untouched_by_training(self, toy_setup):
        manifest, store, pre = toy_setup
        before = pre.teacher.snapshot_id
        cfg = toy_config(epochs=1, loss=LossConfig(approach="kl_nva"))
        tr.train_run(cfg, manifest, store, teacher=pre.teacher)
        assert pre.teacher._checksum() == before

    def test_le_builds_table_from_train_split(self, toy_setup):
        manifest, store, pre = toy_setup
        cfg = toy_config(epochs=1, loss=LossConfig(approach="le"))
        result = tr.train_run(cfg, manifest, store, teacher=pre.teacher)
        assert result.table is not None
        n_train = len(manifest.split_records("train"))
        assert int(result.table.counts.sum()) == n_train

    def test_separable_toy_learns(self, toy_setup):
        manifest, store, pre = toy_setup
        cfg = toy_config(epochs=12, lr=3e-3)
        result = tr.train_run(cfg, manifest, store, teacher=pre.teacher)
        assert result.test_metrics["fscore"] >= 0.8


class TestSweepAndExports:
    def test_sweep_rows_and_aggregates(self, toy_setup, tmp_path):
        manifest, store, pre = toy_setup
        cfg = toy_config(epochs=1, seeds=[0, 1])
        cells = [{"name": "none+fusion", "approach": "none", "modality": "none"},
                 {"name": "le+fusion", "approach": "le", "modality": "none"}]
        rows = tr.sweep(cfg, manifest, store, pre.teacher, cells=cells,
                        csv_path=tmp_path / "results.csv")
        assert len(rows) == 2 * (2 + 2)
        header = (tmp_path / "results.csv").read_text().splitlines()[0]
        assert header == ",".join(tr.RESULTS_HEADER)
        mean = tr.aggregate_fscore(rows, "none+fusion")
        per_seed = [r["fscore"] for r in rows
                    if r["run_id"].startswith("none+fusion:")]
        assert mean == pytest.approx(np.mean(per_seed), abs=1e-12)

    def test_embedding_export_shapes_and_separation(self, toy_setup):
        manifest, store, pre = toy_setup
        cfg = toy_config(epochs=4, loss=LossConfig(approach="kl_nva"))
        result = tr.train_run(cfg, manifest, store, teacher=pre.teacher)
        test = [r for r in manifest.records if r.split == "test"]
        rows, labels = export_event_embeddings(result.model, test, store,
                                               result.normalizer)
        assert rows.shape == (len(test), 2)
        assert np.all((rows >= 0) & (rows <= 1))
        # separable toy: scene centroids further apart than within-scene spread
        cents = [rows[labels == k].mean(axis=0) for k in (0, 1)]
        inter = np.linalg.norm(cents[0] - cents[1])
        intra = np.mean([np.linalg.norm(rows[labels == k] - cents[k], axis=1).mean()
                         for k in (0, 1)])
        assert inter > intra

    def test_compound_export_uses_table(self, toy_setup):
        manifest, store, pre = toy_setup
        cfg = toy_config(epochs=1, loss=LossConfig(approach="le"))
        result = tr.train_run(cfg, manifest, store, teacher=pre.teacher)
        test = [r for r in manifest.records if r.split == "test"]
        rows, _ = export_event_embeddings(result.model, test, store,
                                          result.normalizer, table=result.table)
        lo = result.table.posteriors.min(axis=0) - 1e-9
        hi = result.table.posteriors.max(axis=0) + 1e-9
        assert np.all((rows >= lo) & (rows <= hi))


class TestCamIntegration:
    def test_cam_localizes_blob_quadrant(self, tmp_path):
        manifest = ds.build_dataset(tmp_path, scenes=4, events=4, pairs=120,
                                    seed=9, image_size=32, class_decay=1.0,
                                    balance_low=1, balance_floor=1,
                                    visual_style="blob_only")
        store = FeatureStore.build(manifest)
        cfg = toy_config(scenes=4, events=4, epochs=16, lr=1e-2, batch_size=16,
                         init="random", modality_mask="image_only")
        result = tr.train_run(cfg, manifest, store)
        assert result.test_metrics["fscore"] > 0.7

        model = result.model
        test = [r for r in manifest.records if r.split == "test"]
        images, _ = store.batch(test, None)
        from avtlab import tensor as tz
        with tz.no_grad():
            out = model.forward(images, None, mask="image_only")
        preds = np.argmax(out.scene_logits.data, axis=1)

        hits = total = 0
        for i, rec in enumerate(test):
            if preds[i] != rec.scene:
                continue
            total += 1
            heat = cam(rec.scene, out.visual_maps.data[i],
                       model.scene_w.data, model.dims.feature_dim)
            hy, hx = np.unravel_index(np.argmax(heat), heat.shape)
            fy = (hy + 0.5) / heat.shape[0]
            fx = (hx + 0.5) / heat.shape[1]
            bx, by = ds._ANCHORS[rec.scene % 4]
            if (fx < 0.5) == (bx < 0.5) and (fy < 0.5) == (by < 0.5):
                hits += 1
        assert total >= 10
        assert hits / total >= 0.8
