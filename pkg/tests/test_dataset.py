import numpy as np
import pytest

from avtlab import dataset as ds
from avtlab.audiofeat import read_wav
from avtlab.errors import GenerationError, SplitError


def tone_energy(samples, freq_hz, rate=16000):
    """Goertzel-style single-bin energy, normalised by clip length."""
    t = np.arange(len(samples)) / rate
    z = samples @ np.exp(-2j * np.pi * freq_hz * t)
    return np.abs(z) / len(samples)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = ds.generate_synthetic(root, scenes=3, events=5, pairs=90,
                                     seed=11, image_size=32, class_decay=0.6)
    return manifest


class TestExtendClip:
    def test_exact_clip_unchanged(self):
        rng = np.random.default_rng(0)
        clip = rng.uniform(-1, 1, 160000)
        out = ds.extend_clip(clip, np.random.default_rng(1))
        assert np.array_equal(out, clip)

    def test_three_second_clip_tiles_four_times(self):
        rng = np.random.default_rng(2)
        clip = rng.uniform(-1, 1, 48000)  # 3 s
        out = ds.extend_clip(clip, np.random.default_rng(3))
        assert out.shape == (160000,)
        # every output sample must come from the tiled content
        tiled = np.tile(clip, 4)
        found = any(np.array_equal(out, tiled[s:s + 160000])
                    for s in range(tiled.size - 160000 + 1))
        assert found

    def test_short_clip_rejected(self):
        clip = np.zeros(24000)  # 1.5 s
        assert ds.extend_clip(clip, np.random.default_rng(4)) is None


class TestGenerate:
    def test_counts_and_classes(self, small_corpus):
        assert len(small_corpus.records) == 90
        counts = small_corpus.class_counts()
        assert all(c > 0 for c in counts)
        assert counts == small_corpus.meta["class_counts"]

    def test_media_files_exist(self, small_corpus):
        for rec in small_corpus.records[:10]:
            assert (small_corpus.root / rec.audio).exists()
            assert (small_corpus.root / rec.image).exists()

    def test_audio_is_ten_seconds(self, small_corpus):
        rec = small_corpus.records[0]
        samples, rate = read_wav(small_corpus.root / rec.audio)
        assert rate == 16000
        assert samples.shape == (160000,)
        assert np.max(np.abs(samples)) <= 1.0

    def test_event_draws_match_profile_within_3_sigma(self, small_corpus):
        profile = ds.default_event_profile(3, 5)
        by_scene = {}
        for rec in small_corpus.records:
            by_scene.setdefault(rec.scene, []).append(rec.events)
        for k, rows in by_scene.items():
            rows = np.asarray(rows)
            n = rows.shape[0]
            freq = rows.mean(axis=0)
            sigma = np.sqrt(profile[k] * (1 - profile[k]) / n)
            assert np.all(np.abs(freq - profile[k]) <= 3 * sigma + 1e-12)

    def test_deterministic_event_spectral_content(self, tmp_path):
        profile = np.array([[1.0, 0.0], [0.0, 1.0]])
        manifest = ds.generate_synthetic(tmp_path, scenes=2, events=2, pairs=24,
                                         seed=5, image_size=16, class_decay=1.0,
                                         event_profile=profile)
        f0 = ds.TONE_BASE_HZ
        f1 = ds.TONE_BASE_HZ + ds.TONE_STEP_HZ
        for rec in manifest.records:
            samples, _ = read_wav(manifest.root / rec.audio)
            e0, e1 = tone_energy(samples, f0), tone_energy(samples, f1)
            if rec.scene == 0:
                assert e0 > 10 * e1
            else:
                assert e1 > 10 * e0

    def test_same_seed_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        ma = ds.generate_synthetic(a, scenes=2, events=3, pairs=20, seed=3, image_size=16)
        mb = ds.generate_synthetic(b, scenes=2, events=3, pairs=20, seed=3, image_size=16)
        ds.save_manifest(ma)
        ds.save_manifest(mb)
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
        rec = ma.records[7]
        assert (a / rec.audio).read_bytes() == (b / rec.audio).read_bytes()
        assert (a / rec.image).read_bytes() == (b / rec.image).read_bytes()

    def test_too_few_pairs_rejected(self, tmp_path):
        with pytest.raises(GenerationError):
            ds.generate_synthetic(tmp_path, scenes=4, events=4, pairs=12, seed=0)


@pytest.fixture(scope="session")
def unbalanced(tmp_path_factory):
    root = tmp_path_factory.mktemp("unbalanced")
    # decay 0.42 over 3 classes: roughly [63, 27, 11] out of 100
    return ds.generate_synthetic(root, scenes=3, events=4, pairs=100,
                                 seed=21, image_size=16, class_decay=0.42)


class TestBalance:
    def test_low_class_gains_four_clones_per_original(self, unbalanced):
        counts = unbalanced.class_counts()
        balanced = ds.balance_by_offset(unbalanced, low=counts[0], floor=1)
        new_counts = balanced.class_counts()
        assert new_counts[0] == counts[0]
        assert new_counts[1] == 5 * counts[1]
        assert new_counts[2] == 5 * counts[2]

    def test_floor_removes_class(self, unbalanced):
        counts = unbalanced.class_counts()
        floor = counts[2] + 1
        balanced = ds.balance_by_offset(unbalanced, low=floor, floor=floor)
        assert balanced.class_counts()[2] == 0
        assert all(rec.scene != 2 for rec in balanced.records)

    def test_above_threshold_unchanged(self, unbalanced):
        balanced = ds.balance_by_offset(unbalanced, low=1, floor=1)
        assert balanced.class_counts() == unbalanced.class_counts()

    def test_clone_geometry_and_content(self, unbalanced):
        counts = unbalanced.class_counts()
        balanced = ds.balance_by_offset(unbalanced, low=counts[0] + 1, floor=1)
        originals = {r.id: r for r in unbalanced.records}
        clones = [r for r in balanced.records if "_" in r.id]
        assert clones, "expected offset clones"
        for clone in clones[:8]:
            orig = originals[clone.origin]
            assert clone.scene == orig.scene
            assert clone.events == orig.events
            offset = (round(clone.lat - orig.lat, 6), round(clone.lon - orig.lon, 6))
            assert offset in {(0.01, 0.0), (-0.01, 0.0), (0.0, 0.01), (0.0, -0.01)}
            a_orig, _ = read_wav(balanced.root / orig.audio)
            a_clone, _ = read_wav(balanced.root / clone.audio)
            assert not np.array_equal(a_orig, a_clone)  # fresh window
            # same underlying tones survive re-windowing; tile-boundary phase
            # breaks shrink the single-bin projection but noise sits ~1e-4
            for i, flag in enumerate(orig.events):
                if flag:
                    f = ds.TONE_BASE_HZ + ds.TONE_STEP_HZ * i
                    assert tone_energy(a_clone, f) > 0.01


class TestSplit:
    def test_ratios_and_atomicity(self, small_corpus):
        balanced = ds.balance_by_offset(small_corpus, low=40, floor=1)
        split = ds.split_disjoint(balanced, seed=7)
        total = len(split.records)
        groups = {}
        for rec in split.records:
            groups.setdefault(rec.origin, set()).add(rec.split)
        assert all(len(s) == 1 for s in groups.values())
        max_group = max(len([r for r in split.records if r.origin == o])
                        for o in groups)
        slack = max(0.02 * total, max_group)
        for name, ratio in zip(("train", "val", "test"), (0.7, 0.1, 0.2)):
            size = len(split.split_records(name))
            assert abs(size - ratio * total) <= slack

    def test_different_seeds_differ(self, small_corpus):
        s1 = ds.split_disjoint(small_corpus, seed=1)
        s2 = ds.split_disjoint(small_corpus, seed=2)
        a1 = [r.split for r in s1.records]
        a2 = [r.split for r in s2.records]
        assert a1 != a2

    def test_bad_ratios(self, small_corpus):
        with pytest.raises(SplitError):
            ds.split_disjoint(small_corpus, ratios=(0.5, 0.2, 0.2))


class TestManifestIO:
    def test_roundtrip(self, small_corpus, tmp_path):
        split = ds.split_disjoint(small_corpus, seed=3)
        split.records[0].teacher = [0.25, 0.5, 0.75, 0.1, 0.2]
        path = tmp_path / "manifest.jsonl"
        ds.save_manifest(split, path)
        back = ds.load_manifest(path)
        assert len(back.records) == len(split.records)
        assert back.records[0].teacher == [0.25, 0.5, 0.75, 0.1, 0.2]
        assert back.records[1].teacher is None
        assert back.meta["scenes"] == 3
        first = path.read_text().splitlines()[1]
        assert list(__import__("json").loads(first)) == [
            "id", "scene", "lat", "lon", "image", "audio", "events", "split"]
