import hashlib
import json

import numpy as np
import pytest

from djda.autodiff import AdamState, Stack, adam_step, softmax_cross_entropy
from djda.data import (
    Dataset,
    SynthSpec,
    cell_means,
    generate_synthetic,
    load_dataset,
    loso_splits,
    make_batches,
    make_fold,
    save_dataset,
    write_sidecar,
)
from djda.errors import ContractError, ValidationError
from djda.rng import SplitMix64

PINNED = SynthSpec(c=4, k_total=5, samples_per_speaker_per_class=30, feature_dim=20,
                   class_separation=4.0, speaker_shift_scale=2.0, speaker_rotation=True,
                   noise_sigma=0.7, seed=7)


class TestSplitMix64:
    def test_reference_outputs(self):
        # SplitMix64 seeded with 0; widely published first outputs
        out = SplitMix64(0).next_u64(3)
        assert [hex(int(v)) for v in out] == ["0xe220a8397b1dcdaf", "0x6e789e6aa1b965f4",
                                              "0x6c45d188009454f"]

    def test_matches_integer_reference(self):
        def ref(seed, n):
            out, state = [], seed
            for _ in range(n):
                state = (state + 0x9E3779B97F4A7C15) % 2**64
                z = state
                z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
                z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
                out.append(z ^ (z >> 31))
            return out

        for seed in (0, 7, 2**64 - 1):
            assert [int(v) for v in SplitMix64(seed).next_u64(5)] == ref(seed, 5)

    def test_stream_continuity(self):
        a = SplitMix64(42)
        first = np.concatenate([a.next_u64(3), a.next_u64(4)])
        np.testing.assert_array_equal(first, SplitMix64(42).next_u64(7))

    def test_uniform_range_and_moments(self):
        u = SplitMix64(1).uniform(20000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert u.mean() == pytest.approx(0.5, abs=0.01)

    def test_normal_moments(self):
        z = SplitMix64(2).normal(20000)
        assert z.mean() == pytest.approx(0.0, abs=0.03)
        assert z.std() == pytest.approx(1.0, abs=0.03)

    def test_permutation(self):
        p = SplitMix64(3).permutation(50)
        assert sorted(p.tolist()) == list(range(50))


class TestSynthetic:
    def test_sample_count(self):
        ds = generate_synthetic(PINNED)
        assert len(ds) == 4 * 5 * 30
        assert ds.x.shape == (600, 20)
        assert ds.speaker_ids == [0, 1, 2, 3, 4]

    def test_pure_function_of_spec(self):
        a, b = generate_synthetic(PINNED), generate_synthetic(PINNED)
        assert a.x.tobytes() == b.x.tobytes()

    def test_pinned_fingerprint(self):
        # frozen once from this generator; guards against silent stream changes
        digest = hashlib.sha256(generate_synthetic(PINNED).x.tobytes()).hexdigest()
        assert digest == PINNED_DIGEST

    def test_class_means_are_separated(self):
        means = cell_means(SynthSpec(speaker_shift_scale=0.0, speaker_rotation=False))[0]
        for a in range(4):
            for b in range(a + 1, 4):
                assert np.linalg.norm(means[a] - means[b]) >= 4.0 - 1e-12

    def test_speaker_offsets_have_requested_norm(self):
        spec = SynthSpec(speaker_rotation=False)
        base = cell_means(SynthSpec(speaker_shift_scale=0.0, speaker_rotation=False))
        shifted = cell_means(spec)
        norms = np.linalg.norm(shifted - base, axis=2)
        np.testing.assert_allclose(norms, 2.0, atol=1e-12)

    def test_empirical_means_match_construction(self):
        ds = generate_synthetic(PINNED)
        means = cell_means(PINNED)
        bound = 3 * 0.7 / np.sqrt(30)
        for j in range(5):
            for m in range(4):
                rows = ds.x[(ds.speaker == j) & (ds.emotion == m)]
                assert np.all(np.abs(rows.mean(axis=0) - means[j, m]) < bound)

    def test_no_shift_domain_discriminator_near_chance(self):
        spec = SynthSpec(speaker_shift_scale=0.0, speaker_rotation=False, seed=11)
        ds = generate_synthetic(spec)
        label = (ds.speaker == 0).astype(int)
        order = SplitMix64(5).permutation(len(ds))
        train, test = order[:300], order[300:]
        # balance: speaker 0 vs speaker 1 only
        keep = lambda idx: idx[np.isin(ds.speaker[idx], [0, 1])]
        train, test = keep(train), keep(test)
        disc = Stack.init([20, 16, 2], "leaky_relu", SplitMix64(0))
        state = AdamState(lr=1e-2)
        for _ in range(200):
            logits, caches = disc.forward(ds.x[train])
            _, g, _ = softmax_cross_entropy(logits, label[train])
            _, grads = disc.backward(g, caches)
            adam_step(disc.parameters("d"), disc.named_grads("d", grads), state)
        _, _, errors = softmax_cross_entropy(disc.forward(ds.x[test])[0], label[test])
        assert errors / len(test) > 0.35

    def test_rotation_toggle_keeps_offsets(self):
        on, off = cell_means(PINNED), cell_means(SynthSpec(**{**PINNED.__dict__, "speaker_rotation": False}))
        # rotation is about the class centroid, so class-averaged cell means only see the offset
        np.testing.assert_allclose(on.mean(axis=1), off.mean(axis=1), atol=1e-12)

    @pytest.mark.parametrize("bad", [dict(k_total=2), dict(c=1), dict(noise_sigma=0.0),
                                     dict(class_separation=-1.0), dict(feature_dim=3),
                                     dict(samples_per_speaker_per_class=0)])
    def test_invalid_spec(self, bad):
        with pytest.raises(ValidationError):
            generate_synthetic(SynthSpec(**bad))


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = generate_synthetic(SynthSpec(samples_per_speaker_per_class=1, k_total=3, c=2,
                                          feature_dim=4))
        path = tmp_path / "d.csv"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.x.tobytes() == ds.x.tobytes()
        np.testing.assert_array_equal(back.emotion, ds.emotion)
        np.testing.assert_array_equal(back.speaker, ds.speaker)
        assert (back.c, back.k) == (ds.c, ds.k)

    def test_ten_sample_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.normal(size=(10, 3)) * 1e3, rng.integers(0, 3, 10), np.arange(10) % 4, 3, 4)
        save_dataset(ds, tmp_path / "d.csv")
        back = load_dataset(tmp_path / "d.csv")
        assert back.x.tobytes() == ds.x.tobytes()
        np.testing.assert_array_equal(back.emotion, ds.emotion)

    def test_header_only(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("# djda-dataset c=4 k=5\nspeaker,emotion,f0,f1\n")
        ds = load_dataset(path)
        assert len(ds) == 0 and ds.c == 4 and ds.k == 5 and ds.feature_dim == 2

    def test_fixture(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("speaker,emotion,f0,f1,f2\n"
                        "0,1,0.5,-1.25,3\n"
                        "1,0,1e-3,2.0,-0.0\n"
                        "2,-1,7,8,9.75\n")
        ds = load_dataset(path)
        np.testing.assert_array_equal(ds.x, [[0.5, -1.25, 3.0], [0.001, 2.0, -0.0], [7.0, 8.0, 9.75]])
        assert ds.emotion.tolist() == [1, 0, -1]
        assert ds.speaker.tolist() == [0, 1, 2]
        assert ds.c == 2 and ds.k == 3
        assert not ds.labeled
        assert ds.samples[2].emotion == -1

    @pytest.mark.parametrize("body,where", [
        ("speaker,emotion,f0\n0,1\n", "line 2"),
        ("speaker,emotion,f0\n0,1,abc\n", "line 2"),
        ("speaker,emotion,f0\n0,1,1.0\n2,0,1.0\n", "dense"),
        ("speaker,emo,f0\n", "line 1"),
        ("speaker,emotion,f0\n0,1,1.0\n0,-2,1.0\n", "line 3"),
        ("speaker,emotion,f0\n0,0,nan\n", "line 2"),
    ])
    def test_parse_errors(self, tmp_path, body, where):
        path = tmp_path / "bad.csv"
        path.write_text(body)
        with pytest.raises(ValidationError, match=where):
            load_dataset(path)

    def test_sidecar(self, tmp_path):
        write_sidecar(PINNED, tmp_path / "s.json")
        doc = json.loads((tmp_path / "s.json").read_text())
        assert doc["seed"] == 7 and doc["prng"] == "splitmix64"
        assert doc["synth_spec"]["k_total"] == 5


class TestLoso:
    def test_ten_speakers_ten_folds(self):
        ds = generate_synthetic(SynthSpec(k_total=10, samples_per_speaker_per_class=3))
        assert len(loso_splits(ds)) == 10

    def test_partition(self):
        ds = generate_synthetic(SynthSpec(k_total=6, samples_per_speaker_per_class=4))
        folds = loso_splits(ds)
        targets = [set(f.target_index.tolist()) for f in folds]
        assert set().union(*targets) == set(range(len(ds)))
        assert sum(len(t) for t in targets) == len(ds)
        for f in folds:
            assert set(f.source_index.tolist()).isdisjoint(f.target_index.tolist())
            assert len(f.source_index) + len(f.target_index) == len(ds)

    def test_fold_three_sources(self):
        ds = generate_synthetic(PINNED)
        fold = loso_splits(ds)[3]
        assert fold.held_out_speaker == 3
        assert fold.source_speaker_ids == [0, 1, 2, 4]
        assert sorted(set(fold.source.speaker.tolist())) == [0, 1, 2, 3]
        assert 3 not in set(ds.speaker[fold.source_index].tolist())
        assert fold.source.k == 4

    def test_too_few_speakers(self):
        ds = Dataset(np.zeros((4, 2)), [0, 1, 0, 1], [0, 0, 1, 1], 2, 2)
        with pytest.raises(ValidationError):
            loso_splits(ds)

    def test_target_labels_only_through_eval(self):
        fold = make_fold(generate_synthetic(PINNED), 0)
        assert not hasattr(fold.target, "emotion")
        assert fold.target.eval_labels().shape == (120,)

    def test_unlabeled_target_cannot_be_evaluated(self):
        ds = generate_synthetic(SynthSpec(samples_per_speaker_per_class=2))
        ds.emotion[ds.speaker == 1] = -1
        fold = make_fold(ds, 1)
        with pytest.raises(ValidationError, match="labels required"):
            fold.target.eval_labels()


class TestBatches:
    @staticmethod
    def fold_with(n_s, n_t):
        rng = np.random.default_rng(0)
        n = n_s + n_t
        speakers = np.r_[np.arange(n_s) % 2, np.full(n_t, 2)]
        ds = Dataset(rng.normal(size=(n, 3)), np.arange(n) % 2, speakers, 2, 3)
        return make_fold(ds, 2)

    def test_even_split(self):
        assert len(make_batches(self.fold_with(64, 40), 32, 0, 1)) == 2

    def test_partial_last_batch(self):
        batches = make_batches(self.fold_with(70, 40), 32, 0, 1)
        assert [b.n_s for b in batches] == [32, 32, 6]
        assert [b.n_t for b in batches] == [32, 32, 32]

    def test_small_target_resampled(self):
        batches = make_batches(self.fold_with(40, 5), 32, 0, 1)
        assert all(b.n_t == 32 for b in batches)

    def test_every_source_sample_once(self):
        fold = self.fold_with(70, 40)
        rows = np.vstack([b.x_s for b in make_batches(fold, 32, 3, 2)])
        assert sorted(map(tuple, rows)) == sorted(map(tuple, fold.source.x))

    def test_deterministic_and_epoch_dependent(self):
        fold = self.fold_with(70, 40)
        a = make_batches(fold, 32, 3, 2)
        b = make_batches(fold, 32, 3, 2)
        c = make_batches(fold, 32, 3, 3)
        assert all(np.array_equal(x.x_s, y.x_s) and np.array_equal(x.x_t, y.x_t) for x, y in zip(a, b))
        assert not np.array_equal(a[0].x_s, c[0].x_s)

    def test_batch_size_contract(self):
        with pytest.raises(ContractError):
            make_batches(self.fold_with(10, 10), 1, 0, 1)


PINNED_DIGEST = "c2ca39fb2737798c1fa2b94c0e2e52bd3c279dc596a29784c8a49cf15820bde2"
