import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, contrastive_loss, rel_error
from spkboot.csl import CslTrainConfig, build_batch, cosine, csl_loss, train_csl
from spkboot.encoder import EncoderConfig, embed_segments
from spkboot.synthgen import AugmentConfig, SynthConfig, generate_dataset

MODES = ["negatives_only", "simclr"]


def batch_embeddings(seed, m=3, d=5):
    return np.random.default_rng(seed).standard_normal((m, 2, d))


class TestCosine:
    def test_self(self):
        v = np.array([0.3, -2.0, 5.0])
        assert cosine(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_antipodal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == -1.0

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            cosine(np.zeros(2), np.ones(2))


class TestLoss:
    def test_two_utterances_orthogonal(self):
        e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        z = np.array([[e1, e1], [e2, e2]])
        loss, _ = csl_loss(z, 1.0, "negatives_only")
        assert loss == pytest.approx(math.log(2) - 1, abs=1e-12)
        assert loss == pytest.approx(contrastive_loss(z, 1.0, False), abs=1e-12)

    @pytest.mark.parametrize("m,tau", [(2, 0.1), (3, 0.5), (5, 1.0), (8, 0.07)])
    def test_all_identical(self, m, tau):
        z = np.ones((m, 2, 4))
        loss, grad = csl_loss(z, tau, "negatives_only")
        assert loss == pytest.approx(math.log(2 * (m - 1)), abs=1e-9)
        assert loss == pytest.approx(contrastive_loss(z, tau, False), abs=1e-9)
        assert np.allclose(grad, 0.0, atol=1e-12)

    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_enumeration(self, mode, seed):
        z = batch_embeddings(seed, m=4)
        loss, _ = csl_loss(z, 0.3, mode)
        assert loss == pytest.approx(contrastive_loss(z, 0.3, mode == "simclr"), abs=1e-10)

    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_finite_differences(self, mode, seed):
        z = batch_embeddings(seed)
        _, grad = csl_loss(z, 0.5, mode)
        fd = central_difference(lambda x: csl_loss(x, 0.5, mode)[0], z)
        assert rel_error(grad, fd) < 1e-4

    def test_negative_loss_allowed(self):
        e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert csl_loss(np.array([[e1, e1], [e2, e2]]), 1.0)[0] < 0

    def test_errors(self):
        with pytest.raises(ValueError):
            csl_loss(np.ones((1, 2, 3)), 0.1)
        with pytest.raises(ValueError):
            csl_loss(np.ones((2, 3, 3)), 0.1)
        z = np.ones((2, 2, 3))
        z[1, 0] = 0
        with pytest.raises(ValueError):
            csl_loss(z, 0.1)
        with pytest.raises(ValueError):
            csl_loss(np.ones((2, 2, 3)), 0.1, "indicator")


class TestLossProperties:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.sampled_from(MODES))
    def test_scale_invariance(self, seed, c, mode):
        z = batch_embeddings(seed, m=4)
        assert csl_loss(c * z, 0.2, mode)[0] == pytest.approx(csl_loss(z, 0.2, mode)[0], abs=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(MODES))
    def test_permutation_invariance(self, seed, mode):
        z = batch_embeddings(seed, m=5)
        perm = np.random.default_rng(seed).permutation(5)
        assert csl_loss(z[perm], 0.2, mode)[0] == pytest.approx(csl_loss(z, 0.2, mode)[0], abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(MODES))
    def test_radial_gradient_zero(self, seed, mode):
        z = batch_embeddings(seed, m=4)
        _, g = csl_loss(z, 0.2, mode)
        unit = z / np.linalg.norm(z, axis=2, keepdims=True)
        assert np.abs(np.sum(g * unit, axis=2)).max() < 1e-6

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 2.0))
    def test_simclr_not_below_negatives_only(self, seed, tau):
        z = batch_embeddings(seed, m=4)
        assert csl_loss(z, tau, "simclr")[0] >= csl_loss(z, tau, "negatives_only")[0]


class TestBatch:
    def test_exact_m_uses_every_utterance(self, tiny_dataset, rng):
        cfg = CslTrainConfig(batch_size=len(tiny_dataset.manifest), segment_len_range=(4, 8))
        b = build_batch(tiny_dataset.manifest, tiny_dataset.features, cfg, rng)
        assert sorted(b.utt_ids) == sorted(tiny_dataset.manifest.utt_ids)
        assert len(b.segments) == 2 * cfg.batch_size

    def test_deterministic(self, tiny_dataset):
        cfg = CslTrainConfig(batch_size=4, segment_len_range=(4, 8))
        a = build_batch(tiny_dataset.manifest, tiny_dataset.features, cfg, np.random.default_rng(3))
        b = build_batch(tiny_dataset.manifest, tiny_dataset.features, cfg, np.random.default_rng(3))
        assert a.utt_ids == b.utt_ids
        assert all(np.array_equal(x, y) for x, y in zip(a.segments, b.segments))

    def test_too_few_utterances(self, tiny_dataset, rng):
        cfg = CslTrainConfig(batch_size=len(tiny_dataset.manifest) + 1)
        with pytest.raises(ValueError):
            build_batch(tiny_dataset.manifest, tiny_dataset.features, cfg, rng)

    def test_segments_are_augmented_crops(self, tiny_dataset, rng):
        cfg = CslTrainConfig(batch_size=3, segment_len_range=(5, 5),
                             augment=AugmentConfig(apply_prob=0.0))
        b = build_batch(tiny_dataset.manifest, tiny_dataset.features, cfg, rng)
        for i, utt in enumerate(b.utt_ids):
            full = tiny_dataset.features[utt]
            for seg in b.segments[2 * i:2 * i + 2]:
                assert seg.shape == (5, full.shape[1])
                assert any(np.array_equal(seg, full[s:s + 5]) for s in range(len(full) - 4))


class TestTraining:
    def test_zero_epochs_returns_init(self, tiny_dataset):
        enc = EncoderConfig(input_dim=6, hidden_dims=[8], embed_dim=4)
        cfg = CslTrainConfig(batch_size=4, epochs=0, segment_len_range=(4, 8), seed=2)
        res = train_csl(tiny_dataset.manifest, tiny_dataset.features, cfg, enc)
        assert res.log == []
        again = train_csl(tiny_dataset.manifest, tiny_dataset.features, cfg, enc)
        assert all(np.array_equal(res.params.tensors[k], again.params.tensors[k]) for k in res.params.tensors)
        assert all(np.all(t == 0) for k, t in res.params.tensors.items() if k.endswith("bias"))

    def test_log_and_determinism(self, tiny_dataset):
        enc = EncoderConfig(input_dim=6, hidden_dims=[8], embed_dim=4)
        cfg = CslTrainConfig(batch_size=8, epochs=2, segment_len_range=(4, 8), seed=2)
        a = train_csl(tiny_dataset.manifest, tiny_dataset.features, cfg, enc)
        b = train_csl(tiny_dataset.manifest, tiny_dataset.features, cfg, enc)
        assert len(a.log) == 2 * (len(tiny_dataset.manifest) // 8)
        assert [r["step"] for r in a.log] == list(range(1, len(a.log) + 1))
        assert set(a.log[0]) == {"step", "loss", "lr", "timestamp"}
        assert all(a.params.tensors[k].tobytes() == b.params.tensors[k].tobytes() for k in a.params.tensors)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            CslTrainConfig(temperature=0.0).validate()
        with pytest.raises(ValueError):
            CslTrainConfig(batch_size=1).validate()

    @pytest.mark.parametrize("seed", [1, 2, 3, 4])
    def test_positive_margin_after_50_steps(self, seed):
        cfg_data = SynthConfig(num_speakers=2, utts_per_speaker=16, feature_dim=8, frames_range=(20, 30),
                               session_noise_std=0.0, frame_noise_std=0.0, seed=seed)
        ds = generate_dataset(cfg_data)
        enc = EncoderConfig(input_dim=8, hidden_dims=[32], embed_dim=16)
        cfg = CslTrainConfig(batch_size=16, epochs=25, seed=seed)
        res = train_csl(ds.manifest, ds.features, cfg, enc)
        assert len(res.log) == 50
        rng = np.random.default_rng(0)
        pos, neg = [], []
        for _ in range(10):
            b = build_batch(ds.manifest, ds.features, cfg, rng)
            e = embed_segments(res.params, b.segments).reshape(16, 2, -1)
            u = e / np.linalg.norm(e, axis=2, keepdims=True)
            pos.extend(np.sum(u[:, 0] * u[:, 1], axis=1))
            flat = u.reshape(32, -1)
            utt = np.repeat(np.arange(16), 2)
            neg.extend((flat @ flat.T)[utt[:, None] != utt[None, :]])
        assert np.mean(pos) - np.mean(neg) >= 0.2
