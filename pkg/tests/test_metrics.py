import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import normalized_mutual_info_score

import oracles
from spkboot.dataio import Manifest, ManifestEntry, Trial
from spkboot.encoder import EncoderConfig, init_params
from spkboot.metrics import (
    DcfParams,
    ScoredTrials,
    eer,
    evaluate_scores,
    min_dcf,
    nmi,
    operating_points,
    score_embeddings,
    score_trials,
)


def random_trials(r: np.random.Generator) -> ScoredTrials:
    n_t = int(r.integers(1, 30))
    n_n = int(r.integers(1, 30))
    # Coarse rounding forces ties within and across classes.
    scores = np.round(r.standard_normal(n_t + n_n), int(r.integers(0, 3)))
    labels = np.array([True] * n_t + [False] * n_n)
    return ScoredTrials(labels, scores)


class TestNmi:
    def test_identical(self):
        assert nmi([0, 0, 1, 2, 2], [0, 0, 1, 2, 2]) == pytest.approx(1.0)

    def test_independent(self):
        assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-15)

    def test_two_by_two_hand_value(self):
        # Contingency table [[2, 0], [1, 1]] written out cell by cell.
        hu = math.log(2)
        hv = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        i = 0.5 * math.log(0.5 / (0.5 * 0.75)) + 0.25 * math.log(0.25 / (0.5 * 0.75)) \
            + 0.25 * math.log(0.25 / (0.5 * 0.25))
        expected = 2 * i / (hu + hv)
        assert nmi([0, 0, 1, 1], [0, 0, 0, 1]) == pytest.approx(expected, abs=1e-12)
        assert normalized_mutual_info_score([0, 0, 1, 1], [0, 0, 0, 1]) == pytest.approx(expected, abs=1e-12)

    def test_both_trivial(self):
        assert nmi([3, 3, 3], ["a", "a", "a"]) == 1.0

    def test_one_trivial(self):
        assert nmi([0, 0, 0, 0], [0, 1, 0, 1]) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            nmi([0, 1], [0])
        with pytest.raises(ValueError):
            nmi([], [])

    def test_string_labels(self):
        assert nmi(["a", "b", "a"], [1, 2, 1]) == pytest.approx(1.0)

    @settings(max_examples=200)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_sklearn(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 60))
        u = r.integers(0, int(r.integers(1, 6)), size=n)
        v = r.integers(0, int(r.integers(1, 6)), size=n)
        ref = normalized_mutual_info_score(u, v, average_method="arithmetic")
        assert nmi(u, v) == pytest.approx(ref, abs=1e-9)
        assert nmi(u, v) == pytest.approx(oracles.nmi(u.tolist(), v.tolist()), abs=1e-12)

    @settings(max_examples=200)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetry_relabeling_bounds(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 50))
        u = r.integers(0, 5, size=n)
        v = r.integers(0, 5, size=n)
        perm = r.permutation(10)
        assert nmi(u, v) == nmi(v, u)
        assert nmi(perm[u], v) == pytest.approx(nmi(u, v), abs=1e-12)
        assert 0.0 <= nmi(u, v) <= 1.0


class TestEer:
    def test_perfect(self):
        st_ = ScoredTrials([True, True, False, False], [1.0, 1.0, 0.0, 0.0])
        assert eer(st_)[0] == 0.0

    def test_inverted(self):
        st_ = ScoredTrials([False, False, True, True], [1.0, 1.0, 0.0, 0.0])
        assert eer(st_)[0] == 1.0

    def test_small_example(self):
        st_ = ScoredTrials([True, True, False, False], [0.9, 0.4, 0.6, 0.1])
        value, thr = eer(st_)
        assert value == pytest.approx(0.5)
        assert thr == pytest.approx(0.5)

    def test_requires_both_classes(self):
        with pytest.raises(ValueError):
            ScoredTrials([True, True], [0.1, 0.2])
        with pytest.raises(ValueError):
            ScoredTrials([True, False], [0.1, np.nan])

    def test_operating_points_shape(self):
        st_ = ScoredTrials([True, False, True], [0.2, 0.2, 0.7])
        pm, pf, thr = operating_points(st_)
        assert pm.tolist() == [0.0, 0.5, 1.0]
        assert pf.tolist() == [1.0, 0.0, 0.0]
        assert thr[0] == 0.2 and thr[1] == pytest.approx(0.45)

    @settings(max_examples=300)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_sweep_oracle(self, seed):
        st_ = random_trials(np.random.default_rng(seed))
        assert eer(st_)[0] == pytest.approx(oracles.eer(st_.labels.tolist(), st_.scores.tolist()), abs=1e-9)
        pm, pf, _ = operating_points(st_)
        ref = oracles.sweep(st_.labels.tolist(), st_.scores.tolist())
        assert np.allclose(pm, [p[1] for p in ref], atol=1e-12)
        assert np.allclose(pf, [p[2] for p in ref], atol=1e-12)

    @settings(max_examples=200)
    @given(st.integers(0, 2**32 - 1))
    def test_threshold_realises_error_rates(self, seed):
        st_ = random_trials(np.random.default_rng(seed))
        pm, pf, thr = operating_points(st_)
        tgt = st_.scores[st_.labels]
        non = st_.scores[~st_.labels]
        for m, f, t in zip(pm, pf, thr):
            assert np.mean(tgt < t) == m
            assert np.mean(non >= t) == f


class TestMinDcf:
    def test_perfect(self):
        st_ = ScoredTrials([True, False], [1.0, 0.0])
        assert min_dcf(st_)[0] == 0.0

    def test_accept_all_cost(self):
        pm, pf = 0.0, 1.0
        params = DcfParams()
        raw = params.c_miss * pm * params.p_target + params.c_fa * pf * (1 - params.p_target)
        assert raw == pytest.approx(0.95)
        assert raw / 0.05 == pytest.approx(19.0)
        # With every score identical only accept-all and reject-all exist; reject-all costs 1.
        st_ = ScoredTrials([True, False], [0.5, 0.5])
        pm_, pf_, _ = operating_points(st_)
        from spkboot.metrics import dcf_curve
        assert dcf_curve(pm_, pf_, params)[0] == pytest.approx(19.0)
        assert dcf_curve(pm_, pf_, DcfParams(normalized=False))[0] == pytest.approx(0.95)
        assert min_dcf(st_)[0] == pytest.approx(1.0)

    def test_ties_go_to_lowest_threshold(self):
        st_ = ScoredTrials([True, True, False, False], [3.0, 4.0, 1.0, 2.0])
        value, thr = min_dcf(st_)
        assert value == 0.0
        assert thr == pytest.approx(2.5)

    def test_bad_params(self):
        st_ = ScoredTrials([True, False], [1.0, 0.0])
        with pytest.raises(ValueError):
            min_dcf(st_, DcfParams(p_target=1.0))

    @settings(max_examples=300)
    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_matches_exhaustive_oracle(self, seed, normalized):
        st_ = random_trials(np.random.default_rng(seed))
        ref = oracles.min_dcf(st_.labels.tolist(), st_.scores.tolist(), normalized=normalized)
        assert min_dcf(st_, DcfParams(normalized=normalized))[0] == pytest.approx(ref, abs=1e-9)
        if normalized:
            assert 0.0 <= ref <= 1.0

    @settings(max_examples=200)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["exp", "cube", "affine", "tanh"]))
    def test_monotone_transform_invariance(self, seed, kind):
        st_ = random_trials(np.random.default_rng(seed))
        f = {"exp": np.exp, "cube": lambda s: s ** 3, "affine": lambda s: 7.0 * s - 3.0,
             "tanh": lambda s: np.tanh(s / 4.0)}[kind]
        moved = ScoredTrials(st_.labels, f(st_.scores))
        assert eer(moved)[0] == pytest.approx(eer(st_)[0], abs=1e-12)
        assert min_dcf(moved)[0] == pytest.approx(min_dcf(st_)[0], abs=1e-12)


class TestScoring:
    def _setup(self):
        r = np.random.default_rng(0)
        feats = {f"u{i}": r.standard_normal((6, 3)) for i in range(4)}
        manifest = Manifest([ManifestEntry(u, u, f"{u}.feat") for u in feats])
        params = init_params(EncoderConfig(input_dim=3, hidden_dims=[5], embed_dim=4), 0)
        return params, manifest, feats

    def test_self_trial_and_count(self):
        params, manifest, feats = self._setup()
        trials = [Trial("target", "u0", "u0"), Trial("nontarget", "u0", "u1"), Trial("target", "u2", "u3")]
        st_ = score_trials(params, manifest, feats, trials)
        assert len(st_.scores) == 3
        assert st_.scores[0] == pytest.approx(1.0)

    def test_unknown_id(self):
        params, manifest, feats = self._setup()
        with pytest.raises(KeyError):
            score_trials(params, manifest, feats, [Trial("target", "u0", "zz"), Trial("nontarget", "u0", "u1")])

    def test_scale_invariance(self):
        r = np.random.default_rng(1)
        emb = {u: r.standard_normal(4) for u in "abc"}
        trials = [Trial("target", "a", "b"), Trial("nontarget", "a", "c")]
        base = score_embeddings(emb, trials).scores
        scaled = score_embeddings({u: 3 * v for u, v in emb.items()}, trials).scores
        assert np.allclose(base, scaled)

    def test_evaluate_keys(self):
        st_ = ScoredTrials([True, False, True], [0.9, 0.1, 0.3])
        out = evaluate_scores(st_)
        assert set(out) == {"eer", "eer_threshold", "min_dcf", "dcf_threshold", "n_target", "n_nontarget"}
        assert out["n_target"] == 2 and out["n_nontarget"] == 1
