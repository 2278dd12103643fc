import itertools
import math

import numpy as np
import pytest

from asrprobe import ctc, nn
from asrprobe.errors import ConfigError, NoAlignmentError, UndefinedReferenceError


def brute_force_ctc(logits, target):
    """[ORACLE] -log sum over all alignment paths, by explicit enumeration."""
    T, V = logits.shape
    m = logits.max(axis=1, keepdims=True)
    logp = logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
    total = -math.inf
    for path in itertools.product(range(V), repeat=T):
        collapsed = []
        prev = None
        for s in path:
            if s != prev:
                if s != ctc.BLANK:
                    collapsed.append(s)
            prev = s
        if collapsed == list(target):
            lp = sum(logp[t, s] for t, s in enumerate(path))
            total = np.logaddexp(total, lp)
    return -total


class TestCtcHandCases:
    def test_single_frame_single_label(self):
        # [DERIVED] equal logits over {blank, a}: P(path "a") = 0.5
        logits = np.zeros((1, 2))
        res = ctc.ctc_loss(logits, [1])
        assert abs(res.loss - (-math.log(0.5))) < 1e-12

    def test_two_frames_one_label(self):
        # [DERIVED] paths {a-, -a, aa} of prob 1/4 each -> 3/4
        logits = np.zeros((2, 2))
        res = ctc.ctc_loss(logits, [1])
        assert abs(res.loss - (-math.log(0.75))) < 1e-12

    def test_repeat_needs_blank(self):
        # [DERIVED] "aa" over 3 frames, uniform over {blank,a}: only a-a -> 1/8
        logits = np.zeros((3, 2))
        res = ctc.ctc_loss(logits, [1, 1])
        assert abs(res.loss - (-math.log(1 / 8))) < 1e-12

    def test_infeasible_raises(self):
        with pytest.raises(NoAlignmentError):
            ctc.ctc_loss(np.zeros((2, 2)), [1, 1])  # needs >= 3 frames

    def test_empty_target_rejected(self):
        with pytest.raises(ConfigError):
            ctc.ctc_loss(np.zeros((2, 2)), [])

    def test_out_of_range_target(self):
        with pytest.raises(ConfigError):
            ctc.ctc_loss(np.zeros((2, 2)), [5])

    def test_min_frames(self):
        assert ctc.min_frames([1, 2, 3]) == 3
        assert ctc.min_frames([1, 1]) == 3
        assert ctc.min_frames([1, 1, 1]) == 5


class TestCtcOracle:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 6))
        V = int(rng.integers(2, 4))
        L = int(rng.integers(1, 4))
        target = rng.integers(1, V, size=L).tolist()
        logits = rng.standard_normal((T, V)) * 2
        if T < ctc.min_frames(target):
            with pytest.raises(NoAlignmentError):
                ctc.ctc_loss(logits, target)
            return
        res = ctc.ctc_loss(logits, target)
        assert abs(res.loss - brute_force_ctc(logits, target)) < 1e-10

    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_vs_finite_difference(self, seed):
        rng = np.random.default_rng(100 + seed)
        logits = rng.standard_normal((5, 3))
        target = [1, 2]
        res = ctc.ctc_loss(logits, target)
        num = nn.finite_difference(lambda z: ctc.ctc_loss(z, target).loss, logits)
        denom = max(np.max(np.abs(num)), 1e-12)
        assert np.max(np.abs(res.grad - num)) / denom < 1e-6


class TestGreedyDecode:
    def test_collapse_and_deblank(self):
        # frame-wise argmax sequence: a a blank a b b -> a a b
        logits = np.full((6, 3), -10.0)
        for t, s in enumerate([1, 1, 0, 1, 2, 2]):
            logits[t, s] = 10.0
        assert ctc.greedy_decode(logits) == [1, 1, 2]

    def test_all_blank(self):
        logits = np.zeros((4, 3))
        logits[:, 0] = 10.0
        assert ctc.greedy_decode(logits) == []


class TestWer:
    def test_exact_match(self):
        r = ctc.edit_distance_wer(["a", "b"], ["a", "b"])
        assert r.wer == 0.0
        assert (r.substitutions, r.deletions, r.insertions) == (0, 0, 0)

    def test_counts(self):
        # [DERIVED] ref "a b c", hyp "a x c d": 1 sub + 1 ins over 3 -> 2/3
        r = ctc.edit_distance_wer(["a", "b", "c"], ["a", "x", "c", "d"])
        assert (r.substitutions, r.deletions, r.insertions) == (1, 0, 1)
        assert abs(r.wer - 2 / 3) < 1e-12

    def test_empty_hyp_all_deletions(self):
        r = ctc.edit_distance_wer(["a", "b"], [])
        assert r.deletions == 2
        assert r.wer == 1.0

    def test_empty_ref_rejected(self):
        with pytest.raises(UndefinedReferenceError):
            ctc.edit_distance_wer([], ["a"])
