import math

import numpy as np
import pytest

from comprank.decomp import (
    CPFactors,
    DecomposeConfig,
    cp_reconstruct,
    decompose_sgd,
    init_factors,
)
from comprank.search import (
    InvalidBoundsError,
    RankCandidate,
    SearchConfig,
    SuperLayer,
    alpha_gradient,
    build_superlayer,
    final_decompose,
    layer_loss_parts,
    rank_loss,
    refine_search_space,
    rss_function,
    run_search,
    select_rank,
    total_loss,
    update_alphas,
    update_weights,
)
from comprank.tensors import frobenius_norm_sq
from util import fd_grad, planted_cp_kernel, planted_diag_kernel, rel_norm_err

# independently computed with mpmath (30 digits): 150^0.6
POW_150_06 = 20.2141160853993


def _random_superlayer(seed, ranks=(1, 2, 3), shape=(4, 4, 3, 3)):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal(shape)
    cands = []
    for r in ranks:
        factors = CPFactors([rng.standard_normal((d, r)) * 0.4 for d in shape])
        cands.append(RankCandidate(rank=r, factors=factors,
                                   alpha=float(rng.standard_normal() * 0.3)))
    return SuperLayer(target, cands)


class TestRSSFunction:
    def test_paper_interval_100_800(self):
        sets = rss_function(100, 800, 100, 1)
        assert sets[0].ranks == [100, 200, 300, 400, 500, 600, 700, 800]

    def test_degenerate_interval(self):
        sets = rss_function(5, 5, 1, 2)
        assert all(s.ranks == [5] for s in sets)

    def test_fine_interval_150_250(self):
        sets = rss_function(150, 250, 10, 1)
        assert len(sets[0].ranks) == 11
        assert sets[0].ranks[0] == 150 and sets[0].ranks[-1] == 250

    def test_per_layer_bounds(self):
        sets = rss_function([10, 20], [30, 40], 10, 2)
        assert sets[0].ranks == [10, 20, 30]
        assert sets[1].ranks == [20, 30, 40]

    def test_invalid_bounds(self):
        with pytest.raises(InvalidBoundsError):
            rss_function(10, 5, 1, 1)
        with pytest.raises(InvalidBoundsError):
            rss_function(10, 21, 10, 1)
        with pytest.raises(InvalidBoundsError):
            rss_function(10, 20, 0, 1)
        with pytest.raises(InvalidBoundsError):
            rss_function([10, 20], [30], 10, 2)


class TestRankLoss:
    def test_single_candidate_beta_one(self):
        assert rank_loss([(np.array([1.0]), np.array([100.0]))], 1.0) == 100.0

    def test_uniform_two_candidates_beta_one(self):
        probs = np.array([0.5, 0.5])
        assert rank_loss([(probs, np.array([100.0, 200.0]))], 1.0) == 150.0

    def test_uniform_two_candidates_beta_06(self):
        probs = np.array([0.5, 0.5])
        got = rank_loss([(probs, np.array([100.0, 200.0]))], 0.6)
        assert abs(got - POW_150_06) <= 1e-10

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            rank_loss([(np.array([0.5, 0.6]), np.array([1.0, 2.0]))], 1.0)


class TestTotalLoss:
    def test_exact_candidates_gamma_zero(self):
        rng = np.random.default_rng(0)
        mats = [rng.standard_normal((4, 2)), rng.standard_normal((3, 2)),
                rng.standard_normal((3, 2)), rng.standard_normal((2, 2))]
        target = cp_reconstruct(CPFactors(mats))
        cands = [RankCandidate(rank=2, factors=CPFactors([m.copy() for m in mats])),
                 RankCandidate(rank=2, factors=CPFactors([m.copy() for m in mats]))]
        sl = SuperLayer(target, cands)
        total, breakdown = total_loss([sl], SearchConfig(gamma=0.0))
        assert abs(total) <= 1e-20
        assert breakdown[0]["fit"] <= 1e-20

    def test_single_exact_candidate_closed_form(self):
        rng = np.random.default_rng(1)
        mats = [rng.standard_normal((4, 32)), rng.standard_normal((4, 32)),
                rng.standard_normal((3, 32)), rng.standard_normal((3, 32))]
        target = cp_reconstruct(CPFactors(mats))
        sl = SuperLayer(target, [RankCandidate(rank=32, factors=CPFactors(mats))])
        total, _ = total_loss([sl], SearchConfig(gamma=0.2, beta=0.6))
        # 0.2 * 32^0.6 = 0.2 * 2^3 = 1.6 exactly
        assert abs(total - 1.6) <= 1e-12

    def test_matches_direct_recomputation(self):
        config = SearchConfig(gamma=0.37, beta=0.8)
        sls = [_random_superlayer(2), _random_superlayer(3, ranks=(2, 4))]
        total, _ = total_loss(sls, config)
        brute = 0.0
        for sl in sls:
            alphas = np.array([c.alpha for c in sl.candidates])
            e = np.exp(alphas - alphas.max())
            p = e / e.sum()
            mix = np.zeros_like(np.asarray(sl.target))
            for prob, cand in zip(p, sl.candidates):
                mix = mix + prob * cp_reconstruct(cand.factors)
            fit = float(np.sum((np.asarray(sl.target) - mix) ** 2))
            expected = float(sum(prob * c.rank for prob, c in zip(p, sl.candidates)))
            brute += fit + config.gamma * expected ** config.beta
        assert abs(total - brute) <= 1e-10 * max(1.0, abs(brute))


class TestUpdateWeights:
    def test_rank_term_does_not_move_factors(self):
        a = _random_superlayer(4)
        b = _random_superlayer(4)
        cfg_a = SearchConfig(gamma=0.0, beta=0.6, lr_weights=0.05, lr_schedule=False)
        cfg_b = SearchConfig(gamma=5.0, beta=0.6, lr_weights=0.05, lr_schedule=False)
        update_weights(a, cfg_a)
        update_weights(b, cfg_b)
        for ca, cb in zip(a.candidates, b.candidates):
            for ma, mb in zip(ca.factors.factors, cb.factors.factors):
                assert np.array_equal(ma, mb)

    def test_single_candidate_matches_decompose_step(self):
        w = planted_cp_kernel((5, 4, 3, 3), 2, seed=5, norm=1.0)
        rng = np.random.default_rng(77)
        factors = init_factors(w, 2, rng)
        mirror = CPFactors([m.copy() for m in factors.factors])
        sl = SuperLayer(w, [RankCandidate(rank=2, factors=factors)])
        cfg = SearchConfig(gamma=0.0, lr_weights=0.1, momentum=0.9, lr_schedule=False)
        update_weights(sl, cfg)

        bufs = [np.zeros_like(m) for m in mirror.factors]
        from comprank.decomp import mixture_weight_step
        mixture_weight_step(w, [mirror], np.ones(1), np.ones(1), [bufs], 0.1, 0.9,
                            0.0, 1.0)
        for got, want in zip(sl.candidates[0].factors.factors, mirror.factors):
            assert np.array_equal(got, want)

    def test_factor_gradient_matches_fd(self):
        sl = _random_superlayer(6)
        cfg = SearchConfig(gamma=0.3, beta=0.6)

        def loss():
            return total_loss([sl], cfg)[0]

        probs = sl.probabilities()
        from comprank.decomp import factor_grads
        _, _, _, resid, _, _ = layer_loss_parts(sl, cfg.gamma, cfg.beta)
        for c, p in zip(sl.candidates, probs):
            grads = factor_grads(c.factors, (2.0 * p) * resid)
            for mat, grad in zip(c.factors.factors, grads):
                approx = fd_grad(loss, mat)
                assert rel_norm_err(grad, approx) <= 1e-4


class TestUpdateAlphas:
    def test_identical_candidates_stay_uniform(self):
        rng = np.random.default_rng(8)
        target = rng.standard_normal((4, 3, 3, 3))
        mats = [rng.standard_normal((d, 2)) * 0.3 for d in target.shape]
        cands = [RankCandidate(rank=7, factors=CPFactors([m.copy() for m in mats])),
                 RankCandidate(rank=7, factors=CPFactors([m.copy() for m in mats]))]
        sl = SuperLayer(target, cands)
        cfg = SearchConfig(gamma=0.5, beta=0.6, lr_alpha=0.1, lr_schedule=False)
        for _ in range(5):
            update_alphas(sl, cfg)
        probs = sl.probabilities()
        assert abs(probs[0] - 0.5) <= 1e-12

    def test_lower_rank_gains_probability_on_tied_fit(self):
        rng = np.random.default_rng(9)
        target = rng.standard_normal((4, 3, 3, 3))
        mats = [rng.standard_normal((d, 2)) * 0.3 for d in target.shape]
        cands = [RankCandidate(rank=10, factors=CPFactors([m.copy() for m in mats])),
                 RankCandidate(rank=100, factors=CPFactors([m.copy() for m in mats]))]
        sl = SuperLayer(target, cands)
        cfg = SearchConfig(gamma=1.0, beta=0.6, lr_alpha=0.05, lr_schedule=False)
        update_alphas(sl, cfg)
        probs = sl.probabilities()
        assert probs[0] > 0.5

    def test_alpha_gradient_matches_fd(self):
        sl = _random_superlayer(10)
        cfg = SearchConfig(gamma=0.4, beta=0.6)
        grad, _ = alpha_gradient(sl, cfg.gamma, cfg.beta)
        alphas = np.array([c.alpha for c in sl.candidates])

        def loss():
            for c, a in zip(sl.candidates, alphas):
                c.alpha = float(a)
            return total_loss([sl], cfg)[0]

        approx = fd_grad(loss, alphas)
        loss()  # restore
        assert rel_norm_err(grad, approx) <= 1e-4

    def test_probabilities_sum_to_one_after_updates(self):
        sl = _random_superlayer(11)
        cfg = SearchConfig(gamma=0.2, beta=0.6, lr_weights=0.02, lr_alpha=0.05,
                           lr_schedule=False)
        for _ in range(20):
            update_weights(sl, cfg)
            update_alphas(sl, cfg)
            assert abs(sl.probabilities().sum() - 1.0) <= 1e-12

    def test_loss_dominates_rank_term(self):
        sl = _random_superlayer(12)
        cfg = SearchConfig(gamma=0.7, beta=0.9)
        total, breakdown = total_loss([sl], cfg)
        rank_part = sum(row["rank_term"] for row in breakdown)
        assert total >= rank_part >= 0.0


class TestSelectRank:
    def test_argmax(self):
        sl = _random_superlayer(13, ranks=(10, 20, 30))
        for c, a in zip(sl.candidates, (0.1, 0.9, 0.3)):
            c.alpha = a
        assert select_rank(sl) == 20

    def test_tie_breaks_to_smallest(self):
        sl = _random_superlayer(14, ranks=(10, 20, 30))
        for c in sl.candidates:
            c.alpha = 0.25
        assert select_rank(sl) == 10

    def test_shift_invariance(self):
        sl = _random_superlayer(15, ranks=(5, 9, 13))
        for c, a in zip(sl.candidates, (0.3, -0.2, 0.9)):
            c.alpha = a
        before = select_rank(sl)
        for c in sl.candidates:
            c.alpha += 123.45
        assert select_rank(sl) == before


class TestRefineSearchSpace:
    def test_figure_trace_step_100(self):
        bounds, step = refine_search_space([200], 100)
        assert bounds == [(150, 250)] and step == 10

    def test_figure_trace_step_10(self):
        bounds, step = refine_search_space([240], 10)
        assert bounds == [(235, 245)] and step == 1

    def test_clamps_near_lower_cap(self):
        bounds, step = refine_search_space([3], 10)
        assert bounds == [(1, 8)] and step == 1

    def test_respects_caps_and_floors(self):
        bounds, step = refine_search_space([98], 10, caps=[100], floors=[90])
        assert bounds == [(93, 100)] and step == 1

    def test_requires_step_above_one(self):
        with pytest.raises(InvalidBoundsError):
            refine_search_space([10], 1)


class TestRunSearch:
    def test_single_rank_space_returns_it(self):
        kernels = [planted_cp_kernel((6, 4, 3, 3), 2, seed=20, norm=1.0)]
        cfg = SearchConfig(iterations_per_phase=5, warmup_iterations=10,
                           lr_weights=0.01, seed=0)
        report = run_search(kernels, 7, 7, 1, cfg, "cp")
        assert report.selected_ranks == [7]
        assert len(report.layers[0].phases) == 1

    def test_identical_layers_identical_selections(self):
        w = planted_cp_kernel((6, 4, 3, 3), 2, seed=21, norm=1.0)
        cfg = SearchConfig(iterations_per_phase=30, warmup_iterations=100,
                           lr_weights=0.05, lr_alpha=0.05, seed=3)
        report = run_search([w, w.copy()], 1, 5, 2, cfg, "cp")
        assert report.selected_ranks[0] == report.selected_ranks[1]
        a, b = report.layers
        for pa, pb in zip(a.phases, b.phases):
            assert np.array_equal(pa.loss_total, pb.loss_total)

    def test_thread_count_does_not_change_results(self):
        kernels = [planted_cp_kernel((5, 4, 3, 3), 2, seed=22 + i, norm=1.0)
                   for i in range(3)]
        cfg = SearchConfig(iterations_per_phase=20, warmup_iterations=50,
                           lr_weights=0.05, seed=1)
        serial = run_search(kernels, 1, 5, 2, cfg, "cp", threads=1)
        threaded = run_search(kernels, 1, 5, 2, cfg, "cp", threads=3)
        assert serial.selected_ranks == threaded.selected_ranks
        for la, lb in zip(serial.layers, threaded.layers):
            for pa, pb in zip(la.phases, lb.phases):
                assert np.array_equal(pa.loss_total, pb.loss_total)

    def test_selected_ranks_stay_in_initial_bounds(self):
        kernels = [planted_cp_kernel((6, 5, 3, 3), 3, seed=25, norm=4.0)]
        cfg = SearchConfig(iterations_per_phase=40, warmup_iterations=120,
                           lr_weights=0.02, lr_alpha=0.1, seed=2)
        report = run_search(kernels, 2, 10, 2, cfg, "cp")
        layer = report.layers[0]
        assert layer.initial_lower <= report.selected_ranks[0] <= layer.initial_upper
        for phase in layer.phases:
            assert layer.initial_lower <= phase.lower
            assert phase.upper <= layer.initial_upper

    def test_gamma_zero_single_candidate_trace_matches_decompose_bitwise(self):
        w = planted_cp_kernel((6, 4, 3, 3), 2, seed=26, norm=1.0)
        cfg = SearchConfig(gamma=0.0, lr_weights=0.07, momentum=0.9,
                           iterations_per_phase=60, warmup_iterations=0,
                           lr_schedule=False, seed=5)
        report = run_search([w], 3, 3, 1, cfg, "cp")
        trace = report.layers[0].phases[0].loss_total

        dcfg = DecomposeConfig(learning_rate=0.07, iterations=60, momentum=0.9,
                               seed=[5, 0, 0])
        res = decompose_sgd(w, 3, dcfg)
        assert np.array_equal(trace, res.loss_history[:-1])

    def test_tt_search_runs(self):
        kernels = [planted_cp_kernel((4, 4, 3, 3), 2, seed=27, norm=1.0)]
        cfg = SearchConfig(iterations_per_phase=15, warmup_iterations=40,
                           lr_weights=0.05, seed=0)
        report = run_search(kernels, 1, 3, 2, cfg, "tt")
        assert report.decomp == "tt"
        assert 1 <= report.selected_ranks[0] <= 3

    def test_bounds_clamped_to_layer_cap(self):
        # cap for (4,4,2,2) CP is 4*2*2 = 16 < requested ub
        kernels = [planted_cp_kernel((4, 4, 2, 2), 2, seed=28, norm=1.0)]
        cfg = SearchConfig(iterations_per_phase=10, warmup_iterations=20,
                           lr_weights=0.05, seed=0)
        report = run_search(kernels, 10, 100, 10, cfg, "cp")
        assert report.layers[0].initial_upper <= 16

    def test_empty_model_rejected(self):
        with pytest.raises(InvalidBoundsError):
            run_search([], 1, 5, 1, SearchConfig())


class TestMonotonePressure:
    def test_larger_gamma_never_selects_larger_rank_on_tied_errors(self):
        rng = np.random.default_rng(30)
        target = rng.standard_normal((4, 4, 3, 3))
        mats = [rng.standard_normal((d, 3)) * 0.3 for d in target.shape]
        selected = []
        for gamma in (0.01, 0.1, 1.0, 10.0):
            cands = [RankCandidate(rank=r, factors=CPFactors([m.copy() for m in mats]))
                     for r in (5, 15, 45)]
            sl = SuperLayer(target, cands)
            cfg = SearchConfig(gamma=gamma, beta=0.6, lr_alpha=0.05,
                               lr_schedule=False)
            for _ in range(50):
                update_alphas(sl, cfg)
            selected.append(select_rank(sl))
        assert all(a >= b for a, b in zip(selected, selected[1:]))


class TestFinalDecompose:
    def test_planted_rank(self):
        kernels = [planted_cp_kernel((8, 8, 3, 3), 4, seed=31, norm=1.0)]
        _, errs = final_decompose(kernels, [4], DecomposeConfig(iterations=2000, seed=0))
        assert errs[0] <= 1e-2

    def test_rank_cap_overcomplete(self):
        rng = np.random.default_rng(32)
        w = rng.standard_normal((8, 8, 3, 3))
        w /= np.sqrt(frobenius_norm_sq(w))
        _, errs = final_decompose([w], [72], DecomposeConfig(iterations=2000, seed=0))
        assert errs[0] <= 1e-3

    def test_zero_kernel(self):
        _, errs = final_decompose([np.zeros((4, 4, 3, 3))], [2],
                                  DecomposeConfig(iterations=5, seed=0))
        assert errs[0] == 0.0

    def test_restarts_cannot_hurt(self):
        w = planted_diag_kernel(8, 2, 2, 8, seed=33, norm=3.0)
        cfg = DecomposeConfig(learning_rate=0.02, iterations=800, seed=1)
        _, one = final_decompose([w], [8], cfg, restarts=1)
        _, three = final_decompose([w], [8], cfg, restarts=3)
        assert three[0] <= one[0] + 1e-15

    def test_layer_count_mismatch(self):
        with pytest.raises(ValueError):
            final_decompose([np.zeros((2, 2, 2, 2))], [1, 2], DecomposeConfig())


class TestSuperLayerInvariants:
    def test_target_is_frozen(self):
        sl = _random_superlayer(34)
        with pytest.raises(ValueError):
            np.asarray(sl.target)[0, 0, 0, 0] = 1.0

    def test_build_superlayer_warmup_improves_fit(self):
        w = planted_cp_kernel((6, 5, 3, 3), 3, seed=35, norm=1.0)
        cold = build_superlayer(w, [3], "cp",
                                SearchConfig(warmup_iterations=0), 0)
        warm = build_superlayer(w, [3], "cp",
                                SearchConfig(warmup_iterations=400, lr_weights=0.05),
                                0)
        err_cold = rel_norm_err(cp_reconstruct(cold.candidates[0].factors), w)
        err_warm = rel_norm_err(cp_reconstruct(warm.candidates[0].factors), w)
        assert err_warm < err_cold
