import itertools
import math

import numpy as np
import pytest

from batch_sampler import BatchPlan
from core_math import EmbeddingBatch, grad_check
from definitions import LOSS_DEFAULTS, SINGLE_MODEL_LOSS_NAMES
from errors import ConfigError, DomainError, GuardError
from losses.cluster_losses import struct_clust_loss
from losses.index_sets import (AngularParams, EpisodeGroup, MarginLossParams,
                               PairIndexSet, RankedListParams,
                               StructClustParams, TripletIndexSet)
from losses.loss_registry import (check_compatible, evaluate_loss,
                                  loss_params, proxy_bank)
from losses.pair_losses import (lifted_struct_loss, margin_loss,
                                ranked_list_loss, triplet_loss)
from losses.proxy_losses import (ProxyBank, proxy_nca_loss,
                                 proxy_softmax_loss, proxy_triplet_loss)
from losses.softmax_losses import angular_loss, npairs_loss, prototypical_loss
from verification import brute_force_objective, make_loss_case


def _line(*points, labels):
    return EmbeddingBatch(np.array(points, dtype=float)[:, None], labels)


class TestTripletLoss:

    def test_satisfied_margin(self):
        batch = _line(0.0, 1.0, 3.0, labels=[0, 0, 1])
        ret = triplet_loss(batch, TripletIndexSet([(0, 1, 2)]), 0.5,
                           "euclidean", normalize=False)
        assert ret.value == 0.0
        np.testing.assert_array_equal(ret.grad_embeddings, 0.0)

    def test_violated_margin(self):
        batch = _line(0.0, 1.0, 1.2, labels=[0, 0, 1])
        ret = triplet_loss(batch, TripletIndexSet([(0, 1, 2)]), 0.5,
                           "euclidean", normalize=False)
        assert ret.value == pytest.approx(0.3)

    def test_gradient(self):
        batch = _line(0.0, 1.0, 1.2, labels=[0, 0, 1])
        triplets = TripletIndexSet([(0, 1, 2)])
        report = grad_check(
            lambda b, p: triplet_loss(b, triplets, 0.5, "euclidean",
                                      normalize=False), batch)
        assert report.passed

    def test_empty_triplets(self):
        batch = _line(0.0, 1.0, labels=[0, 1])
        with pytest.raises(DomainError):
            triplet_loss(batch, TripletIndexSet([]))

    def test_invalid_triplet(self):
        batch = _line(0.0, 1.0, 2.0, labels=[0, 1, 1])
        with pytest.raises(DomainError):
            triplet_loss(batch, TripletIndexSet([(0, 1, 2)]))


class TestLiftedStructLoss:

    def test_by_hand(self):
        batch = _line(0.0, 0.2, -1.0, labels=[0, 0, 1])
        pairs = PairIndexSet([(0, 1)], [(0, 2)])
        ret = lifted_struct_loss(batch, pairs, 1.0)
        assert ret.value == pytest.approx(0.02)

    def test_separated_classes(self):
        batch = _line(0.0, 0.0, 100.0, labels=[0, 0, 1])
        pairs = PairIndexSet([(0, 1)], [(0, 2), (1, 2)])
        assert lifted_struct_loss(batch, pairs, 1.0).value \
            == pytest.approx(0.0, abs=1e-12)

    def test_no_negatives(self):
        batch = _line(0.0, 0.2, 1.0, labels=[0, 0, 1])
        with pytest.raises(DomainError):
            lifted_struct_loss(batch, PairIndexSet([(0, 1)], []))

    def test_gradient(self, generator):
        labels = np.repeat(np.arange(3), 4)
        batch = EmbeddingBatch(generator.standard_normal((12, 4)), labels)
        upper = [(i, j) for i in range(12) for j in range(i + 1, 12)]
        same = [labels[i] == labels[j] for i, j in upper]
        pairs = PairIndexSet([e for e, s in zip(upper, same) if s],
                             [e for e, s in zip(upper, same) if not s])
        report = grad_check(lambda b, p: lifted_struct_loss(b, pairs, 1.0),
                            batch)
        assert report.passed


class TestNpairsLoss:

    def test_equal_similarities(self):
        batch = EmbeddingBatch(np.ones((4, 2)), [0, 0, 1, 1])
        plan = BatchPlan("npairs", npairs_layout=[(0, 1), (2, 3)])
        ret = npairs_loss(batch, plan, l2_reg=0.0)
        assert ret.value == pytest.approx(math.log(2.0))

    def test_far_negatives(self):
        x = [[10.0, 0.0], [10.0, 0.0], [0.0, 10.0], [0.0, 10.0]]
        batch = EmbeddingBatch(x, [0, 0, 1, 1])
        plan = BatchPlan("npairs", npairs_layout=[(0, 1), (2, 3)])
        assert npairs_loss(batch, plan, l2_reg=0.0).value < 1e-40

    def test_wrong_shape(self):
        batch = EmbeddingBatch(np.ones((3, 2)), [0, 0, 1])
        plan = BatchPlan("npairs", npairs_layout=[(0, 1)])
        with pytest.raises(DomainError):
            npairs_loss(batch, plan)


class TestAngularLoss:

    def test_by_hand(self):
        x = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
        batch = EmbeddingBatch(x, [0, 0, 1, 1])
        plan = BatchPlan("npairs", npairs_layout=[(0, 1), (2, 3)])
        ret = angular_loss(batch, plan, AngularParams(45.0))
        assert ret.value == pytest.approx(math.log1p(math.exp(-4.0)))

    @pytest.mark.parametrize("alpha", [0.0, 90.0, -5.0])
    def test_alpha_range(self, alpha):
        with pytest.raises(DomainError):
            AngularParams(alpha)

    def test_combined_adds_weighted_term(self, generator):
        batch = EmbeddingBatch(generator.standard_normal((6, 3)),
                               [0, 0, 1, 1, 2, 2])
        plan = BatchPlan("npairs", npairs_layout=[(0, 1), (2, 3), (4, 5)])
        alone = angular_loss(batch, plan)
        combined = angular_loss(batch, plan, combine_npairs=True,
                                npairs_weight=2.0)
        npairs = npairs_loss(batch, plan, l2_reg=0.0, normalize=True)
        assert combined.value == pytest.approx(npairs.value
                                               + 2.0 * alone.value)


class TestMarginLoss:

    def _params(self):
        return MarginLossParams(np.full(2, 1.2), 0.2)

    def test_positive_on_boundary(self):
        batch = _line(0.0, 1.0, labels=[0, 0])
        ret = margin_loss(batch, PairIndexSet([(0, 1)], []), self._params(),
                          normalize=False)
        assert ret.value == pytest.approx(0.0, abs=1e-12)

    def test_negative_pair(self):
        batch = _line(0.0, 1.0, labels=[0, 1])
        ret = margin_loss(batch, PairIndexSet([], [(0, 1)]), self._params(),
                          normalize=False)
        assert ret.value == pytest.approx(0.4)
        # Raising beta of class 0 pushes the negative pair harder
        np.testing.assert_allclose(ret.grad_params["beta"], [1.0, 0.0])

    def test_missing_beta(self):
        batch = _line(0.0, 1.0, labels=[0, 5])
        with pytest.raises(DomainError, match="class 5"):
            margin_loss(batch, PairIndexSet([], [(0, 1)]), self._params())


class TestRankedListLoss:

    def test_boundaries(self):
        params = RankedListParams(alpha=1.2, m=0.4, temperature=0.0)
        batch = _line(0.0, 0.8, 2.0, labels=[0, 0, 1])
        # positive at alpha - m, negatives beyond alpha
        assert ranked_list_loss(batch, params, normalize=False).value \
            == pytest.approx(0.0, abs=1e-12)

    def test_negative_inside(self):
        params = RankedListParams(alpha=1.2, m=0.4, temperature=0.0)
        batch = _line(0.0, 0.0, 1.1, labels=[0, 0, 1])
        ret = ranked_list_loss(batch, params, normalize=False)
        assert ret.value == pytest.approx(0.1)

    def test_no_positive(self):
        with pytest.raises(DomainError):
            ranked_list_loss(_line(0.0, 1.0, labels=[0, 1]),
                             RankedListParams())

    def test_m_below_alpha(self):
        with pytest.raises(DomainError):
            RankedListParams(alpha=0.5, m=0.6)


class TestStructClustLoss:

    def test_separated_singletons(self):
        batch = _line(0.0, 50.0, labels=[0, 1])
        ret = struct_clust_loss(batch, StructClustParams(0.1),
                                normalize=False)
        assert ret.value == 0.0

    def test_six_points_match_brute_force(self, generator):
        labels = [0, 0, 0, 1, 1, 1]
        batch = EmbeddingBatch(generator.standard_normal((6, 2)), labels)
        points = batch.vectors.tolist()
        best = max(brute_force_objective(points, labels, list(chosen), 1.0)
                   for chosen in itertools.combinations(range(6), 2))
        oracle = -sum(
            min(sum(math.dist(points[i], points[j]) for i in members)
                for j in members)
            for members in ([0, 1, 2], [3, 4, 5]))
        ret = struct_clust_loss(batch, StructClustParams(1.0, "exhaustive"),
                                normalize=False)
        assert ret.value == pytest.approx(max(best - oracle, 0.0),
                                          rel=1e-12, abs=1e-12)

    def test_exhaustive_guard(self, generator):
        batch = EmbeddingBatch(generator.standard_normal((13, 2)),
                               np.arange(13) % 2)
        with pytest.raises(GuardError):
            struct_clust_loss(batch, StructClustParams(1.0, "exhaustive"))


class TestPrototypicalLoss:

    def _plan(self, query_class0=(1,)):
        return BatchPlan("episode", episode_layout=[[
            EpisodeGroup(0, (0,), tuple(query_class0)),
            EpisodeGroup(1, (2,), ())]])

    def test_by_hand(self):
        batch = EmbeddingBatch([[0.0, 0.0], [0.0, 0.0], [2.0, 0.0]],
                               [0, 0, 1])
        ret = prototypical_loss(batch, self._plan())
        assert ret.value == pytest.approx(math.log1p(math.exp(-4.0)))

    def test_equidistant_prototypes(self):
        batch = EmbeddingBatch([[1.0, 0.0], [0.0, 0.0], [-1.0, 0.0]],
                               [0, 0, 1])
        ret = prototypical_loss(batch, self._plan())
        assert ret.value == pytest.approx(math.log(2.0))

    def test_gradient_reaches_support(self, generator):
        batch = EmbeddingBatch(generator.standard_normal((3, 2)), [0, 0, 1])
        plan = self._plan()
        report = grad_check(lambda b, p: prototypical_loss(b, plan), batch)
        assert report.passed
        ret = prototypical_loss(batch, plan)
        assert np.any(ret.grad_embeddings[2] != 0.0)

    def test_empty_support(self):
        batch = EmbeddingBatch(np.zeros((2, 2)), [0, 1])
        plan = BatchPlan("episode", episode_layout=[[
            EpisodeGroup(0, (), (0,)), EpisodeGroup(1, (1,), ())]])
        with pytest.raises(DomainError):
            prototypical_loss(batch, plan)

    def test_episodes_are_averaged(self, generator):
        batch = EmbeddingBatch(generator.standard_normal((6, 2)),
                               [0, 0, 1, 1, 0, 1])
        first = [EpisodeGroup(0, (0,), (1,)), EpisodeGroup(1, (2,), (3,))]
        second = [EpisodeGroup(0, (4,), (0,)), EpisodeGroup(1, (5,), (2,))]
        both = prototypical_loss(
            batch, BatchPlan("episode", episode_layout=[first, second]))
        each = [prototypical_loss(batch, BatchPlan("episode",
                                                   episode_layout=[e]))
                for e in (first, second)]
        assert both.value == pytest.approx(np.mean([e.value for e in each]))


def _bank(*rows):
    return ProxyBank(np.array(rows, dtype=float), scale=1.0, normalize=False)


class TestProxyNcaLoss:

    def test_on_proxy(self):
        batch = EmbeddingBatch([[1.0, 0.0]], [0])
        ret = proxy_nca_loss(batch, _bank([1.0, 0.0], [1.0, 0.0]))
        assert ret.value == pytest.approx(0.0)

    def test_two_negatives(self):
        batch = EmbeddingBatch([[0.0, 0.0]], [0])
        bank = _bank([0.0, 0.0], [1.0, 0.0], [0.0, 1.0])
        assert proxy_nca_loss(batch, bank).value \
            == pytest.approx(math.log(2.0) - 1.0)

    def test_single_proxy(self):
        batch = EmbeddingBatch([[1.0, 0.0]], [0])
        with pytest.raises(DomainError):
            proxy_nca_loss(batch, _bank([1.0, 0.0]))

    def test_unassigned_label(self):
        batch = EmbeddingBatch([[1.0, 0.0]], [4])
        with pytest.raises(DomainError, match="class 4"):
            proxy_nca_loss(batch, _bank([1.0, 0.0], [0.0, 1.0]))

    def test_temperature_matches_scale(self, generator):
        proxies = generator.standard_normal((3, 4))
        batch = EmbeddingBatch(generator.standard_normal((6, 4)),
                               [0, 1, 2, 0, 1, 2])
        by_scale = proxy_nca_loss(batch, ProxyBank(proxies, scale=2.0))
        by_temperature = proxy_nca_loss(
            batch, ProxyBank.from_temperature(proxies, 0.25))
        assert by_scale.value == pytest.approx(by_temperature.value)

    def test_registry_bank_scale(self):
        proxies = np.eye(2)
        assert proxy_bank("proxy-nca", {"temperature": 0.25}, proxies,
                          True).scale == pytest.approx(2.0)
        assert proxy_bank("proxy-nca", {"temperature": None, "scale": 3.0},
                          proxies, True).scale == 3.0
        assert proxy_bank("proxy-softmax", {"temperature": 0.5}, proxies,
                          True).scale == 1.0


class TestProxyTripletLoss:

    def test_satisfied(self):
        batch = EmbeddingBatch([[0.0]], [0])
        assert proxy_triplet_loss(batch, _bank([0.0], [5.0]), 1.0).value \
            == 0.0

    def test_by_hand(self):
        batch = EmbeddingBatch([[0.0]], [0])
        bank = _bank([math.sqrt(0.5)], [math.sqrt(0.4)])
        ret = proxy_triplet_loss(batch, bank, 0.2)
        assert ret.value == pytest.approx(0.3)


class TestProxySoftmaxLoss:

    def test_by_hand(self):
        batch = EmbeddingBatch([[1.0, 0.0]], [0])
        bank = ProxyBank([[1.0, 0.0], [0.0, 1.0]])
        ret = proxy_softmax_loss(batch, bank, temperature=1.0)
        assert ret.value == pytest.approx(-math.log(math.e / (math.e + 1)))

    def test_uniform(self):
        batch = EmbeddingBatch([[1.0, 0.0, 0.0]], [0])
        bank = ProxyBank([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
                          [0.0, -1.0, 0.0]])
        assert proxy_softmax_loss(batch, bank, 0.1).value \
            == pytest.approx(math.log(3.0))

    def test_single_class(self):
        batch = EmbeddingBatch([[1.0, 2.0]], [0])
        assert proxy_softmax_loss(batch, ProxyBank([[0.3, 0.1]])).value \
            == pytest.approx(0.0)

    def test_proxy_gradient(self, generator):
        batch = EmbeddingBatch(generator.standard_normal((6, 4)),
                               [0, 1, 2, 0, 1, 2])
        bank = ProxyBank(generator.standard_normal((3, 4)))

        def evaluate(b, p):
            return proxy_softmax_loss(b, ProxyBank(p["proxies"]), 0.5)

        report = grad_check(evaluate, batch,
                            params={"proxies": bank.proxies})
        assert report.passed
        assert report.n_checked == 24 + 12


class TestRegistry:

    def test_incompatible_sampler(self):
        with pytest.raises(ConfigError) as e:
            check_compatible("triplet-semihard", "npairs")
        assert e.value.field == "sampler"

    def test_unknown_param(self):
        with pytest.raises(ConfigError):
            loss_params("lifted", {"temperature": 1.0})

    def test_proxy_nca_accepts_temperature(self):
        assert loss_params("proxy-nca", {"temperature": 0.5})[
            "temperature"] == 0.5

    def test_npairs_works_on_raw_embeddings(self):
        assert LOSS_DEFAULTS["npairs"]["normalize"] is False
        assert LOSS_DEFAULTS["angular"]["normalize"] is True


def _permuted_plan(plan, new):
    """Rewrite a plan for a batch whose row ``i`` moved to ``new[i]``."""
    if plan is None:
        return None
    if plan.kind == "triplets":
        return BatchPlan("triplets", triplets=TripletIndexSet(
            [tuple(int(new[e]) for e in t) for t in plan.triplets.triplets]))
    if plan.kind == "pairs":
        return BatchPlan("pairs", pairs=PairIndexSet(
            [(int(new[i]), int(new[j])) for i, j in plan.pairs.positives],
            [(int(new[i]), int(new[j])) for i, j in plan.pairs.negatives]))
    if plan.kind == "npairs":
        return BatchPlan("npairs", npairs_layout=[
            (int(new[a]), int(new[p])) for a, p in plan.npairs_layout])
    return BatchPlan("episode", episode_layout=[
        [EpisodeGroup(g.label, tuple(int(new[e]) for e in g.support),
                      tuple(int(new[e]) for e in g.query)) for g in episode]
        for episode in plan.episode_layout])


def _evaluate(case, batch, plan=None, normalize=None):
    return evaluate_loss(case.name, batch,
                         case.plan if plan is None else plan, case.hyper,
                         case.params,
                         case.normalize if normalize is None else normalize)


class TestLossProperties:

    @pytest.mark.parametrize("name", SINGLE_MODEL_LOSS_NAMES)
    def test_batch_permutation(self, name):
        case = make_loss_case(name, 3)
        order = np.random.default_rng(8).permutation(case.batch.size)
        new = np.argsort(order)
        moved = EmbeddingBatch(case.batch.vectors[order],
                               case.batch.labels[order])
        before = _evaluate(case, case.batch)
        after = _evaluate(case, moved, _permuted_plan(case.plan, new))
        assert after.value == pytest.approx(before.value, rel=1e-12,
                                            abs=1e-15)
        np.testing.assert_allclose(after.grad_embeddings,
                                   before.grad_embeddings[order],
                                   rtol=1e-9, atol=1e-14)

    @pytest.mark.parametrize("name", ["triplet-semihard", "lifted"])
    @pytest.mark.parametrize("seed", range(3))
    def test_translation(self, name, seed):
        case = make_loss_case(name, seed)
        shift = 3.0 * np.random.default_rng(seed).standard_normal(
            case.batch.dim)
        moved = EmbeddingBatch(case.batch.vectors + shift, case.batch.labels)
        assert _evaluate(case, moved, normalize=False).value \
            == pytest.approx(_evaluate(case, case.batch,
                                       normalize=False).value,
                             rel=1e-9, abs=1e-12)

    def test_proxies_do_not_follow_translation(self):
        batch = EmbeddingBatch([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        moved = EmbeddingBatch(batch.vectors + [5.0, 0.0], batch.labels)
        bank = _bank([1.0, 0.0], [0.0, 1.0])
        assert proxy_nca_loss(moved, bank).value \
            != pytest.approx(proxy_nca_loss(batch, bank).value)

    @pytest.mark.parametrize("name", SINGLE_MODEL_LOSS_NAMES)
    def test_non_negative(self, name):
        for seed in range(5):
            case = make_loss_case(name, seed)
            value = case.evaluator(case.batch, case.params).value
            assert np.isfinite(value)
            # proxy-NCA without the positive proxy is unbounded below
            if name != "proxy-nca":
                assert value >= 0.0

    def test_angular_scale(self, generator):
        batch = EmbeddingBatch(generator.standard_normal((6, 3)),
                               [0, 0, 1, 1, 2, 2])
        plan = BatchPlan("npairs", npairs_layout=[(0, 1), (2, 3), (4, 5)])
        scaled = EmbeddingBatch(4.5 * batch.vectors, batch.labels)
        before, after = angular_loss(batch, plan), angular_loss(scaled, plan)
        assert after.value == pytest.approx(before.value, rel=1e-12)
        np.testing.assert_allclose(4.5 * after.grad_embeddings,
                                   before.grad_embeddings, atol=1e-12)

    def test_proxy_softmax_scale(self, generator):
        batch = EmbeddingBatch(generator.standard_normal((6, 4)),
                               [0, 1, 2, 0, 1, 2])
        bank = ProxyBank(generator.standard_normal((3, 4)))
        scaled = EmbeddingBatch(0.2 * batch.vectors, batch.labels)
        assert proxy_softmax_loss(scaled, bank).value \
            == pytest.approx(proxy_softmax_loss(batch, bank).value,
                             rel=1e-12)

    def test_reverse_pairs_on_symmetric_batch(self, generator):
        rows = generator.standard_normal((3, 4))
        batch = EmbeddingBatch(np.repeat(rows, 2, axis=0),
                               [0, 0, 1, 1, 2, 2])
        plan = BatchPlan("npairs", npairs_layout=[(0, 1), (2, 3), (4, 5)])
        forward = npairs_loss(batch, plan, l2_reg=0.01)
        both = npairs_loss(batch, plan, l2_reg=0.01, reverse_pairs=True)
        assert both.value == pytest.approx(forward.value, rel=1e-12)
        np.testing.assert_allclose(both.grad_embeddings,
                                   forward.grad_embeddings, atol=1e-12)

    def test_reverse_pairs_averages_swapped_layout(self, generator):
        batch = EmbeddingBatch(generator.standard_normal((6, 3)),
                               [0, 0, 1, 1, 2, 2])
        layout = [(0, 1), (2, 3), (4, 5)]
        plan = BatchPlan("npairs", npairs_layout=layout)
        swapped = BatchPlan("npairs",
                            npairs_layout=[(p, a) for a, p in layout])
        both = npairs_loss(batch, plan, 0.0, reverse_pairs=True)
        assert both.value == pytest.approx(
            0.5 * (npairs_loss(batch, plan, 0.0).value
                   + npairs_loss(batch, swapped, 0.0).value))


class TestHingeOptimum:
    """Every constraint satisfied: zero loss and an all-zero gradient."""

    def _assert_optimum(self, ret):
        assert ret.value == 0.0
        np.testing.assert_array_equal(ret.grad_embeddings, 0.0)
        for grad in ret.grad_params.values():
            np.testing.assert_array_equal(grad, 0.0)

    def test_triplet(self):
        batch = _line(0.0, 1.0, 3.0, labels=[0, 0, 1])
        self._assert_optimum(triplet_loss(
            batch, TripletIndexSet([(0, 1, 2), (1, 0, 2)]), 0.5,
            "euclidean", normalize=False))

    def test_lifted(self):
        batch = _line(0.0, 0.0, 100.0, labels=[0, 0, 1])
        pairs = PairIndexSet([(0, 1)], [(0, 2), (1, 2)])
        self._assert_optimum(lifted_struct_loss(batch, pairs, 1.0))

    def test_margin(self):
        batch = _line(0.0, 0.5, 3.0, labels=[0, 0, 1])
        ret = margin_loss(batch, PairIndexSet([(0, 1)], [(0, 2), (2, 1)]),
                          MarginLossParams(np.full(2, 1.2), 0.2),
                          normalize=False)
        assert "beta" in ret.grad_params
        self._assert_optimum(ret)

    def test_ranked_list(self):
        batch = _line(0.0, 0.5, 3.0, labels=[0, 0, 1])
        params = RankedListParams(alpha=1.2, m=0.4, temperature=0.0)
        self._assert_optimum(ranked_list_loss(batch, params,
                                              normalize=False))

    def test_proxy_triplet(self):
        batch = EmbeddingBatch([[0.0], [5.0]], [0, 1])
        self._assert_optimum(proxy_triplet_loss(batch, _bank([0.0], [5.0]),
                                                1.0))
