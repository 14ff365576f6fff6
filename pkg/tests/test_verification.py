import inspect
import time

import pytest

from definitions import SINGLE_MODEL_LOSS_NAMES
from errors import ConfigError
import verification
from verification import (CHECK_GROUPS, QUICK_SIZES, check_facility,
                          check_gradients, check_mining, check_nmi,
                          check_recall, check_sampler, inverse_density_weights,
                          make_loss_case, run_checks)


def _failures(results):
    return [e.status_line() for e in results if not e.passed]


class TestGradientChecks:

    @pytest.mark.parametrize("name", SINGLE_MODEL_LOSS_NAMES)
    def test_loss_passes(self, name):
        assert _failures(check_gradients(n_batches=3, names=[name])) == []

    @pytest.mark.acceptance
    def test_all_losses_many_batches(self):
        start = time.perf_counter()
        assert _failures(check_gradients(n_batches=20, seed=1)) == []
        assert time.perf_counter() - start < 60.0

    def test_grad_sign_fault_is_caught(self):
        results = check_gradients(n_batches=3, fault="grad-sign",
                                  names=["proxy-nca", "lifted"])
        assert [e.passed for e in results] == [False, True]
        assert "embeddings" in results[0].detail

    def test_case_is_deterministic(self):
        a, b = make_loss_case("margin", 4), make_loss_case("margin", 4)
        assert a.evaluator(a.batch, a.params).value \
            == b.evaluator(b.batch, b.params).value


class TestOracleChecks:

    def test_mining(self):
        assert _failures(check_mining(n_batches=40)) == []

    def test_recall(self):
        assert _failures(check_recall(n_sets=2, max_size=60)) == []

    def test_nmi(self):
        assert _failures(check_nmi(n_pairs=50)) == []

    def test_facility(self):
        assert _failures(check_facility(n_exhaustive=4, n_separated=5)) == []

    @pytest.mark.slow
    def test_facility_full(self):
        assert _failures(check_facility()) == []

    @pytest.mark.slow
    def test_sampler(self):
        assert _failures(check_sampler(n_configs=5, n_draws=20000)) == []

    def test_inverse_density_weights(self):
        # On the 2-sphere the distance density is proportional to d
        assert inverse_density_weights([0.5, 1.0, 2.0], 3) \
            == pytest.approx([2.0, 1.0, 0.5])
        w = inverse_density_weights([1.0], 5)
        assert w == pytest.approx([1.0 / 0.75])


class TestRunChecks:

    def test_selected_groups_only(self):
        results = run_checks(["nmi"])
        assert {e.group for e in results} == {"nmi"}
        assert all(e.passed for e in results)

    def test_groups_run_in_fixed_order(self):
        results = run_checks(["nmi", "mining"], quick=True)
        assert [e.group for e in results][0] == "mining"
        assert CHECK_GROUPS.index("mining") < CHECK_GROUPS.index("nmi")

    def test_unknown_group(self):
        with pytest.raises(ConfigError) as e:
            run_checks(["bogus"])
        assert e.value.exit_code == 2

    def test_unknown_fault(self):
        with pytest.raises(ConfigError):
            run_checks(["nmi"], fault="off-by-one")

    @pytest.mark.parametrize("quick", [False, True])
    def test_sizes(self, monkeypatch, quick):
        calls = []
        monkeypatch.setattr(verification, "check_mining",
                            lambda **kw: calls.append(kw) or [])
        run_checks(["mining"], seed=3, quick=quick)
        expected = dict(QUICK_SIZES["mining"]) if quick else {}
        assert calls == [{"seed": 3, **expected}]

    @pytest.mark.parametrize("check,sizes", [
        (check_gradients, {"n_batches": 20}),
        (check_mining, {"n_batches": 1000, "max_size": 64}),
        (check_recall, {"max_size": 500}),
        (check_sampler, {"n_configs": 20, "n_draws": 100000}),
    ])
    def test_default_sizes_are_the_full_suite(self, check, sizes):
        defaults = inspect.signature(check).parameters
        assert {k: defaults[k].default for k in sizes} == sizes


@pytest.mark.acceptance
class TestDeskScaleOracles:

    def test_full_suite_runtime(self):
        start = time.perf_counter()
        assert _failures(run_checks()) == []
        assert time.perf_counter() - start < 300.0

    def test_mining(self):
        assert _failures(check_mining(n_batches=1000, max_size=64)) == []

    def test_recall(self):
        assert _failures(check_recall(n_sets=4, max_size=500)) == []

    def test_facility(self):
        assert _failures(check_facility(n_exhaustive=10,
                                        n_separated=50)) == []

    def test_sampler(self):
        assert _failures(check_sampler(n_configs=20, n_draws=100000)) == []
