import numpy as np
import pytest

from ctmr import gradcheck
from ctmr import tensor as T


class TestChecker:
    def test_subsampling_respects_budget(self, rng):
        x = rng.standard_normal(50)
        res = gradcheck.check(lambda t: (t * t).sum(), [x], max_elements=7, seed=1)
        assert res.checked == 7 and res.passed

    def test_inputs_left_unperturbed(self, rng):
        x = rng.standard_normal(10)
        before = x.copy()
        gradcheck.check(lambda t: T.tanh(t).sum(), [x])
        np.testing.assert_array_equal(x, before)

    def test_kink_avoidance_skips_crossing_candidates(self):
        x = np.array([0.0005, 1.0, -1.0])
        res = gradcheck.check(lambda t: T.relu(t).sum(), [x], avoid_kinks=True)
        assert res.skipped == 1 and res.checked == 2 and res.passed


@pytest.fixture(scope="module")
def results():
    return gradcheck.network_suite(size=64, seed=0)


class TestNetworks:
    def test_covers_every_network_and_objective(self, results):
        assert len(results) == 5
        assert {"generator", "discriminator", "fcn_FCN", "fcn_FCN-CGAN"} <= {r.name for r in results}

    def test_all_within_tolerance(self, results):
        bad = [(r.name, r.rel_error) for r in results if not r.passed]
        assert not bad
        assert all(r.checked == 20 for r in results)
