import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aptad.cfg import CfgConfig, inject_noise, target_focus_from_scores, target_focus_mask


def _features(rng, s=36, d=8):
    F = rng.normal(size=(s, d))
    return (F / np.linalg.norm(F, axis=1, keepdims=True)).astype(np.float32)


class TestTargetFocus:
    def test_strict_threshold(self):
        np.testing.assert_array_equal(target_focus_from_scores(np.array([0.6, 0.4, 0.5])), [1, 0, 0])

    def test_saturated(self):
        np.testing.assert_array_equal(target_focus_from_scores(np.ones(5)), 1)

    def test_empty_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            m = target_focus_from_scores(np.zeros(4))
        assert not m.any()
        assert "no object" in caplog.text

    def test_raw_inner_product(self):
        z = np.array([1.0, 0.0])
        F = np.array([[0.8, 0.6], [0.5, np.sqrt(0.75)], [0.0, 1.0]])
        np.testing.assert_array_equal(target_focus_mask(F, z), [1, 0, 0])


class TestInjectNoise:
    def test_zero_sigma(self):
        rng = np.random.default_rng(0)
        F = _features(rng)
        m = (rng.random(36) < 0.5).astype(np.int8)
        out = inject_noise(F, m, CfgConfig("absolute", 0.0), seed=1)
        np.testing.assert_array_equal(out.F_prime, F)
        np.testing.assert_array_equal(out.mask_a, m)

    def test_empty_mask(self):
        F = _features(np.random.default_rng(1))
        out = inject_noise(F, np.zeros(36, np.int8), CfgConfig(), seed=3)
        np.testing.assert_array_equal(out.F_prime, F)
        assert not out.mask_a.any()

    def test_masked_rows_change_and_stay_unit(self):
        F = _features(np.random.default_rng(2))
        m = np.zeros(36, np.int8)
        m[:10] = 1
        out = inject_noise(F, m, CfgConfig(), seed=4)
        assert not np.allclose(out.F_prime[:10], F[:10])
        np.testing.assert_allclose(np.linalg.norm(out.F_prime, axis=1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("mode,value", [("absolute", 0.3), ("relative", 1.0), ("relative", 2.5)])
    def test_perturbation_std(self, mode, value):
        rng = np.random.default_rng(5)
        F = _features(rng, s=400, d=32)
        cfg = CfgConfig(mode, value)
        out = inject_noise(F, np.ones(400, np.int8), cfg, seed=6)
        assert out.perturbation.size >= 10_000
        sigma = cfg.resolve_sigma(F)
        assert abs(out.perturbation.std() - sigma) <= 0.1 * sigma

    @given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.sampled_from([0.2, 0.5, 1.0]))
    def test_invariants(self, seed, rate, cap):
        rng = np.random.default_rng(seed)
        F = _features(rng)
        m = (rng.random(36) < rate).astype(np.int8)
        cfg = CfgConfig(anomaly_fraction_cap=cap)
        out = inject_noise(F, m, cfg, seed=seed)
        assert np.all(out.mask_a <= m)
        keep = out.mask_a == 0
        np.testing.assert_array_equal(out.F_prime[keep], F[keep])
        np.testing.assert_array_equal(out.mask_n + out.mask_a, 1)
        again = inject_noise(F, m, cfg, seed=seed)
        np.testing.assert_array_equal(again.F_prime, out.F_prime)
        np.testing.assert_array_equal(again.mask_a, out.mask_a)

    def test_cap_grows_connected_blob(self):
        m = np.ones(36, np.int8)
        out = inject_noise(_features(np.random.default_rng(7)), m, CfgConfig(anomaly_fraction_cap=0.25), seed=8)
        assert out.mask_a.sum() == 9
        cells = {int(c) for c in np.flatnonzero(out.mask_a)}
        seen, stack = set(), [min(cells)]
        while stack:
            c = stack.pop()
            if c in seen:
                continue
            seen.add(c)
            r, q = divmod(c, 6)
            stack += [n for n in (c - 6, c + 6, c - 1 if q else -1, c + 1 if q < 5 else -1) if n in cells]
        assert seen == cells

    def test_config_validation(self):
        with pytest.raises(ValueError):
            CfgConfig("fixed")
        with pytest.raises(ValueError):
            CfgConfig(sigma_value=-1)
        with pytest.raises(ValueError):
            CfgConfig(anomaly_fraction_cap=0)
