import numpy as np
import pytest

from designest.bounds import (
    NotIdentifiedError,
    aronow_samii_bound,
    certify_bound,
    custom_bound,
    minus_one_mask,
    neyman_bound_crd,
    psd_clip,
)
from designest.designs import (
    BernoulliDesign,
    CompletelyRandomizedDesign,
    StratifiedDesign,
    stream_rng,
)
from designest.moments import exact_moments, mc_moments

# Hand-applied bound formula for the two-point CRD: each row of D has two
# -1 entries (other unit same arm, same unit other arm); both become zeros
# and the diagonal picks up the row count 2.
CRD2_AS = np.array(
    [
        [3.0, 0.0, 0.0, 1.0],
        [0.0, 3.0, 1.0, 0.0],
        [0.0, 1.0, 3.0, 0.0],
        [1.0, 0.0, 0.0, 3.0],
    ]
)


def expected_weighted_form(table, Dt):
    indicators = table.indicator_matrix()
    p = indicators.T @ (indicators * table.probabilities[:, None])
    out = np.zeros_like(Dt)
    np.divide(Dt, p, out=out, where=p != 0)
    return out


class TestAronowSamii:
    def test_two_arm_bernoulli_is_twice_identity(self):
        for n in (1, 2, 3):
            m = exact_moments(BernoulliDesign(n, [0.5, 0.5]))
            bound = aronow_samii_bound(m)
            assert np.allclose(bound.Dt, 2.0 * np.eye(2 * n), atol=1e-12)

    def test_crd2_matrix(self):
        m = exact_moments(CompletelyRandomizedDesign(2, [1, 1]))
        bound = aronow_samii_bound(m)
        assert np.allclose(bound.Dt, CRD2_AS, atol=1e-12)

    def test_no_minus_one_entries_returns_d(self):
        # single-arm design: every indicator is constant, D = 0, empty mask
        m = exact_moments(CompletelyRandomizedDesign(3, [3]))
        bound = aronow_samii_bound(m)
        assert not bound.mask_minus1.any()
        assert np.allclose(bound.Dt, m.D)

    def test_mask_entries_are_exact_zeros(self):
        m = exact_moments(CompletelyRandomizedDesign(4, [2, 2]))
        bound = aronow_samii_bound(m)
        assert np.all(bound.Dt[bound.mask_minus1] == 0.0)

    def test_difference_diagonally_dominant(self):
        m = exact_moments(CompletelyRandomizedDesign(5, [2, 3]))
        bound = aronow_samii_bound(m)
        diff = bound.Dt - m.D
        off = np.abs(diff - np.diag(np.diag(diff))).sum(axis=1)
        assert np.all(np.diag(diff) >= off - 1e-12)
        assert np.all(np.diag(diff) >= -1e-12)

    def test_structural_zero_rejected(self):
        m = mc_moments(CompletelyRandomizedDesign(3, [0, 3]), reps=50, seed=0)
        with pytest.raises(NotIdentifiedError):
            aronow_samii_bound(m)

    def test_mc_mask_uses_zero_joint_hits(self):
        design = CompletelyRandomizedDesign(3, [1, 2])
        m = mc_moments(design, reps=20_000, seed=4)
        exact = exact_moments(design)
        assert np.array_equal(minus_one_mask(m), minus_one_mask(exact))


class TestNeyman:
    def test_not_identified_single_treated(self):
        with pytest.raises(NotIdentifiedError):
            neyman_bound_crd(2, 1)
        with pytest.raises(NotIdentifiedError):
            neyman_bound_crd(5, 4)

    def test_blocks_and_diagonal(self):
        bound = neyman_bound_crd(4, 2)
        # (n / n_t) A_n has unit-free diagonal n/n_t = 2
        assert np.allclose(np.diag(bound.Dt), 2.0)
        assert np.allclose(bound.Dt[:4, 4:], 0.0)

    def test_validity_difference_is_block_constant_psd(self):
        n, n_t = 6, 3
        m = exact_moments(CompletelyRandomizedDesign(n, [n_t, n - n_t]))
        bound = neyman_bound_crd(n, n_t)
        diff = bound.Dt - m.D
        a = diff[:n, :n]
        for block in (diff[:n, n:], diff[n:, :n], diff[n:, n:]):
            assert np.allclose(block, a, atol=1e-12)
        assert np.linalg.eigvalsh(diff).min() >= -1e-10

    def test_joint_probabilities_match_enumeration(self):
        n, n_t = 5, 2
        m = exact_moments(CompletelyRandomizedDesign(n, [n_t, n - n_t]))
        bound = neyman_bound_crd(n, n_t)
        expected = expected_weighted_form(
            CompletelyRandomizedDesign(n, [n_t, n - n_t]).enumerate_support(), bound.Dt
        )
        assert np.allclose(bound.Dt_over_p, expected, atol=1e-12)


class TestWeightedFormUnbiasedness:
    @pytest.mark.parametrize(
        "design",
        [
            BernoulliDesign(2, [0.5, 0.5]),
            BernoulliDesign(3, [0.3, 0.7]),
            CompletelyRandomizedDesign(4, [2, 2]),
            CompletelyRandomizedDesign(6, [3, 3]),
            StratifiedDesign(4, [[0, 1], [2, 3]], [[1, 1], [1, 1]]),
        ],
    )
    def test_expectation_recovers_bound(self, design):
        m = exact_moments(design)
        bound = aronow_samii_bound(m)
        table = design.enumerate_support()
        indicators = table.indicator_matrix()
        acc = np.zeros_like(bound.Dt)
        for row, prob in zip(indicators, table.probabilities):
            acc += prob * np.outer(row, row) * bound.Dt_over_p
        assert np.max(np.abs(acc - bound.Dt)) < 1e-10

    def test_neyman_expectation_recovers_bound(self):
        design = CompletelyRandomizedDesign(6, [3, 3])
        bound = neyman_bound_crd(6, 3)
        table = design.enumerate_support()
        acc = np.zeros_like(bound.Dt)
        for row, prob in zip(table.indicator_matrix(), table.probabilities):
            acc += prob * np.outer(row, row) * bound.Dt_over_p
        assert np.max(np.abs(acc - bound.Dt)) < 1e-10


class TestCertify:
    def test_as_bound_passes_on_small_designs(self):
        designs = [
            BernoulliDesign(4, [0.4, 0.6]),
            CompletelyRandomizedDesign(6, [2, 4]),
            StratifiedDesign(6, [[0, 1, 2], [3, 4, 5]], [[1, 2], [2, 1]]),
        ]
        for design in designs:
            m = exact_moments(design)
            cert = certify_bound(m, aronow_samii_bound(m))
            assert cert.psd_ok and cert.identified_ok

    def test_neyman_vs_as_spectra(self):
        n, n_t = 6, 3
        m = exact_moments(CompletelyRandomizedDesign(n, [n_t, n - n_t]))
        cert = certify_bound(m, neyman_bound_crd(n, n_t), compare=aronow_samii_bound(m))
        raw = cert.comparison_spectrum
        expected_raw = np.sort(np.concatenate([[-2.0], np.zeros(n), np.full(n - 1, 2 / (n - 1))]))
        assert np.allclose(raw, expected_raw, atol=1e-8)
        projected = cert.comparison_spectrum_projected
        expected_proj = np.sort(np.concatenate([np.zeros(n + 1), np.full(n - 1, 2 / (n - 1))]))
        assert np.allclose(projected, expected_proj, atol=1e-8)

    def test_dimension_mismatch(self):
        m = exact_moments(BernoulliDesign(2, [0.5, 0.5]))
        bad = neyman_bound_crd(4, 2)
        with pytest.raises(ValueError):
            certify_bound(m, bad)

    def test_custom_bound_validates(self):
        m = exact_moments(CompletelyRandomizedDesign(4, [2, 2]))
        as_matrix = aronow_samii_bound(m).Dt
        ok = custom_bound(as_matrix, m)
        assert ok.name == "custom"
        with pytest.raises(NotIdentifiedError):
            custom_bound(m.D / 2.0, m)


class TestPsdClip:
    def test_hand_example(self):
        bound = _bound_with_weighted(np.array([[1.0, -2.0], [-2.0, 1.0]]))
        clipped = psd_clip(bound)
        assert np.allclose(
            clipped.Dt_over_p, [[1.5, -1.5], [-1.5, 1.5]], atol=1e-12
        )
        assert clipped.psd_clipped

    def test_idempotent_on_psd(self):
        m = exact_moments(BernoulliDesign(2, [0.5, 0.5]))
        bound = aronow_samii_bound(m)
        clipped = psd_clip(bound)
        assert np.allclose(clipped.Dt_over_p, bound.Dt_over_p, atol=1e-10)

    def test_quadratic_form_never_decreases(self):
        rng = stream_rng(12)
        a = rng.standard_normal((5, 5))
        bound = _bound_with_weighted((a + a.T) / 2)
        clipped = psd_clip(bound)
        for _ in range(30):
            v = rng.standard_normal(5)
            assert v @ clipped.Dt_over_p @ v >= v @ bound.Dt_over_p @ v - 1e-10


def _bound_with_weighted(weighted):
    from designest.bounds import VarianceBound

    kn = weighted.shape[0]
    return VarianceBound(
        Dt=np.eye(kn),
        mask_minus1=np.zeros((kn, kn), dtype=bool),
        Dt_over_p=weighted,
    )


def test_bound_csv_export(tmp_path):
    m = exact_moments(BernoulliDesign(1, [0.5, 0.5]))
    bound = aronow_samii_bound(m)
    path = tmp_path / "bound.csv"
    bound.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "i,j,value"
    assert len(lines) == 3  # two diagonal entries of 2I
