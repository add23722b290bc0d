"""Closed-form checks and invariants for the uncertainty maps."""

import numpy as np
import pytest

from lesionuq.errors import InputError
from lesionuq.maps import binarize, compute_maps
from lesionuq.volume import Dims, McEnsemble, Volume

# H(1/4) evaluated with a 40-digit calculator, rounded to float64
H_QUARTER = 0.8112781244591328

DIMS1 = Dims(1, 1, 1)


def ensemble_at(values):
    """Single-voxel ensemble with the given sample probabilities."""
    return McEnsemble(tuple(Volume(DIMS1, np.array([v], dtype=float)) for v in values))


class TestClosedForms:
    def test_all_half(self):
        m = compute_maps(ensemble_at([0.5] * 4))
        assert m.entropy.data[0] == 1.0
        assert m.variance.data[0] == 0.0
        assert m.pcs_uncertainty.data[0] == 1.0

    def test_all_certain(self):
        m = compute_maps(ensemble_at([1.0] * 4))
        assert m.entropy.data[0] == 0.0
        assert m.variance.data[0] == 0.0
        assert m.pcs_uncertainty.data[0] == 0.0
        z = compute_maps(ensemble_at([0.0] * 4))
        assert z.entropy.data[0] == 0.0
        assert z.pcs_uncertainty.data[0] == 0.0

    def test_two_sample_split(self):
        m = compute_maps(ensemble_at([0.0, 1.0]))
        assert m.mean_prob.data[0] == 0.5
        assert m.variance.data[0] == 0.25
        assert m.entropy.data[0] == 1.0

    def test_quarter_entropy(self):
        m = compute_maps(ensemble_at([1.0, 0.0, 0.0, 0.0]))
        assert m.mean_prob.data[0] == 0.25
        assert m.entropy.data[0] == pytest.approx(H_QUARTER, abs=1e-15)


class TestInvariants:
    def test_ranges_hold_on_random_ensembles(self):
        rng = np.random.default_rng(1)
        dims = Dims(5, 4, 3)
        samples = tuple(Volume(dims, rng.uniform(size=dims.n_voxels)) for _ in range(7))
        m = compute_maps(McEnsemble(samples))
        assert np.all((m.mean_prob.data >= 0) & (m.mean_prob.data <= 1))
        assert np.all((m.entropy.data >= 0) & (m.entropy.data <= 1))
        assert np.all((m.variance.data >= 0) & (m.variance.data <= 0.25))
        assert np.all((m.pcs_uncertainty.data >= 0) & (m.pcs_uncertainty.data <= 1))

    def test_zero_entropy_iff_zero_pcs(self):
        rng = np.random.default_rng(2)
        probs = np.concatenate([[0.0, 1.0], rng.uniform(size=20)])
        dims = Dims(len(probs), 1, 1)
        m = compute_maps(McEnsemble((Volume(dims, probs), Volume(dims, probs))))
        ent_zero = m.entropy.data == 0.0
        pcs_zero = m.pcs_uncertainty.data == 0.0
        extreme = (probs == 0.0) | (probs == 1.0)
        assert np.array_equal(ent_zero, pcs_zero)
        assert np.array_equal(ent_zero, extreme)

    def test_agreement_gives_zero_variance(self):
        m = compute_maps(ensemble_at([0.3, 0.3, 0.3]))
        assert m.variance.data[0] == 0.0

    def test_sample_permutation_invariance(self):
        # invariant up to summation-order rounding in the T-sample mean
        rng = np.random.default_rng(3)
        dims = Dims(4, 4, 4)
        vols = [Volume(dims, rng.uniform(size=64)) for _ in range(6)]
        a = compute_maps(McEnsemble(tuple(vols)))
        b = compute_maps(McEnsemble(tuple(reversed(vols))))
        for attr in ("mean_prob", "entropy", "variance", "pcs_uncertainty"):
            np.testing.assert_allclose(
                getattr(a, attr).data, getattr(b, attr).data, rtol=1e-13, atol=1e-15
            )


class TestBinarize:
    def test_above_threshold(self):
        v = Volume(DIMS1, np.array([0.6]))
        assert binarize(v, 0.5).data.tolist() == [1]

    def test_tie_goes_background(self):
        v = Volume(DIMS1, np.array([0.5]))
        assert binarize(v, 0.5).data.tolist() == [0]

    def test_mixed(self):
        v = Volume(Dims(2, 1, 1), np.array([0.4, 0.7]))
        assert binarize(v, 0.5).data.tolist() == [0, 1]

    def test_threshold_range(self):
        v = Volume(DIMS1, np.array([0.5]))
        for bad in (0.0, 1.0, -0.1, 2.0):
            with pytest.raises(InputError):
                binarize(v, bad)
