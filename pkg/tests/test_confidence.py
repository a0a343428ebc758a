"""Tests for confmaplib.confidence — weights, Dirichlet system and confidence maps"""

import math
import time

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from confmaplib.confidence import (
    ConfidenceMap, RwParams, attenuation_field, compute_confidence_map,
    compute_volume_confidence, depth_profile, dirichlet_system, edge_weights,
    sweep_confidence, sweep_pairs,
)
from confmaplib.exceptions import InputError, PartialMapError
from confmaplib.grids import Image2D, Volume3D
from confmaplib.phantom import PhantomSpec, Stripe, generate_phantom
from confmaplib.sparse import dense_solve, is_spd
from conftest import random_image, uniform_image

EPS = 1e-6


# ---------------------------------------------------------------------------
# attenuation_field / edge_weights
# ---------------------------------------------------------------------------

class TestAttenuationField:

    def test_no_attenuation(self):
        c = attenuation_field(uniform_image(5, 4, 1.0), alpha=0.0)
        assert_array_equal(c, np.ones((5, 4)))

    def test_half_depth(self):
        """Half way down the attenuation is exp(-alpha / 2)."""
        c = attenuation_field(uniform_image(5, 4, 1.0), alpha=2.0)
        assert c[2, 0] == pytest.approx(math.exp(-1.0), abs=1e-12)
        assert c[2, 0] == pytest.approx(0.367879, abs=1e-6)

    def test_top_row_unattenuated(self):
        c = attenuation_field(uniform_image(5, 4, 1.0), alpha=2.0)
        assert_array_equal(c[0], np.ones(4))

    def test_negative_alpha_rejected(self):
        with pytest.raises(InputError):
            attenuation_field(uniform_image(3, 3), alpha=-1.0)


class TestEdgeWeights:

    def test_vertical_equal_intensity(self):
        w = edge_weights(np.full((3, 3), 0.4), RwParams(beta=250.0))
        assert_allclose(w.vertical, 1.0 + EPS)

    def test_horizontal_equal_intensity(self):
        w = edge_weights(np.full((3, 3), 0.4), RwParams(beta=90.0, gamma=0.05))
        assert_allclose(w.horizontal, math.exp(-4.5) + EPS)
        assert w.horizontal[0, 0] == pytest.approx(0.011109, abs=1e-6)

    def test_diagonal_equal_intensity(self):
        """Equal diagonal neighbours still pay the distance penalty."""
        w = edge_weights(np.full((3, 3), 0.4), RwParams(beta=90.0, gamma=0.05))
        penalty = math.exp(-90 * 0.05 * math.sqrt(2))
        assert_allclose(w.diag_right, penalty + EPS)
        assert_allclose(w.diag_left, penalty + EPS)
        assert penalty == pytest.approx(0.0017225, abs=1e-7)

    def test_shapes_and_floor(self, rng):
        c = rng.random((6, 5))
        w = edge_weights(c, RwParams(beta=1e4))
        assert w.vertical.shape == (5, 5)
        assert w.horizontal.shape == (6, 4)
        assert w.diag_right.shape == (5, 4)
        assert w.diag_left.shape == (5, 4)
        p, q, weights = w.edges()
        assert p.size == q.size == weights.size == 25 + 24 + 20 + 20
        assert np.all(weights >= EPS)

    def test_diag_left_pairs(self):
        c = np.array([[0.0, 1.0], [1.0, 0.0]])
        w = edge_weights(c, RwParams(beta=1.0, gamma=0.0))
        # (0, 1) - (1, 0) have equal intensity
        assert w.diag_left[0, 0] == pytest.approx(1.0 + EPS)
        assert w.diag_right[0, 0] == pytest.approx(math.exp(0.0) + EPS)

    def test_non_finite_rejected(self):
        with pytest.raises(InputError):
            edge_weights(np.array([[0.0, np.nan], [0.0, 0.0]]), RwParams())


# ---------------------------------------------------------------------------
# dirichlet_system
# ---------------------------------------------------------------------------

class TestDirichletSystem:

    def test_three_by_three(self):
        params = RwParams(alpha=0.0)
        system = dirichlet_system(edge_weights(np.full((3, 3), 0.5), params))
        assert system.matrix.n == 3
        assert_array_equal(system.unknown_index, [3, 4, 5])

    def test_rhs_is_source_incident_weight(self):
        """Only rows next to the top boundary get a right-hand side."""
        params = RwParams(alpha=0.0)
        system = dirichlet_system(edge_weights(np.full((3, 3), 0.5), params))
        w_d = math.exp(-params.beta * math.sqrt(2) * params.gamma) + EPS
        assert system.rhs[1] == pytest.approx(1.0 + EPS + 2 * w_d, rel=1e-12)
        assert system.rhs[0] == pytest.approx(1.0 + EPS + w_d, rel=1e-12)

    def test_matrix_is_spd(self, rng):
        for _ in range(5):
            c = rng.random((12, 10))
            system = dirichlet_system(edge_weights(c, RwParams()))
            assert system.matrix.symmetric
            assert is_spd(system.matrix.to_dense())

    def test_too_few_rows(self):
        with pytest.raises(InputError, match="at least 3 rows"):
            dirichlet_system(edge_weights(np.zeros((2, 4)), RwParams()))


# ---------------------------------------------------------------------------
# compute_confidence_map
# ---------------------------------------------------------------------------

class TestComputeConfidenceMap:

    def test_uniform_linear_profile(self):
        cm, stats = compute_confidence_map(
            uniform_image(5, 6), RwParams(alpha=0.0, tol=1e-12)
        )
        assert stats.converged
        for row, expected in zip(cm.data, (1.0, 0.75, 0.5, 0.25, 0.0)):
            assert_allclose(row, expected, atol=1e-6)

    def test_single_column_chain(self):
        """A one-column image reduces to a chain with a linear profile."""
        cm, _ = compute_confidence_map(uniform_image(9, 1), RwParams(alpha=0.0, tol=1e-12))
        assert_allclose(cm.data[:, 0], np.linspace(1.0, 0.0, 9), atol=1e-6)

    def test_boundary_rows_and_maximum_principle(self, rng):
        """Default solver settings keep the interior strictly inside (0, 1)."""
        start = time.perf_counter()
        for _ in range(100):
            params = RwParams(
                alpha=float(rng.uniform(0.0, 3.0)),
                beta=float(rng.uniform(10.0, 200.0)),
            )
            cm, _ = compute_confidence_map(random_image(rng, 16, 16), params)
            assert np.all(cm.data[0] == 1.0)
            assert np.all(cm.data[-1] == 0.0)
            interior = cm.data[1:-1]
            assert np.all(interior > 0.0)
            assert np.all(interior < 1.0)
        assert time.perf_counter() - start < 2.0

    def test_matches_dense_oracle(self, rng):
        for _ in range(20):
            img = random_image(rng, 32, 32)
            params = RwParams(tol=1e-12)
            cm, _ = compute_confidence_map(img, params)
            system = dirichlet_system(edge_weights(attenuation_field(img, params.alpha), params))
            exact = dense_solve(system.matrix.to_dense(), system.rhs)
            got = cm.data.reshape(-1)[system.unknown_index].astype(np.float64)
            assert np.max(np.abs(got - exact)) <= 1e-6

    def test_shadow_below_stripe(self):
        """Columns below a bright reflector lose confidence."""
        spec = PhantomSpec(
            speckle_sigma=0.0, ellipses=[], stripe=Stripe(row=20, columns=(16, 48))
        )
        img, _, _ = generate_phantom(spec)
        cm, _ = compute_confidence_map(img)
        stripe = spec.stripe
        below = slice(stripe.row + stripe.thickness, spec.height - 1)
        c0, c1 = stripe.columns
        shadowed = cm.data[below, c0:c1].mean()
        free = np.concatenate(
            [cm.data[below, :c0].ravel(), cm.data[below, c1:].ravel()]
        ).mean()
        assert shadowed < free

    def test_too_few_rows(self):
        with pytest.raises(InputError):
            compute_confidence_map(uniform_image(2, 4))

    def test_non_convergence_carries_partial_map(self, rng):
        params = RwParams(tol=1e-14, max_iter=1, preconditioner="jacobi")
        with pytest.raises(PartialMapError) as excinfo:
            compute_confidence_map(random_image(rng, 10, 10), params)
        partial = excinfo.value.partial
        assert isinstance(partial, ConfidenceMap)
        assert np.all(partial.data[0] == 1.0)
        assert np.all(partial.data[-1] == 0.0)
        assert excinfo.value.slice_index is None

    @pytest.mark.slow
    def test_operating_point_full_size(self, rng):
        """A 400 x 270 frame solves in under two seconds."""
        img = random_image(rng, 270, 400)
        start = time.perf_counter()
        cm, stats = compute_confidence_map(img, RwParams(alpha=0.5, beta=100.0))
        elapsed = time.perf_counter() - start
        assert stats.converged
        assert elapsed < 2.0
        assert cm.width == 400
        assert np.all(cm.data[0] == 1.0)


class TestConfidenceMapType:

    def test_rejects_bad_boundary(self):
        with pytest.raises(ValueError, match="top row must be 1"):
            ConfidenceMap(data=np.full((3, 3), 0.5))

    def test_rejects_out_of_range(self):
        data = np.zeros((3, 2))
        data[0] = 1.0
        data[1] = 1.5
        with pytest.raises(ValueError):
            ConfidenceMap(data=data)


# ---------------------------------------------------------------------------
# compute_volume_confidence
# ---------------------------------------------------------------------------

class TestVolumeConfidence:

    def test_single_slice_matches_2d(self, rng):
        img = random_image(rng, 8, 7)
        vol = Volume3D.from_slices([img])
        cm, _ = compute_confidence_map(img)
        assert_array_equal(compute_volume_confidence(vol).data[0], cm.data)

    def test_identical_slices(self, rng):
        img = random_image(rng, 8, 7)
        out = compute_volume_confidence(Volume3D.from_slices([img, img, img]))
        assert_array_equal(out.data[0], out.data[1])
        assert_array_equal(out.data[1], out.data[2])

    def test_worker_count_does_not_change_output(self, rng):
        """Volumes come out the same whatever the pool size."""
        vol = Volume3D(data=rng.random((8, 12, 10)), spacing=(0.2, 0.2, 1.0))
        one = compute_volume_confidence(vol, workers=1)
        four = compute_volume_confidence(vol, workers=4)
        assert one.data.tobytes() == four.data.tobytes()
        assert four.spacing == (0.2, 0.2, 1.0)

    def test_failing_slice_index(self, rng):
        vol = Volume3D(data=rng.random((2, 8, 8)))
        with pytest.raises(PartialMapError) as excinfo:
            compute_volume_confidence(
                vol, RwParams(tol=1e-14, max_iter=1, preconditioner="jacobi")
            )
        assert excinfo.value.slice_index == 0


# ---------------------------------------------------------------------------
# sweeps and profiles
# ---------------------------------------------------------------------------

class TestSweep:

    def test_equal_lengths_are_zipped(self):
        assert sweep_pairs([0.5, 0.2, 0.2], [100, 400, 100]) == [
            (0.5, 100.0), (0.2, 400.0), (0.2, 100.0)
        ]

    def test_unequal_lengths_are_crossed(self):
        """Lists of different length form the full grid."""
        assert sweep_pairs([1, 2], [3]) == [(1.0, 3.0), (2.0, 3.0)]

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            sweep_pairs([], [1.0])

    def test_distinct_maps(self, rng):
        img = random_image(rng, 12, 12)
        results = sweep_confidence(img, [0.5, 0.2, 0.2], [100, 400, 100])
        maps = [cm.data for _, cm in results]
        assert [pair for pair, _ in results] == [(0.5, 100.0), (0.2, 400.0), (0.2, 100.0)]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not np.array_equal(maps[i], maps[j])

    def test_workers_do_not_change_output(self, rng):
        img = random_image(rng, 10, 10)
        one = sweep_confidence(img, [0.5, 2.0], [50, 100], workers=1)
        four = sweep_confidence(img, [0.5, 2.0], [50, 100], workers=4)
        for (_, a), (_, b) in zip(one, four):
            assert a.data.tobytes() == b.data.tobytes()


class TestDepthProfile:

    def test_uniform_profile(self):
        cm, _ = compute_confidence_map(uniform_image(5, 3), RwParams(alpha=0.0, tol=1e-12))
        assert_allclose(depth_profile(cm), [1.0, 0.75, 0.5, 0.25, 0.0], atol=1e-6)

    def test_profile_is_non_increasing_on_uniform_image(self):
        cm, _ = compute_confidence_map(Image2D(data=np.full((20, 8), 0.6)))
        assert np.all(np.diff(depth_profile(cm)) <= 1e-6)

    def test_strictly_decreasing_down_each_column(self):
        cm, _ = compute_confidence_map(
            Image2D(data=np.full((20, 8), 0.6)), RwParams(tol=1e-12)
        )
        assert np.all(np.diff(cm.data.astype(np.float64), axis=0) < 0.0)
