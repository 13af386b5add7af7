import numpy as np
import pytest

from vortexlab import geometry as G
from vortexlab import jacobi as J
from vortexlab.errors import ChartOverflowError, DegeneracyError


def axis_polyline(n):
    ts = np.linspace(0.0, 1.0, n, endpoint=False)
    return np.stack([ts, np.full_like(ts, 0.5), np.full_like(ts, 0.5)], axis=-1)


@pytest.fixture(scope="module")
def bench_loop256(bench_metric):
    return G.geodesic_relax(bench_metric, axis_polyline(256))


@pytest.fixture(scope="module")
def bench_spec(bench_loop256):
    return J.loop_spectrum(bench_loop256, n_modes=8)


def analytic_eigenvalues(a1, a2, L=1.0, kmax=4):
    vals = []
    for k in range(kmax + 1):
        mult = 1 if k == 0 else 2
        vals += [(2 * np.pi * k / L) ** 2 + a1] * mult
        vals += [(2 * np.pi * k / L) ** 2 - a2] * mult
    return np.sort(vals)


class TestAssembly:
    def test_flat_eigenvalues_doubly_degenerate(self, flat_metric):
        loop = G.geodesic_relax(flat_metric, axis_polyline(128))
        mat = J.assemble_jacobi(loop)
        evals = np.sort(np.linalg.eigvalsh(mat))
        n = loop.n_samples
        h = 1.0 / n
        # discrete symbol of the periodic second difference, each twice
        ks = np.arange(n)
        sym = np.sort(np.concatenate([(2 - 2 * np.cos(2 * np.pi * ks / n)) / h**2] * 2))
        assert np.abs(evals - sym).max() < 1e-6 * sym.max()

    def test_symmetry(self, bench_loop256):
        mat = J.assemble_jacobi(bench_loop256)
        assert np.abs(mat - mat.T).max() == 0.0

    def test_benchmark_matches_analytic(self, bench_spec):
        ref = analytic_eigenvalues(39.5, 19.7)[:8]
        got = bench_spec.eigenvalues
        assert np.abs(got - ref).max() / np.abs(ref).max() < 0.01
        assert np.abs(got[0] + 19.7) < 0.01 * 19.7

    def test_eigenvalue_h2_convergence(self, bench_metric):
        errs = []
        for n in (64, 128):
            loop = G.geodesic_relax(bench_metric, axis_polyline(n))
            spec = J.loop_spectrum(loop, n_modes=4)
            ref = analytic_eigenvalues(39.5, 19.7)[:4]
            errs.append(np.abs(spec.eigenvalues - ref).max())
        assert errs[0] / errs[1] > 3.0  # second order would give 4


class TestSpectrum:
    def test_index_one(self, bench_spec):
        assert bench_spec.index == 1
        assert bench_spec.nondegeneracy_margin > 1.0

    def test_flat_degenerate(self, flat_loop):
        with pytest.raises(DegeneracyError):
            J.loop_spectrum(flat_loop)

    def test_index_three_for_large_a2(self):
        # a2 = 59.2 in ((2 pi)^2, (4 pi)^2): negative modes are -a2 and
        # (2 pi)^2 - a2 twice, counted by the dense eigen-oracle
        m = G.make_metric("warped_axis", (32, 32, 32), (1, 1, 1), a1=39.5, a2=59.2, r0=0.2)
        loop = G.geodesic_relax(m, axis_polyline(128))
        spec = J.loop_spectrum(loop)
        assert spec.index == 3
        ref = np.sort([-59.2, (2 * np.pi) ** 2 - 59.2, (2 * np.pi) ** 2 - 59.2])
        assert np.abs(spec.eigenvalues[:3] - ref).max() < 0.01 * 59.2

    def test_eigensections_l2_orthonormal(self, bench_spec):
        k = bench_spec.eigenvalues.size
        gram = bench_spec.spacing * np.einsum(
            "ika,jka->ij", bench_spec.eigensections, bench_spec.eigensections
        )
        assert np.abs(gram - np.eye(k)).max() < 1e-8


class TestPerturbedLoop:
    def test_zero_returns_loop(self, bench_loop256, bench_spec):
        out = J.perturbed_loop(bench_loop256, bench_spec, [0.0], max_amplitude=0.2)
        assert np.array_equal(out, bench_loop256.samples)

    def test_unstable_direction_shortens(self, bench_loop256, bench_spec):
        m = bench_loop256.metric
        L = bench_loop256.length
        s = 0.02
        poly = J.perturbed_loop(bench_loop256, bench_spec, [s], max_amplitude=0.2)
        drop = L - J.arclength(m, poly)
        assert drop > 0.25 * abs(bench_spec.eigenvalues[0]) * s**2

    def test_stable_direction_lengthens(self, bench_loop256, bench_spec):
        m = bench_loop256.metric
        L = bench_loop256.length
        s = 0.02
        w = np.zeros(2)
        w[1] = s  # first H_+ mode
        poly = J.perturbed_loop(bench_loop256, bench_spec, w, max_amplitude=0.2)
        gain = J.arclength(m, poly) - L
        assert gain > 0.25 * bench_spec.eigenvalues[1] * s**2

    def test_quadratic_model_richardson(self, bench_loop256, bench_spec):
        # q(s) = L - arclength(gamma_{s xi_1}); q(s)/s^2 -> |lambda_1|/2
        m = bench_loop256.metric
        L = bench_loop256.length

        def q_over_s2(s):
            poly = J.perturbed_loop(bench_loop256, bench_spec, [s], max_amplitude=0.2)
            return (L - J.arclength(m, poly)) / s**2

        q1, q2 = q_over_s2(0.02), q_over_s2(0.01)
        q_ext = (4.0 * q2 - q1) / 3.0
        target = 0.5 * abs(bench_spec.eigenvalues[0])
        assert abs(q_ext - target) / target < 0.05

    def test_amplitude_guard(self, bench_loop256, bench_spec):
        with pytest.raises(ChartOverflowError):
            J.perturbed_loop(bench_loop256, bench_spec, [0.5], max_amplitude=0.2)


class TestArclength:
    def test_flat_axis(self, flat_metric):
        assert J.arclength(flat_metric, axis_polyline(64)) == pytest.approx(1.0, abs=1e-12)

    def test_circle(self, flat_metric):
        rho = 0.2
        th = np.linspace(0, 2 * np.pi, 128, endpoint=False)
        circ = np.stack([np.full_like(th, 0.5), 0.5 + rho * np.cos(th), 0.5 + rho * np.sin(th)], -1)
        got = J.arclength(flat_metric, circ)
        assert abs(got - 2 * np.pi * rho) < 1e-3

    def test_second_order_ratio(self, flat_metric):
        rho = 0.2
        errs = []
        for n in (64, 128):
            th = np.linspace(0, 2 * np.pi, n, endpoint=False)
            circ = np.stack(
                [np.full_like(th, 0.5), 0.5 + rho * np.cos(th), 0.5 + rho * np.sin(th)], -1
            )
            errs.append(abs(J.arclength(flat_metric, circ) - 2 * np.pi * rho))
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)
