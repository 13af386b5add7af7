import numpy as np
import pytest

from vortexlab import currents as C
from vortexlab import field as F
from vortexlab import geometry as G
from vortexlab.errors import HomologyError
from vortexlab.numutil import core_profile


@pytest.fixture(scope="module")
def flat32():
    return G.make_metric("euclidean", (32, 32, 32), (1.0, 1.0, 1.0))


def straight_current(m, j, k, mult=1):
    n = m.grid_dims[0]
    return C.OneCurrent(m, {(0, i, j, k): mult for i in range(n)})._normalized()


def resolved_vortex(m, eps, winding=1):
    vals, tw = F.theta_section(m, 0.5, 0.5, flux=1)
    pts = m.node_points()
    r = np.sqrt((pts[..., 1] - 0.5) ** 2 + (pts[..., 2] - 0.5) ** 2)
    if winding == 2:
        th = np.arctan2(pts[..., 2] - 0.5, pts[..., 1] - 0.5)
        vals = vals * np.exp(1j * th)  # extra phase turn: degree 2 around the axis
    return F.ComplexField(vals * core_profile(r / eps), eps, m, tw)


class TestExtraction:
    def test_uniform_field_empty(self, flat32):
        u = F.ComplexField(np.full(flat32.grid_dims, 1.0 + 0.0j), 0.05, flat32)
        assert C.extract_filament(u).is_empty()

    def test_straight_datum_single_unit_loop(self, flat32):
        u = resolved_vortex(flat32, eps=0.1)
        t = C.extract_filament(u)
        assert not t.boundary_charges()
        loops = t.loops()
        assert len(loops) == 1
        pos, mult = loops[0]
        assert mult == 1
        assert t.mass() == pytest.approx(1.0, abs=1e-12)
        # within one cell of the axis
        assert np.abs(pos[:, 1:] - 0.5).max() <= flat32.spacing[1] + 1e-12

    def test_degree_two_multiplicity(self, flat32):
        u = resolved_vortex(flat32, eps=0.1, winding=2)
        t = C.extract_filament(u)
        assert not t.boundary_charges()
        mults = {abs(v) for v in t.edges.values()}
        assert 2 in mults
        assert t.mass() == pytest.approx(2.0, abs=1e-12)

    def test_boundary_free_always(self, flat32):
        rng = np.random.default_rng(8)
        vals = rng.standard_normal(flat32.grid_dims) + 1j * rng.standard_normal(flat32.grid_dims)
        u = F.ComplexField(vals, 0.1, flat32)
        t = C.extract_filament(u)
        assert not t.boundary_charges()


class TestMass:
    def test_empty(self, flat32):
        assert C.mass(C.OneCurrent(flat32, {})) == 0.0

    def test_axis_loop_unit(self, flat32):
        assert C.mass(straight_current(flat32, 16, 16)) == pytest.approx(1.0)

    def test_multiplicity_three(self, flat32):
        assert C.mass(straight_current(flat32, 16, 16, mult=3)) == pytest.approx(3.0)

    def test_warped_metric_weighting(self):
        m = G.make_metric("warped_axis", (32, 32, 32), (1, 1, 1), a1=8.0, a2=4.0, r0=0.2)
        t = straight_current(m, 16, 16)  # on the axis: g_00 = 1 there
        assert C.mass(t) == pytest.approx(1.0, abs=1e-10)


class TestBoundary:
    def test_single_face_four_edges(self, flat32):
        s = C.TwoChain(flat32, {(1, 4, 5, 6): 1.0})
        bd = C.boundary(s)
        assert len(bd.edges) == 4
        assert all(abs(v) == 1.0 for v in bd.edges.values())

    def test_closed_surface_zero(self, flat32):
        # all six faces of one dual cube, outward oriented, cancel
        faces = {}
        i, j, k = 5, 6, 7
        for a in range(3):
            lo = [i, j, k]
            hi = [i, j, k]
            hi[a] += 1
            faces[(a, *lo)] = faces.get((a, *lo), 0.0) - 1.0
            faces[(a, *hi)] = faces.get((a, *hi), 0.0) + 1.0
        bd = C.boundary(C.TwoChain(flat32, faces))
        assert not bd.edges

    def test_dd_zero(self, flat32):
        rng = np.random.default_rng(3)
        faces = {}
        for _ in range(30):
            a = int(rng.integers(0, 3))
            ijk = tuple(int(x) for x in rng.integers(0, 32, 3))
            faces[(a, *ijk)] = float(rng.standard_normal())
        bd = C.boundary(C.TwoChain(flat32, faces))
        assert not bd.boundary_charges()


class TestFlatNorm:
    def test_identical_zero(self, flat32):
        t = straight_current(flat32, 16, 16)
        val, wit = C.flat_norm(t, t)
        assert val == 0.0
        assert not wit.faces

    def test_parallel_loops_cylinder_area(self, flat32):
        for sep in (2, 4, 8):
            t1 = straight_current(flat32, 16, 16)
            t2 = straight_current(flat32, 16 + sep, 16)
            val, wit = C.flat_norm(t1, t2)
            assert val == pytest.approx(sep / 32.0, abs=flat32.spacing[1] ** 2)
            resid = C.boundary(wit) - (t1 - t2)
            assert all(abs(v) < 1e-7 for v in resid.edges.values())

    def test_square_loop_disk_area(self, flat32):
        s = 0.25
        sq = C.rasterize_loop(
            flat32,
            np.array([
                [0.5, 0.25, 0.25], [0.5, 0.25 + s, 0.25],
                [0.5, 0.25 + s, 0.25 + s], [0.5, 0.25, 0.25 + s],
            ]),
        )
        val, _ = C.flat_norm(sq, C.OneCurrent(flat32, {}))
        assert val == pytest.approx(s * s, abs=1e-10)

    def test_shift_by_one_cell(self, flat32):
        t = straight_current(flat32, 16, 16)
        t2 = straight_current(flat32, 17, 16)
        val, _ = C.flat_norm(t, t2)
        h = flat32.spacing[1]
        assert val <= h * C.mass(t) + h**2

    def test_symmetry_and_triangle_random_triples(self, flat32):
        rng = np.random.default_rng(12)

        def rand_loop():
            j, k = (int(x) for x in rng.integers(10, 22, 2))
            w, d = (int(x) for x in rng.integers(1, 5, 2))
            i0 = int(rng.integers(0, 32))
            pts = np.array([
                [i0 / 32, (j + 1) / 32, (k + 1) / 32],
                [i0 / 32, (j + 1 + w) / 32, (k + 1) / 32],
                [i0 / 32, (j + 1 + w) / 32, (k + 1 + d) / 32],
                [i0 / 32, (j + 1) / 32, (k + 1 + d) / 32],
            ])
            return C.rasterize_loop(flat32, pts)

        for _ in range(4):
            a, b, c = rand_loop(), rand_loop(), rand_loop()
            dab = C.flat_norm(a, b, margin=8)[0]
            dba = C.flat_norm(b, a, margin=8)[0]
            dbc = C.flat_norm(b, c, margin=8)[0]
            dac = C.flat_norm(a, c, margin=8)[0]
            assert abs(dab - dba) < 1e-8
            assert dab + dbc >= dac - 1e-8

    def test_homology_error_for_nonbounding(self, flat32):
        # a single wrapping loop is not a boundary in the box
        t = straight_current(flat32, 16, 16)
        with pytest.raises(HomologyError):
            C.flat_norm(t, C.OneCurrent(flat32, {}))

    def test_extracted_vs_reference_within_cell(self, flat32):
        u = resolved_vortex(flat32, eps=0.1)
        t = C.extract_filament(u)
        ref = straight_current(flat32, 15, 15)  # dual line at exactly (0.5, 0.5)
        val, _ = C.flat_norm(t, ref)
        assert val <= 2 * flat32.spacing[1] * 1.0 + 1e-9


class TestRasterize:
    def test_axis_loop_exact(self, flat32):
        ts = np.linspace(0, 1, 64, endpoint=False)
        poly = np.stack([ts, np.full_like(ts, 0.5), np.full_like(ts, 0.5)], -1)
        t = C.rasterize_loop(flat32, poly)
        assert not t.boundary_charges()
        assert C.mass(t) == pytest.approx(1.0)
        # exactly the dual line through (0.5, 0.5)
        assert set(t.edges) == {(0, i, 15, 15) for i in range(32)}

    def test_pair_with_form_matches_line_integral(self, flat32):
        t = straight_current(flat32, 15, 15)

        def dt_form(x):
            out = np.zeros(x.shape)
            out[..., 0] = np.cos(2 * np.pi * x[..., 0])
            return out

        phi = F.OneForm.from_function(flat32, dt_form)
        # midpoint rule for integral of cos(2 pi t) over [0,1) is 0
        assert abs(t.pair_form(phi)) < 1e-12
