"""Periodic-box Riemannian geometry: analytic metrics, geodesic shooting and
relaxation, parallel frames, and Fermi (tubular) coordinates around a closed
loop.

The manifold is the flat 3-torus prod_a [0, box_a) carrying a user-supplied
smooth metric given as an analytic callback evaluable at arbitrary points.
All operations are pure and vectorized over leading array dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .errors import (
    AmbiguityError,
    CollapseError,
    DegenerateMetricError,
    IntegrationError,
    OutOfChartError,
    RelaxationError,
)
from .numutil import det3, inv3, ramp_down, wrap_delta, wrap_position

H_GAMMA = 1e-4      # central-difference step for metric derivatives, box units
TOL_GEO = 1e-6      # default geodesic residual tolerance
TOL_SPEED = 1e-8    # relative speed drift allowed along shot geodesics

_EPSILON3 = np.zeros((3, 3, 3))
for _i, _j, _k, _s in ((0, 1, 2, 1), (1, 2, 0, 1), (2, 0, 1, 1),
                       (0, 2, 1, -1), (2, 1, 0, -1), (1, 0, 2, -1)):
    _EPSILON3[_i, _j, _k] = _s


class MetricField:
    """Smooth periodic metric on a 3-torus with its sampling grid.

    ``metric_fn`` maps positions of shape (..., 3) to symmetric positive
    definite matrices of shape (..., 3, 3) and must be periodic with the box.
    """

    def __init__(self, grid_dims, box_lengths, metric_fn, name="custom", params=None):
        self.grid_dims = tuple(int(n) for n in grid_dims)
        self.box = np.asarray(box_lengths, dtype=float)
        if len(self.grid_dims) != 3 or any(n <= 0 for n in self.grid_dims):
            raise ValueError("grid_dims must be three positive integers")
        if self.box.shape != (3,) or np.any(self.box <= 0):
            raise ValueError("box_lengths must be three positive reals")
        self.metric_fn = metric_fn
        self.name = name
        self.params = dict(params or {})
        self.spacing = self.box / np.asarray(self.grid_dims)
        self._node_cache = {}

    # -- sampling ---------------------------------------------------------

    def metric(self, x):
        g = np.asarray(self.metric_fn(np.asarray(x, dtype=float)))
        return g

    def inverse_metric(self, x, g=None):
        if g is None:
            g = self.metric(x)
        det = det3(g)
        if np.any(det <= 0):
            raise DegenerateMetricError("metric determinant <= 0")
        return inv3(g, det)

    def sqrt_det(self, x, g=None):
        if g is None:
            g = self.metric(x)
        det = det3(g)
        if np.any(det <= 0):
            raise DegenerateMetricError("metric determinant <= 0")
        return np.sqrt(det)

    def norm(self, x, v, g=None):
        """g-norm of tangent vectors v at x."""
        if g is None:
            g = self.metric(x)
        return np.sqrt(np.einsum("...ij,...i,...j->...", g, v, v))

    def dot(self, x, u, v, g=None):
        if g is None:
            g = self.metric(x)
        return np.einsum("...ij,...i,...j->...", g, u, v)

    # -- grid -------------------------------------------------------------

    def node_axes(self):
        """Cell-centered node coordinates per axis: x_a(i) = (i + 1/2) h_a."""
        key = "axes"
        if key not in self._node_cache:
            self._node_cache[key] = tuple(
                (np.arange(n) + 0.5) * h for n, h in zip(self.grid_dims, self.spacing)
            )
        return self._node_cache[key]

    def node_points(self):
        key = "points"
        if key not in self._node_cache:
            ax = self.node_axes()
            X = np.meshgrid(*ax, indexing="ij")
            self._node_cache[key] = np.stack(X, axis=-1)
        return self._node_cache[key]

    def node_metric(self):
        key = "metric"
        if key not in self._node_cache:
            self._node_cache[key] = self.metric(self.node_points())
        return self._node_cache[key]

    def eigen_bounds(self):
        """(min, max) eigenvalue of g over the grid nodes."""
        key = "eig"
        if key not in self._node_cache:
            w = np.linalg.eigvalsh(self.node_metric())
            self._node_cache[key] = (float(w.min()), float(w.max()))
        return self._node_cache[key]


# ---------------------------------------------------------------------------
# built-in metric families
# ---------------------------------------------------------------------------

def _euclidean(x):
    out = np.zeros(x.shape[:-1] + (3, 3))
    out[..., 0, 0] = out[..., 1, 1] = out[..., 2, 2] = 1.0
    return out


def make_metric(name, grid_dims, box_lengths, **params) -> MetricField:
    """Construct a named metric family on the given grid.

    Families:
      euclidean     flat metric.
      warped_axis   g = diag(exp(2 phi chi), 1, 1) with phi = (a1 y1^2 - a2 y2^2)/2,
                    y the transverse offset from ``center``, chi a C^2 cutoff
                    equal to 1 for |y| <= r0/2 and 0 beyond r0.  The axis line
                    {y = 0} is a closed unit-speed geodesic.
      sheared_flat  pullback of the euclidean metric under the periodic shear
                    (x1, x2 + amp sin(2 pi x1 / L1), x3); geodesics are known
                    in closed form (preimages of straight lines).
    """
    box = np.asarray(box_lengths, dtype=float)
    if name == "euclidean":
        fn = _euclidean
    elif name == "warped_axis":
        a1 = float(params.get("a1", 39.5))
        a2 = float(params.get("a2", 19.7))
        r0 = float(params.get("r0", 0.2))
        center = np.asarray(params.get("center", (0.5 * box[1], 0.5 * box[2])), dtype=float)

        def fn(x, a1=a1, a2=a2, r0=r0, center=center, box=box):
            y1 = x[..., 1] - center[0]
            y2 = x[..., 2] - center[1]
            y1 = y1 - box[1] * np.round(y1 / box[1])
            y2 = y2 - box[2] * np.round(y2 / box[2])
            r = np.sqrt(y1 * y1 + y2 * y2)
            phi = 0.5 * (a1 * y1 * y1 - a2 * y2 * y2) * ramp_down(r, 0.5 * r0, r0)
            out = np.zeros(x.shape[:-1] + (3, 3))
            out[..., 0, 0] = np.exp(2.0 * phi)
            out[..., 1, 1] = 1.0
            out[..., 2, 2] = 1.0
            return out

    elif name == "sheared_flat":
        amp = float(params.get("amp", 0.05))

        def fn(x, amp=amp, box=box):
            w = 2.0 * np.pi / box[0]
            c = amp * w * np.cos(w * x[..., 0])
            out = np.zeros(x.shape[:-1] + (3, 3))
            out[..., 0, 0] = 1.0 + c * c
            out[..., 0, 1] = out[..., 1, 0] = c
            out[..., 1, 1] = 1.0
            out[..., 2, 2] = 1.0
            return out

    else:
        raise ValueError(f"unknown metric family '{name}'")
    return MetricField(grid_dims, box, fn, name=name, params=params)


# ---------------------------------------------------------------------------
# connection and geodesic shooting
# ---------------------------------------------------------------------------

def christoffel(m: MetricField, x, step: float = H_GAMMA):
    """Christoffel symbols Gamma^k_{ij} at x of shape (..., 3, 3, 3).

    Metric derivatives are central differences of the analytic callback with
    step ``step``; the result is exactly symmetric in (i, j).
    """
    x = np.asarray(x, dtype=float)
    g = m.metric(x)
    ginv = m.inverse_metric(x, g)
    dg = np.empty(x.shape[:-1] + (3, 3, 3))  # dg[..., a, i, j] = d_a g_ij
    for a in range(3):
        e = np.zeros(3)
        e[a] = step
        dg[..., a, :, :] = (m.metric(x + e) - m.metric(x - e)) / (2.0 * step)
    # Gamma^k_ij = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij)
    bracket = (
        np.einsum("...ijl->...lij", dg)
        + np.einsum("...jil->...lij", dg)
        - dg
    )
    return 0.5 * np.einsum("...kl,...lij->...kij", ginv, bracket)


def _geodesic_acc(m, x, v, step):
    gam = christoffel(m, x, step)
    return -np.einsum("...kij,...i,...j->...k", gam, v, v)


def _rk4_geodesic(m, x, v, num_steps):
    h = 1.0 / num_steps
    p, q = x.astype(float), v.astype(float)
    for _ in range(num_steps):
        k1x, k1v = q, _geodesic_acc(m, p, q, H_GAMMA)
        k2x, k2v = q + 0.5 * h * k1v, _geodesic_acc(m, p + 0.5 * h * k1x, q + 0.5 * h * k1v, H_GAMMA)
        k3x, k3v = q + 0.5 * h * k2v, _geodesic_acc(m, p + 0.5 * h * k2x, q + 0.5 * h * k2v, H_GAMMA)
        k4x, k4v = q + h * k3v, _geodesic_acc(m, p + h * k3x, q + h * k3v, H_GAMMA)
        p = p + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        q = q + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return p, q


def exp_map(m: MetricField, x, v, num_steps=None, check=True):
    """Endpoint at unit time of the geodesic with initial data (x, v).

    Fixed-step RK4 on the geodesic equation.  When ``check`` is on, the step
    count is doubled (deterministically) until the conserved speed drifts by
    less than TOL_SPEED relative; if that fails an IntegrationError is raised.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    speed0 = m.norm(x, v)
    vmax = float(np.max(speed0)) if speed0.size else 0.0
    if vmax == 0.0:
        return x.copy()
    if num_steps is None:
        num_steps = max(8, int(np.ceil(vmax / 0.02)))
    attempts = 4 if check else 1
    for attempt in range(attempts):
        p, q = _rk4_geodesic(m, x, v, num_steps)
        if not check:
            break
        drift = np.abs(m.norm(p, q) - speed0) / (1.0 + speed0)
        if float(np.max(drift)) <= TOL_SPEED:
            break
        num_steps *= 2
    else:
        raise IntegrationError(
            f"geodesic speed drift {float(np.max(drift)):.3e} exceeds tolerance"
        )
    return wrap_position(p, m.box)


def g_cross(m: MetricField, x, a, b, g=None):
    """Riemannian cross product: the g-dual of star(a^flat wedge b^flat)."""
    if g is None:
        g = m.metric(x)
    det = det3(g)
    ginv = inv3(g, det)
    cov = np.einsum("lmn,...m,...n->...l", _EPSILON3, a, b)
    return np.sqrt(det)[..., None] * np.einsum("...kl,...l->...k", ginv, cov)


# ---------------------------------------------------------------------------
# closed geodesics
# ---------------------------------------------------------------------------

@dataclass
class GeodesicLoop:
    """Closed discrete unit-speed curve with a single-valued normal frame.

    samples[i] corresponds to arclength parameter t_i = i * length / N.  The
    frame {tangent, frame1, frame2} is g-orthonormal at every sample; the
    discrete parallel-transport holonomy is distributed uniformly along the
    loop so the frame closes up.
    """

    metric: MetricField
    samples: np.ndarray      # (N, 3) wrapped into the box
    tangents: np.ndarray     # (N, 3), |T|_g = 1
    frame1: np.ndarray       # (N, 3)
    frame2: np.ndarray       # (N, 3)
    length: float
    holonomy: float = 0.0
    winding: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=int))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def params(self) -> np.ndarray:
        return np.arange(self.n_samples) * (self.length / self.n_samples)

    def residual(self) -> float:
        """max_t |nabla_{gamma'} gamma'|_g in arclength units.

        The discrete residual is computed per unit loop parameter (spacing
        1/N at speed ~ length), so dividing by length^2 converts to arclength.
        """
        r = _relax_residual(self.metric, self.samples)
        return float(np.max(self.metric.norm(self.samples, r)) / self.length**2)

    def to_csv(self, path, header_lines=()):
        rows = np.column_stack([
            self.params, self.samples, self.frame1, self.frame2,
        ])
        with open(path, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("t,x1,x2,x3,xi1_1,xi1_2,xi1_3,xi2_1,xi2_2,xi2_3\n")
            for row in rows:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def loop_from_csv(path, metric: MetricField) -> GeodesicLoop:
    data = np.loadtxt(path, delimiter=",", comments="#", skiprows=_csv_header_rows(path))
    samples = data[:, 1:4]
    f1 = data[:, 4:7]
    f2 = data[:, 7:10]
    return _finalize_loop(metric, samples, frame_seed=(f1, f2))


def _csv_header_rows(path):
    rows = 0
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                rows += 1
            else:
                return rows + 1  # column header line
    return rows


def _relax_residual(m: MetricField, pts: np.ndarray) -> np.ndarray:
    """Discrete geodesic residual per node for uniform parameter spacing 1/N."""
    n = pts.shape[0]
    dt = 1.0 / n
    dplus = wrap_delta(np.roll(pts, -1, axis=0) - pts, m.box)
    dminus = np.roll(dplus, 1, axis=0)
    vel = (dplus + dminus) / (2.0 * dt)
    gam = christoffel(m, pts)
    return (dplus - dminus) / dt**2 + np.einsum("nkij,ni,nj->nk", gam, vel, vel)


def _relax_jacobian(m: MetricField, pts: np.ndarray) -> np.ndarray:
    """Dense Jacobian of the discrete geodesic residual (3N x 3N)."""
    n = pts.shape[0]
    dt = 1.0 / n
    dplus = wrap_delta(np.roll(pts, -1, axis=0) - pts, m.box)
    dminus = np.roll(dplus, 1, axis=0)
    vel = (dplus + dminus) / (2.0 * dt)
    gam = christoffel(m, pts)
    # derivative of Gamma[v, v] with respect to the center point
    dgam = np.empty((n, 3, 3, 3, 3))  # (node, d/dx_c, k, i, j)
    for c in range(3):
        e = np.zeros(3)
        e[c] = H_GAMMA
        dgam[:, c] = christoffel(m, pts + e) - christoffel(m, pts - e)
    dgam /= 2.0 * H_GAMMA
    eye = np.eye(3)
    gv = np.einsum("nkij,nj->nki", gam, vel)  # Gamma[., v]
    j_plus = eye / dt**2 + gv / dt
    j_minus = eye / dt**2 - gv / dt
    j_center = -2.0 * eye / dt**2 + np.einsum("nckij,ni,nj->nkc", dgam, vel, vel)
    jac = np.zeros((n, 3, n, 3))
    idx = np.arange(n)
    jac[idx, :, idx, :] = j_center
    jac[idx, :, (idx + 1) % n, :] = j_plus
    jac[idx, :, (idx - 1) % n, :] = j_minus
    return jac.reshape(3 * n, 3 * n)


def polyline_length(m: MetricField, pts: np.ndarray) -> float:
    """Total g-length with segment metrics evaluated at midpoints."""
    d = wrap_delta(np.roll(pts, -1, axis=0) - pts, m.box)
    mid = wrap_position(pts + 0.5 * d, m.box)
    return float(np.sum(m.norm(mid, d)))


def _resample_arclength(m: MetricField, pts: np.ndarray, n_out=None):
    """Resample a closed polyline at uniform arclength via linear interpolation."""
    n = pts.shape[0]
    if n_out is None:
        n_out = n
    d = wrap_delta(np.roll(pts, -1, axis=0) - pts, m.box)
    mid = wrap_position(pts + 0.5 * d, m.box)
    seg = m.norm(mid, d)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    lift = np.concatenate([pts[:1], pts[:1] + np.cumsum(d, axis=0)], axis=0)
    target = np.arange(n_out) * (total / n_out)
    out = np.empty((n_out, 3))
    for c in range(3):
        out[:, c] = np.interp(target, s, lift[:, c])
    return wrap_position(out, m.box), total


def geodesic_relax(
    m: MetricField,
    init: np.ndarray,
    tol_geo: float = TOL_GEO,
    max_iter: int = 60,
    min_length: float = 0.1,
) -> GeodesicLoop:
    """Relax a closed polyline to a discrete closed geodesic.

    Damped Newton iteration on the constant-speed discrete geodesic equations
    (the iteration converges to saddle-type geodesics as well as minima),
    followed by arclength reparametrization and a polishing pass.  The output
    carries a parallel normal frame with its holonomy distributed uniformly.
    """
    pts = wrap_position(np.asarray(init, dtype=float).copy(), m.box)
    n = pts.shape[0]
    if n < 8:
        raise RelaxationError("need at least 8 samples")

    def newton(pts, iters, tol):
        for _ in range(iters):
            if polyline_length(m, pts) < min_length:
                raise CollapseError("curve length fell below the collapse threshold")
            res = _relax_residual(m, pts)
            rnorm = np.max(m.norm(pts, res)) / max(polyline_length(m, pts), min_length) ** 2
            if rnorm <= tol:
                return pts, rnorm
            jac = _relax_jacobian(m, pts)
            step, *_ = np.linalg.lstsq(jac, -res.reshape(-1), rcond=1e-10)
            step = step.reshape(n, 3)
            scale = 1.0
            base = np.linalg.norm(res)
            for _ in range(12):
                trial = wrap_position(pts + scale * step, m.box)
                if np.linalg.norm(_relax_residual(m, trial)) < base:
                    pts = trial
                    break
                scale *= 0.5
            else:
                raise RelaxationError("Newton step failed to reduce the residual")
        res = _relax_residual(m, pts)
        rnorm = np.max(m.norm(pts, res)) / max(polyline_length(m, pts), min_length) ** 2
        if rnorm > tol:
            raise RelaxationError(
                f"residual {rnorm:.3e} above tol_geo={tol:.1e} after {max_iter} iterations"
            )
        return pts, rnorm

    pts, _ = newton(pts, max_iter, tol_geo)
    pts, _ = _resample_arclength(m, pts)
    pts, _ = newton(pts, 8, tol_geo)
    return _finalize_loop(m, pts)


def _finalize_loop(m: MetricField, pts: np.ndarray, frame_seed=None) -> GeodesicLoop:
    """Attach length, unit tangents, and a closed parallel frame to a polyline."""
    n = pts.shape[0]
    d = wrap_delta(np.roll(pts, -1, axis=0) - pts, m.box)
    length = polyline_length(m, pts)
    winding = np.round(np.sum(d, axis=0) / m.box).astype(int)
    vel = (d + np.roll(d, 1, axis=0)) * (0.5 * n)
    tangents = vel / m.norm(pts, vel)[:, None]

    # seed normal vector: the coordinate axis least aligned with the tangent
    g0 = m.metric(pts[0])
    t0 = tangents[0]
    overlaps = [abs(m.dot(pts[0], np.eye(3)[c], t0, g0)) for c in range(3)]
    seed = np.eye(3)[int(np.argmin(overlaps))]
    xi = seed - m.dot(pts[0], seed, t0, g0) * t0
    xi = xi / m.norm(pts[0], xi, g0)

    frame1 = np.empty_like(pts)
    frame1[0] = xi
    seg_len = m.norm(wrap_position(pts + 0.5 * d, m.box), d)
    for i in range(n):
        j = (i + 1) % n
        mid = wrap_position(pts[i] + 0.5 * d[i], m.box)
        tm = d[i] / seg_len[i]
        k1 = -np.einsum("kij,i,j->k", christoffel(m, pts[i]), tm, frame1[i])
        k2 = -np.einsum(
            "kij,i,j->k", christoffel(m, mid), tm, frame1[i] + 0.5 * seg_len[i] * k1
        )
        nxt = frame1[i] + seg_len[i] * k2
        # control transport drift: re-orthonormalize against the tangent
        nxt = nxt - m.dot(pts[j], nxt, tangents[j]) * tangents[j]
        nxt = nxt / m.norm(pts[j], nxt)
        if j != 0:
            frame1[j] = nxt
        else:
            ret = nxt
    frame2 = g_cross(m, pts, tangents, frame1)
    frame2 = frame2 / m.norm(pts, frame2)[:, None]

    # distribute the holonomy angle uniformly so the frame is single-valued
    hol = float(np.arctan2(m.dot(pts[0], ret, frame2[0]), m.dot(pts[0], ret, frame1[0])))
    s = np.arange(n) / n
    ang = -hol * s
    c, sn = np.cos(ang)[:, None], np.sin(ang)[:, None]
    f1 = c * frame1 + sn * frame2
    f2 = -sn * frame1 + c * frame2
    return GeodesicLoop(
        metric=m, samples=pts, tangents=tangents, frame1=f1, frame2=f2,
        length=length, holonomy=hol, winding=winding,
    )


# ---------------------------------------------------------------------------
# tubular (Fermi) chart
# ---------------------------------------------------------------------------

class TubularChart:
    """Fermi coordinates psi(y, t) = exp_{gamma(t)}(y^1 Xi_1 + y^2 Xi_2).

    The loop and its frame are interpolated by periodic cubic splines; the
    inverse chart is solved by a vectorized Gauss-Newton iteration seeded from
    the nearest loop sample.
    """

    def __init__(self, loop: GeodesicLoop, radius: float):
        self.loop = loop
        self.radius = float(radius)
        self.metric = loop.metric
        m = self.metric
        n = loop.n_samples
        L = loop.length
        s = np.arange(n + 1) * (L / n)
        d = wrap_delta(np.roll(loop.samples, -1, axis=0) - loop.samples, m.box)
        lift = np.concatenate([loop.samples[:1], loop.samples[:1] + np.cumsum(d, axis=0)])
        self._slope = (lift[-1] - lift[0]) / L  # winding * box / L
        periodic_part = lift - s[:, None] * self._slope
        self._pos_spline = CubicSpline(s, periodic_part, bc_type="periodic", axis=0)
        f1 = np.concatenate([loop.frame1, loop.frame1[:1]])
        f2 = np.concatenate([loop.frame2, loop.frame2[:1]])
        self._f1_spline = CubicSpline(s, f1, bc_type="periodic", axis=0)
        self._f2_spline = CubicSpline(s, f2, bc_type="periodic", axis=0)
        self._tree = cKDTree(
            wrap_position(loop.samples, m.box), boxsize=m.box
        )
        self._grid_cache = {}

    # -- loop interpolation ------------------------------------------------

    def gamma(self, t):
        t = np.mod(np.asarray(t, dtype=float), self.loop.length)
        return wrap_position(self._pos_spline(t) + t[..., None] * self._slope, self.metric.box)

    def frames(self, t):
        """Interpolated orthonormal (tangent, Xi_1, Xi_2) at parameters t."""
        m = self.metric
        t = np.mod(np.asarray(t, dtype=float), self.loop.length)
        pos = wrap_position(self._pos_spline(t) + t[..., None] * self._slope, m.box)
        tan = self._pos_spline(t, 1) + self._slope
        g = m.metric(pos)
        tan = tan / m.norm(pos, tan, g)[..., None]
        f1 = self._f1_spline(t)
        f1 = f1 - m.dot(pos, f1, tan, g)[..., None] * tan
        f1 = f1 / m.norm(pos, f1, g)[..., None]
        f2 = self._f2_spline(t)
        f2 = f2 - m.dot(pos, f2, tan, g)[..., None] * tan
        f2 = f2 - m.dot(pos, f2, f1, g)[..., None] * f1
        f2 = f2 / m.norm(pos, f2, g)[..., None]
        return pos, tan, f1, f2

    def forward(self, y, t, num_steps=None):
        """psi(y, t); y of shape (..., 2), t of shape (...)."""
        y = np.asarray(y, dtype=float)
        pos, _, f1, f2 = self.frames(t)
        v = y[..., :1] * f1 + y[..., 1:2] * f2
        return exp_map(self.metric, pos, v, num_steps=num_steps, check=False)

    # -- inverse chart ------------------------------------------------------

    def inverse_batch(self, x, max_iter=16, tol=1e-10, exp_steps=8):
        """Vectorized inverse chart.

        Gauss-Newton on psi(y, t) = x, seeded from the nearest loop sample.
        The Jacobian is finite-differenced once and reused while the residual
        keeps contracting (psi is nearly affine over the chart).  Returns
        (y, t, ok): Fermi coordinates and a mask of points that converged with
        |y| < radius.
        """
        m = self.metric
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        xw = wrap_position(x, m.box)
        dist, idx = self._tree.query(xw)
        L = self.loop.length
        t = idx * (L / self.loop.n_samples)
        pos, _, f1, f2 = self.frames(t)
        delta = wrap_delta(xw - pos, m.box)
        g = m.metric(pos)
        y = np.stack([
            np.einsum("nij,ni,nj->n", g, delta, f1),
            np.einsum("nij,ni,nj->n", g, delta, f2),
        ], axis=-1)
        z = np.concatenate([y, t[:, None]], axis=1)

        # d_g < r implies d_euc < r / sqrt(lambda_min); prune everything else
        lam_min = max(self.metric.eigen_bounds()[0], 1e-12)
        reach = self.radius / np.sqrt(lam_min) + 2.0 * float(np.max(m.spacing))
        active = np.where(dist <= reach)[0]
        converged = np.zeros(x.shape[0], dtype=bool)

        def fwd(zz):
            return self.forward(zz[:, :2], zz[:, 2], num_steps=exp_steps)

        jac = None
        for it in range(max_iter):
            if active.size == 0:
                break
            za = z[active]
            res = wrap_delta(fwd(za) - xw[active], m.box)
            rn = np.linalg.norm(res, axis=1)
            done = rn < tol
            converged[active[done]] = True
            active = active[~done]
            if active.size == 0:
                break
            za, res = za[~done], res[~done]
            if jac is None or it % 4 == 3:
                cols = []
                for c in range(3):
                    zp = za.copy()
                    zp[:, c] += 1e-6
                    rp = wrap_delta(fwd(zp) - xw[active], m.box)
                    cols.append((rp - res) / 1e-6)
                jac = np.stack(cols, axis=-1)
            elif jac.shape[0] != za.shape[0]:
                jac = jac[~done]
            try:
                step = np.linalg.solve(jac, -res[..., None])[..., 0]
            except np.linalg.LinAlgError:
                raise OutOfChartError("chart inversion Jacobian is singular")
            step = np.clip(step, -0.5 * self.radius, 0.5 * self.radius)
            z[active] += step
        y = z[:, :2]
        t = np.mod(z[:, 2], L)
        ok = converged & (np.linalg.norm(y, axis=1) < self.radius)
        return y, t, ok

    def inverse(self, x):
        """Fermi coordinates of a single point; raises OutOfChartError outside."""
        x = np.asarray(x, dtype=float)
        self._check_ambiguity(x)
        y, t, ok = self.inverse_batch(x[None, :])
        if not ok[0]:
            raise OutOfChartError("point outside the tubular chart")
        return y[0], float(t[0])

    def _check_ambiguity(self, x, rel_tol=1e-9):
        m = self.metric
        deltas = wrap_delta(wrap_position(x, m.box) - self.loop.samples, m.box)
        dist = np.linalg.norm(deltas, axis=1)
        order = np.argsort(dist, kind="stable")
        best = order[0]
        n = self.loop.n_samples
        for j in order[1:]:
            sep = min(abs(j - best), n - abs(j - best))
            if sep > n // 8 and dist[j] <= dist[best] * (1.0 + rel_tol) + 1e-15:
                raise AmbiguityError("two nearest-point minimizers within tolerance")
            if dist[j] > dist[best] * (1.0 + rel_tol) + 4 * float(np.max(m.spacing)):
                break

    # -- grid cache ----------------------------------------------------------

    def grid_coords(self, m_grid: MetricField | None = None):
        """Fermi coordinates of all grid nodes within the chart.

        Returns (y, t, inside): arrays of shape grid_dims + (2,), grid_dims,
        grid_dims (bool).  Cached per grid.
        """
        m = m_grid or self.metric
        key = (m.grid_dims, tuple(m.box))
        if key not in self._grid_cache:
            pts = m.node_points().reshape(-1, 3)
            y, t, ok = self.inverse_batch(pts)
            shape = m.grid_dims
            self._grid_cache[key] = (
                y.reshape(shape + (2,)),
                t.reshape(shape),
                ok.reshape(shape),
            )
        return self._grid_cache[key]


def tubular_coords(chart: TubularChart, x):
    """Fermi coordinates (y, t) of x; the spec-level operation surface."""
    return chart.inverse(x)


def dist_to_loop(m: MetricField, loop: GeodesicLoop, x, chart: TubularChart | None = None):
    """Geodesic distance to the loop.

    Exact (|y| of the Fermi chart) within the chart radius; outside, a cached
    shortest-path distance on the 26-neighbor grid graph is interpolated.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    if chart is None:
        chart = _default_chart(m, loop)
    y, _, ok = chart.inverse_batch(pts)
    out = np.full(pts.shape[0], np.nan)
    out[ok] = np.linalg.norm(y[ok], axis=1)
    if np.any(~ok):
        dist_field = _grid_distance_field(m, loop, chart)
        out[~ok] = _trilinear(m, dist_field, pts[~ok])
    return float(out[0]) if single else out.reshape(x.shape[:-1])


_CHART_CACHE = {}


def _default_chart(m, loop):
    key = id(loop)
    if key not in _CHART_CACHE:
        _CHART_CACHE[key] = TubularChart(loop, radius=0.2 * float(np.min(m.box)))
    return _CHART_CACHE[key]


_DIST_CACHE = {}


def _grid_distance_field(m: MetricField, loop: GeodesicLoop, chart: TubularChart):
    """Approximate d_Gamma on grid nodes by Dijkstra on the 26-neighbor graph."""
    key = (id(loop), m.grid_dims, tuple(m.box))
    if key in _DIST_CACHE:
        return _DIST_CACHE[key]
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    dims = m.grid_dims
    nn = int(np.prod(dims))
    pts = m.node_points().reshape(-1, 3)
    idx = np.arange(nn).reshape(dims)
    rows, cols, vals = [], [], []
    shifts = [
        (a, b, c)
        for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)
        if (a, b, c) > (0, 0, 0)
    ]
    for sh in shifts:
        nbr = np.roll(idx, tuple(-s for s in sh), axis=(0, 1, 2))
        step = np.asarray(sh, dtype=float) * m.spacing
        mids = wrap_position(pts + 0.5 * step, m.box)
        w = m.norm(mids, np.broadcast_to(step, pts.shape))
        rows.append(idx.ravel())
        cols.append(nbr.ravel())
        vals.append(w)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    # virtual source: nodes with exact chart distance, plus the loop samples
    y, _, ok = chart.inverse_batch(pts)
    known = np.where(ok)[0]
    src = nn
    rows = np.concatenate([rows, np.full(known.shape, src)])
    cols = np.concatenate([cols, known])
    vals = np.concatenate([vals, np.linalg.norm(y[known], axis=1)])
    graph = coo_matrix((vals, (rows, cols)), shape=(nn + 1, nn + 1))
    dist = dijkstra(graph, directed=False, indices=src)[:nn]
    field = dist.reshape(dims)
    _DIST_CACHE[key] = field
    return field


def _trilinear(m: MetricField, field: np.ndarray, pts: np.ndarray):
    """Periodic trilinear interpolation of a node field at arbitrary points."""
    dims = np.asarray(m.grid_dims)
    u = pts / m.spacing - 0.5  # node i sits at (i + 1/2) h
    i0 = np.floor(u).astype(int)
    f = u - i0
    out = np.zeros(pts.shape[0])
    for da in (0, 1):
        for db in (0, 1):
            for dc in (0, 1):
                w = (
                    (f[:, 0] if da else 1 - f[:, 0])
                    * (f[:, 1] if db else 1 - f[:, 1])
                    * (f[:, 2] if dc else 1 - f[:, 2])
                )
                ii = (i0[:, 0] + da) % dims[0]
                jj = (i0[:, 1] + db) % dims[1]
                kk = (i0[:, 2] + dc) % dims[2]
                out += w * field[ii, jj, kk]
    return out
