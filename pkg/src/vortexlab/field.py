"""Complex order parameter on the periodic grid: energy density, normalized
energy, plaquette windings and the discrete Jacobian 2-form, pairings with
1-forms and scalar test functions, and checkpoint I/O.

Grid convention: nodes are cell-centered, x_a(i) = (i + 1/2) h_a, so cube
centers (the dual lattice carrying filaments) sit at integer multiples of h
and a vortex core placed on the dual lattice is centered in a node plaquette.

Fields may be sections of a unit-flux line bundle rather than plain periodic
functions: a homologically nontrivial filament class admits no plain periodic
order parameter with unit winding through transverse slices (the zeros of a
map T^2 -> C have total index zero), so the filament class is carried by
twisted wrap rules.  The twist multiplies values wrapping around the third
axis by a row-dependent phase; every finite difference goes through
``shifted`` so all derived quantities see one consistent rule.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import BlowUpError, NormalizationError, ResumeError
from .geometry import MetricField
from .numutil import det3, inv3

AMP_MIN = 0.3          # amplitude below which winding quantization is distrusted
WRAP_AXIS = 2          # axis whose wrap carries the twist phase
ROW_AXIS = 1           # axis along which the twist phase varies

CHECKPOINT_MAGIC = b"VXLB0001"
_HEADER_FMT = "<3q3dddid"


@dataclass(frozen=True)
class TwistSpec:
    """Unit-flux bundle twist: u(x + L e_3) = exp(i phi(x_2)) u(x).

    phi(x_2) = pi - 2 pi (x_2 - c2) / L_2 is the transition phase of the
    Jacobi-theta section in the gauge whose other two wraps are untwisted.
    ``flux`` is the signed number of flux quanta (0 means plain periodic).
    """

    flux: int
    c2: float

    def row_phases(self, n_rows: int, box_l2: float) -> np.ndarray:
        x2 = (np.arange(n_rows) + 0.5) * (box_l2 / n_rows)
        return self.flux * (np.pi - 2.0 * np.pi * (x2 - self.c2) / box_l2)

    def wrap_factors(self, n_rows: int, box_l2: float) -> np.ndarray:
        return np.exp(1j * self.row_phases(n_rows, box_l2))


@dataclass
class ComplexField:
    """Order parameter u_epsilon sampled at the grid nodes."""

    values: np.ndarray           # complex128, shape = metric.grid_dims
    epsilon: float
    metric: MetricField
    twist: TwistSpec | None = None
    _cache: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.complex128)
        if self.values.shape != self.metric.grid_dims:
            raise ValueError("field shape does not match the metric grid")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def copy_with(self, values: np.ndarray) -> "ComplexField":
        out = ComplexField(values, self.epsilon, self.metric, self.twist)
        out._cache = self._cache  # metric-derived caches are shareable
        return out

    def check_finite(self):
        if not np.all(np.isfinite(self.values.view(float))):
            raise BlowUpError("NaN/Inf in field values")

    @property
    def log_eps(self) -> float:
        return float(abs(np.log(self.epsilon)))

    def wrap_factors(self) -> np.ndarray | None:
        if self.twist is None or self.twist.flux == 0:
            return None
        key = ("wrapf", self.values.shape[ROW_AXIS])
        if key not in self._cache:
            self._cache[key] = self.twist.wrap_factors(
                self.values.shape[ROW_AXIS], self.metric.box[ROW_AXIS]
            )
        return self._cache[key]


def shifted(u, axis: int, step: int, wrap_factors: np.ndarray | None = None) -> np.ndarray:
    """values[..., i + step, ...] with periodic wrap and the bundle twist.

    ``step`` is +1 or -1.  Plain arrays (metric coefficients etc.) pass
    through with wrap_factors=None and get an ordinary periodic roll.
    """
    if isinstance(u, ComplexField):
        wrap_factors = u.wrap_factors()
        values = u.values
    else:
        values = u
    out = np.roll(values, -step, axis=axis)
    if wrap_factors is None or axis != WRAP_AXIS:
        return out
    phase = wrap_factors.reshape(1, -1)
    if step == 1:
        out[:, :, -1] = phase * out[:, :, -1]
    else:
        out[:, :, 0] = np.conj(phase) * out[:, :, 0]
    return out


def extended(u: ComplexField) -> np.ndarray:
    """Ghost-extended copy (n1+1, n2+1, n3+1) applying periodic/twisted wraps.

    All plaquette windings and corner-formula fluxes are evaluated on this one
    array, which makes closed-surface cancellations exact.
    """
    v = u.values
    ext = np.concatenate([v, v[:1]], axis=0)
    ext = np.concatenate([ext, ext[:, :1]], axis=1)
    wf = u.wrap_factors()
    top = ext[:, :, :1].copy()
    if wf is not None:
        wf_ext = np.concatenate([wf, wf[:1]])
        top = top * wf_ext.reshape(1, -1, 1)
    ext = np.concatenate([ext, top], axis=2)
    return ext


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

def _metric_arrays(u: ComplexField):
    key = ("metric_arrays",)
    if key not in u._cache:
        g = u.metric.node_metric()
        det = det3(g)
        u._cache[key] = (inv3(g, det), np.sqrt(det))
    return u._cache[key]


def gradient(u: ComplexField) -> list[np.ndarray]:
    """Central-difference components d_a u with periodic/twisted wrap."""
    h = u.metric.spacing
    return [
        (shifted(u, a, +1) - shifted(u, a, -1)) / (2.0 * h[a])
        for a in range(3)
    ]


def energy_density(u: ComplexField, node=None):
    """e_eps(u) = |grad u|_g^2 / 2 + (|u|^2 - 1)^2 / (4 eps^2) at the nodes."""
    ginv, _ = _metric_arrays(u)
    du = gradient(u)
    grad2 = np.zeros(u.values.shape)
    for a in range(3):
        grad2 += ginv[..., a, a] * (du[a].real**2 + du[a].imag**2)
        for b in range(a + 1, 3):
            grad2 += 2.0 * ginv[..., a, b] * (
                du[a].real * du[b].real + du[a].imag * du[b].imag
            )
    amp2 = u.values.real**2 + u.values.imag**2
    e = 0.5 * grad2 + (amp2 - 1.0) ** 2 / (4.0 * u.epsilon**2)
    if node is not None:
        return float(e[tuple(node)])
    return e


def normalized_energy(u: ComplexField, region=None) -> float:
    """E_eps(u) = (pi |log eps|)^-1 integral of e_eps vol_g over the region."""
    if u.epsilon >= 1.0:
        raise NormalizationError("epsilon must be < 1 for the log normalization")
    _, sqg = _metric_arrays(u)
    e = energy_density(u) * sqg
    if region is not None:
        e = e * region
    cell = float(np.prod(u.metric.spacing))
    return float(np.sum(e) * cell / (np.pi * u.log_eps))


def measure_pairing(u: ComplexField, chi) -> float:
    """Pairing of the normalized energy measure with a scalar test function."""
    if callable(chi):
        chi = chi(u.metric.node_points())
    if u.epsilon >= 1.0:
        raise NormalizationError("epsilon must be < 1 for the log normalization")
    _, sqg = _metric_arrays(u)
    cell = float(np.prod(u.metric.spacing))
    return float(np.sum(chi * energy_density(u) * sqg) * cell / (np.pi * u.log_eps))


# ---------------------------------------------------------------------------
# Jacobian 2-form and windings
# ---------------------------------------------------------------------------

def _edge_trapezoid(ext: np.ndarray, axis: int) -> np.ndarray:
    """Trapezoid rule for the line integral of u^1 du^2 along lattice edges."""
    sl_lo = [slice(None, -1)] * 3
    sl_hi = [slice(None, -1)] * 3
    sl_hi[axis] = slice(1, None)
    p = ext[tuple(sl_lo)]
    q = ext[tuple(sl_hi)]
    return 0.5 * (p.real + q.real) * (q.imag - p.imag)


def _edge_winding(ext: np.ndarray, axis: int) -> np.ndarray:
    sl_lo = [slice(None, -1)] * 3
    sl_hi = [slice(None, -1)] * 3
    sl_hi[axis] = slice(1, None)
    p = ext[tuple(sl_lo)]
    q = ext[tuple(sl_hi)]
    return np.angle(q * np.conj(p))


def _face_sum(edge: list[np.ndarray], a: int) -> np.ndarray:
    """Circulation around faces with normal +e_a from per-edge quantities.

    Edge arrays live on the non-extended index range; the rolls used here act
    transverse to each edge direction, where no twist correction applies --
    the twist already entered through the extended array the edges came from.
    """
    b, c = (a + 1) % 3, (a + 2) % 3
    return (
        edge[b]
        + np.roll(edge[c], -1, axis=b)
        - np.roll(edge[b], -1, axis=c)
        - edge[c]
    )


def jacobian_two_form(u: ComplexField) -> list[np.ndarray]:
    """Integrated discrete 2-form du^1 wedge du^2 per plaquette.

    Component a holds the flux through faces with normal +e_a whose corner
    node is (i, j, k).  Summed over the six faces of any grid cube the result
    cancels exactly.
    """
    key = ("two_form",)
    cached = u._cache.get(key)
    if cached is not None and cached[0] is u.values:
        return cached[1]
    ext = extended(u)
    edge = [_edge_trapezoid(ext, a) for a in range(3)]
    out = [_face_sum(edge, a) for a in range(3)]
    u._cache[key] = (u.values, out)
    return out


def winding_numbers(u: ComplexField) -> list[np.ndarray]:
    """Integer phase winding per plaquette (normal +e_a, corner node ijk)."""
    ext = extended(u)
    edge = [_edge_winding(ext, a) for a in range(3)]
    out = []
    for a in range(3):
        circ = _face_sum(edge, a)
        out.append(np.round(circ / (2.0 * np.pi)).astype(np.int64))
    return out


def low_amplitude_faces(u: ComplexField, amp_min: float = AMP_MIN) -> list[np.ndarray]:
    """Mask of faces with some corner amplitude below amp_min (core faces)."""
    ext = np.abs(extended(u))
    out = []
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        m = ext[:-1, :-1, :-1].copy()
        for db, dc in ((1, 0), (0, 1), (1, 1)):
            sl = [slice(None, -1)] * 3
            if db:
                sl[b] = slice(1, None)
            if dc:
                sl[c] = slice(1, None)
            m = np.minimum(m, ext[tuple(sl)])
        out.append(m < amp_min)
    return out


def jacobian_flux(u: ComplexField, face, amp_min: float = AMP_MIN):
    """Flux of Ju through one oriented grid face, with a core flag.

    When every boundary node carries amplitude >= amp_min the face is in the
    quantized regime and the flux is pi times the integer winding; otherwise
    the exact corner-formula integral is returned and the face is flagged as
    a core face via the second return value.
    """
    a, i, j, k = face
    ext = extended(u)
    b, c = (a + 1) % 3, (a + 2) % 3
    idx = np.array([i, j, k])
    corners = []
    for db, dc in ((0, 0), (1, 0), (1, 1), (0, 1)):
        p = idx.copy()
        p[b] += db
        p[c] += dc
        corners.append(complex(ext[tuple(p)]))
    amps = np.abs(corners)
    if np.min(amps) >= amp_min:
        circ = 0.0
        for t in range(4):
            circ += np.angle(corners[(t + 1) % 4] * np.conj(corners[t]))
        return np.pi * float(np.round(circ / (2.0 * np.pi))), False
    raw = 0.0
    for t in range(4):
        p, q = corners[t], corners[(t + 1) % 4]
        raw += 0.5 * (p.real + q.real) * (q.imag - p.imag)
    return float(raw), True


# ---------------------------------------------------------------------------
# discrete 1-forms and the current pairing
# ---------------------------------------------------------------------------

@dataclass
class OneForm:
    """Discrete 1-form: coordinate components sampled at dual-edge midpoints.

    components[a][i, j, k] is the e_a-component at the center of the face
    with normal +e_a and corner node (i, j, k), which is the midpoint of the
    dual edge crossing that face.
    """

    components: list

    @classmethod
    def zero(cls, dims):
        return cls([np.zeros(dims) for _ in range(3)])

    @classmethod
    def from_function(cls, m: MetricField, fn):
        comps = []
        for a in range(3):
            comps.append(np.asarray(fn(face_centers(m, a)))[..., a])
        return cls(comps)

    def __mul__(self, s):
        return OneForm([c * s for c in self.components])

    __rmul__ = __mul__

    def __add__(self, other):
        return OneForm([a + b for a, b in zip(self.components, other.components)])


def face_centers(m: MetricField, a: int) -> np.ndarray:
    """Positions of the centers of faces with normal +e_a, corner node ijk."""
    pts = m.node_points().copy()
    b, c = (a + 1) % 3, (a + 2) % 3
    pts[..., b] += 0.5 * m.spacing[b]
    pts[..., c] += 0.5 * m.spacing[c]
    return pts


def pair_current(u: ComplexField, phi: OneForm) -> float:
    """star Ju paired with a discrete 1-form: sum_a flux_a * phi_a * h_a.

    Uses the exact corner-formula 2-form, so the pairing is linear in both
    arguments and resolves core positions at second order.
    """
    two = jacobian_two_form(u)
    h = u.metric.spacing
    total = 0.0
    for a in range(3):
        total += float(np.sum(two[a] * phi.components[a])) * h[a]
    return total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path, u: ComplexField, time: float, extra_meta: str = ""):
    """Binary checkpoint: magic, dims, box, epsilon, time, twist, then
    row-major interleaved re/im float64 values."""
    flux = 0 if u.twist is None else u.twist.flux
    c2 = 0.0 if u.twist is None else u.twist.c2
    header = CHECKPOINT_MAGIC + struct.pack(
        _HEADER_FMT, *u.values.shape, *u.metric.box, u.epsilon, time, flux, c2
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(u.values, dtype=np.complex128).tobytes())
    if extra_meta:
        with open(str(path) + ".meta", "w") as fh:
            fh.write(extra_meta)


def read_checkpoint(path, metric: MetricField | None = None):
    """Read a checkpoint; returns (field, time).

    When a metric is supplied its grid and box must match the stored header,
    otherwise a ResumeError is raised.
    """
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ResumeError(f"bad checkpoint magic {magic!r}")
        raw = fh.read(struct.calcsize(_HEADER_FMT))
        *dims_box, epsilon, time, flux, c2 = struct.unpack(_HEADER_FMT, raw)
        dims = tuple(int(d) for d in dims_box[:3])
        box = np.array(dims_box[3:6], dtype=float)
        data = np.frombuffer(fh.read(), dtype=np.complex128).reshape(dims).copy()
    if metric is None:
        metric = MetricField(dims, box, _identity_metric_fn)
    elif tuple(metric.grid_dims) != dims or not np.allclose(metric.box, box):
        raise ResumeError("checkpoint grid/box does not match the configuration")
    twist = TwistSpec(int(flux), float(c2)) if flux else None
    return ComplexField(data, float(epsilon), metric, twist), float(time)


def _identity_metric_fn(x):
    out = np.zeros(x.shape[:-1] + (3, 3))
    out[..., 0, 0] = out[..., 1, 1] = out[..., 2, 2] = 1.0
    return out


# ---------------------------------------------------------------------------
# the Jacobi-theta unit section
# ---------------------------------------------------------------------------

def theta_section(m: MetricField, c2: float, c3: float, flux: int = 1):
    """Smooth unit-modulus section with a single +-1 winding line at (c2, c3).

    Built from the Jacobi theta function theta_1(pi zeta, q) with
    zeta = ((x2 - c2) + i (x3 - c3)) / L2 and nome q = exp(-pi L3 / L2),
    normalized to unit modulus and gauged so only the third-axis wrap is
    twisted.  Returns (values, TwistSpec); values has the full grid shape.
    """
    ax = m.node_axes()
    l2, l3 = m.box[1], m.box[2]
    x2 = ax[1][:, None]
    x3 = ax[2][None, :]
    zeta = ((x2 - c2) + 1j * (x3 - c3)) / l2
    v = np.pi * zeta
    q = np.exp(-np.pi * l3 / l2)
    th = np.zeros_like(v)
    for n in range(8):
        th = th + (-1.0) ** n * q ** ((n + 0.5) ** 2) * np.sin((2 * n + 1) * v)
    mod = np.abs(th)
    if np.any(mod == 0):
        raise ValueError("theta section vanishes at a grid node; shift the center")
    unit = th / mod
    gauge = np.exp(-1j * np.pi * (x2 - c2) / l2)
    slice2d = unit * gauge
    if flux == -1:
        slice2d = np.conj(slice2d)
    elif flux != 1:
        raise ValueError("theta section supports flux = +-1")
    values = np.broadcast_to(slice2d[None, :, :], m.grid_dims).copy()
    return values, TwistSpec(flux, float(c2))
