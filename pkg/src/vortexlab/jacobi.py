"""Jacobi operator along a closed geodesic: discretization on the parallel
frame, spectrum and Morse index, and the perturbed-curve family used by the
saddle machinery.

The operator acts on normal fields xi = xi^1 Xi_1 + xi^2 Xi_2 as
-xi'' + R(xi, gamma') gamma', discretized with periodic second differences in
the stored frame.  The stored frame may carry a uniform rotation rate (the
distributed holonomy), which enters as a covariant derivative correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ChartOverflowError, DegeneracyError
from .geometry import GeodesicLoop, MetricField, christoffel, exp_map, polyline_length

H_CURV = 1e-3       # step for Christoffel finite differences in the curvature
MARGIN_MIN = 1e-3   # nondegeneracy margin (units 1/length^2)
TOL_EIG = 1e-6      # eigenpair residual tolerance in L^2


def curvature_form(m: MetricField, x, tangent, e1, e2, step: float = H_CURV):
    """2x2 matrix A_ab = <R(Xi_a, T) T, Xi_b>_g at points x, symmetrized.

    The curvature tensor is assembled from central differences of the
    Christoffel symbols; the sign convention is fixed so that for the warped
    benchmark metric A = diag(a1, -a2) on the axis (second variation of
    arclength is positive along directions in which the curve lengthens).
    """
    x = np.asarray(x, dtype=float)
    gam = christoffel(m, x)
    dgam = np.empty(x.shape[:-1] + (3, 3, 3, 3))  # (..., a, k, i, j) = d_a Gamma^k_ij
    for a in range(3):
        e = np.zeros(3)
        e[a] = step
        dgam[..., a, :, :, :] = (christoffel(m, x + e) - christoffel(m, x - e)) / (2.0 * step)
    # R(d_i, d_j) d_k = R^l_{kij} d_l with
    # R^l_{kij} = d_i Gamma^l_jk - d_j Gamma^l_ik + Gamma^m_jk Gamma^l_im - Gamma^m_ik Gamma^l_jm
    riem = (
        np.einsum("...iljk->...lkij", dgam)
        - np.einsum("...jlik->...lkij", dgam)
        + np.einsum("...lim,...mjk->...lkij", gam, gam)
        - np.einsum("...ljm,...mik->...lkij", gam, gam)
    )
    g = m.metric(x)
    frames = np.stack([np.asarray(e1, dtype=float), np.asarray(e2, dtype=float)], axis=-2)
    t = np.asarray(tangent, dtype=float)
    # A_ab = - g_lm Xi_a^i T^j T^k R^l_{kij} Xi_b^m
    rp = -np.einsum("...lkij,...ai,...j,...k->...al", riem, frames, t, t)
    a_mat = np.einsum("...lm,...al,...bm->...ab", g, rp, frames)
    return 0.5 * (a_mat + np.swapaxes(a_mat, -1, -2))


def assemble_jacobi(loop: GeodesicLoop, m: MetricField | None = None) -> np.ndarray:
    """Symmetric 2N x 2N matrix of the Jacobi operator on frame coefficients.

    Ordering: flat index 2*k + a for sample k and frame component a.
    """
    m = m or loop.metric
    n = loop.n_samples
    h = loop.length / n
    a_mat = curvature_form(m, loop.samples, loop.tangents, loop.frame1, loop.frame2)
    omega = -loop.holonomy / loop.length  # stored-frame rotation rate

    mat = np.zeros((n, 2, n, 2))
    idx = np.arange(n)
    eye2 = np.eye(2)
    jrot = np.array([[0.0, -1.0], [1.0, 0.0]])
    # -(d/ds + omega J)^2 + A: periodic three-point stencil
    mat[idx, :, idx, :] += 2.0 / h**2 * eye2 + omega**2 * eye2 + a_mat
    mat[idx, :, (idx + 1) % n, :] += -1.0 / h**2 * eye2 - (omega / h) * jrot
    mat[idx, :, (idx - 1) % n, :] += -1.0 / h**2 * eye2 + (omega / h) * jrot
    mat = mat.reshape(2 * n, 2 * n)
    return 0.5 * (mat + mat.T)


@dataclass
class JacobiSpectrum:
    """Lowest eigenpairs of the discrete Jacobi operator.

    eigensections are L^2-orthonormal: (xi, xi)_{L^2} = h sum_k |xi_k|^2 = 1.
    """

    eigenvalues: np.ndarray      # (K,) ascending
    eigensections: np.ndarray    # (K, N, 2) frame coefficients
    index: int                   # count of negative eigenvalues of the full operator
    nondegeneracy_margin: float  # min |lambda| over the full spectrum
    spacing: float               # arclength step h = L / N

    def section(self, j: int) -> np.ndarray:
        return self.eigensections[j]

    def to_csv(self, path, header_lines=()):
        n = self.eigensections.shape[1]
        with open(path, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            cols = ["j", "lambda"]
            cols += [f"xi{a + 1}_{k}" for k in range(n) for a in (0, 1)]
            fh.write(",".join(cols) + "\n")
            for j, lam in enumerate(self.eigenvalues):
                flat = self.eigensections[j].reshape(-1)
                fh.write(
                    ",".join([str(j), f"{lam:.17g}"] + [f"{v:.17g}" for v in flat]) + "\n"
                )


def spectrum(matrix: np.ndarray, spacing: float, n_modes: int | None = None,
             margin_min: float = MARGIN_MIN, tol_eig: float = TOL_EIG) -> JacobiSpectrum:
    """Lowest eigenpairs, Morse index, and nondegeneracy margin.

    Raises DegeneracyError when an eigenvalue sits inside the margin: the
    geodesic fails the standing nondegeneracy assumption and the minmax
    machinery downstream would be meaningless.
    """
    matrix = np.asarray(matrix)
    if not np.allclose(matrix, matrix.T, atol=1e-9):
        raise ValueError("Jacobi matrix must be symmetric")
    evals, evecs = scipy.linalg.eigh(matrix)
    index = int(np.sum(evals < 0))
    margin = float(np.min(np.abs(evals)))
    if margin < margin_min:
        raise DegeneracyError(
            f"Jacobi eigenvalue {margin:.3e} inside the nondegeneracy margin {margin_min:.1e}"
        )
    if n_modes is None:
        n_modes = max(index + 4, 8)
    n_modes = min(n_modes, evals.size)
    n = matrix.shape[0] // 2
    sections = evecs[:, :n_modes].T.reshape(n_modes, n, 2) / np.sqrt(spacing)
    # residual check on the retained modes (L^2 norm scales out)
    resid = matrix @ evecs[:, :n_modes] - evecs[:, :n_modes] * evals[None, :n_modes]
    resid_l2 = np.linalg.norm(resid, axis=0)
    if np.any(resid_l2 > tol_eig * max(1.0, float(np.abs(evals[:n_modes]).max()))):
        raise DegeneracyError("eigenpair residual above tol_eig")
    return JacobiSpectrum(
        eigenvalues=evals[:n_modes].copy(),
        eigensections=sections,
        index=index,
        nondegeneracy_margin=margin,
        spacing=float(spacing),
    )


def loop_spectrum(loop: GeodesicLoop, n_modes: int | None = None,
                  margin_min: float = MARGIN_MIN) -> JacobiSpectrum:
    """Convenience composition: assemble and diagonalize for a loop."""
    mat = assemble_jacobi(loop)
    return spectrum(mat, loop.length / loop.n_samples, n_modes=n_modes, margin_min=margin_min)


def normal_field(loop: GeodesicLoop, coeffs: np.ndarray) -> np.ndarray:
    """Ambient vectors of a normal field given as (N, 2) frame coefficients."""
    return coeffs[:, :1] * loop.frame1 + coeffs[:, 1:2] * loop.frame2


def perturbed_loop(loop: GeodesicLoop, spec: JacobiSpectrum, w, max_amplitude: float) -> np.ndarray:
    """Closed polyline gamma_w(t) = exp_{gamma(t)} (sum_j w_j xi_j(t)).

    Raises ChartOverflowError if the pointwise amplitude exceeds
    ``max_amplitude`` (the tubular radius r0).
    """
    w = np.atleast_1d(np.asarray(w, dtype=float))
    coeffs = np.einsum("j,jka->ka", w, spec.eigensections[: w.size])
    amp = float(np.max(np.linalg.norm(coeffs, axis=1)))
    if amp > max_amplitude:
        raise ChartOverflowError(
            f"perturbation amplitude {amp:.4f} exceeds chart radius {max_amplitude:.4f}"
        )
    if not np.any(w):
        return loop.samples.copy()
    return exp_map(loop.metric, loop.samples, normal_field(loop, coeffs), check=False)


def arclength(m: MetricField, polyline: np.ndarray) -> float:
    """g-length of a closed polyline, segment metrics at midpoints."""
    return polyline_length(m, polyline)
