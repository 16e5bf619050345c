"""Identified variance-bound matrices and their certification.

A bound matrix dominates the first-order design matrix in the positive
semidefinite order and vanishes wherever that matrix equals -1 (pairs of
cells that are never jointly observable), which makes the bounded quadratic
form estimable from one realization.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .moments import DesignMoments, rescaled_demeaning_matrix

PSD_TOL = 1e-8


class NotIdentifiedError(ValueError):
    """The candidate bound is nonzero on a never-jointly-observed pair."""


@dataclass
class VarianceBound:
    """Bound matrix, its -1-entry mask, and the weighted form used by the
    plug-in estimator (Hadamard division by joint probabilities, 0/0 -> 0)."""

    Dt: np.ndarray
    mask_minus1: np.ndarray
    Dt_over_p: np.ndarray
    psd_clipped: bool = False
    name: str = "custom"

    @property
    def kn(self) -> int:
        return self.Dt.shape[0]

    def to_csv(self, path, drop_tol: float = 1e-12):
        with open(path, "w") as fh:
            fh.write("i,j,value\n")
            rows, cols = np.nonzero(np.abs(self.Dt) >= drop_tol)
            for i, j in zip(rows, cols):
                fh.write(f"{i},{j},{self.Dt[i, j]:.15g}\n")


def _weighted_form(Dt: np.ndarray, p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(Dt)
    np.divide(Dt, p, out=out, where=p != 0)
    return out


def minus_one_mask(moments: DesignMoments, tol_m1: float = 1e-12) -> np.ndarray:
    """Entries of D with value -1 (never jointly observed pairs).

    Exact moments: |d + 1| <= tol detection. Monte Carlo: zero joint hits in
    p, the primary and less noisy datum.
    """
    live = ~(moments.zero_mask | moments.maybe_zero_mask)
    pair_live = np.outer(live, live)
    if moments.method == "exact":
        mask = (np.abs(moments.D + 1.0) <= tol_m1) & pair_live
    else:
        mask = (moments.p == 0) & pair_live
    np.fill_diagonal(mask, False)
    return mask


def aronow_samii_bound(moments: DesignMoments, tol_m1: float = 1e-12) -> VarianceBound:
    """General-purpose bound: add back the -1 entries and put their row
    counts on the diagonal (diagonally dominant increment, so validity is
    immediate from Gershgorin)."""
    if np.any(moments.zero_mask):
        raise NotIdentifiedError(
            "moments contain structurally zero inclusion probabilities; "
            "restrict to arms with positivity before bounding"
        )
    if np.any(moments.maybe_zero_mask):
        warnings.warn(
            "possibly-zero cells present; bound built on the remaining cells",
            RuntimeWarning,
        )
    mask = minus_one_mask(moments, tol_m1)
    indicator = mask.astype(float)
    Dt = moments.D + indicator + np.diag(indicator.sum(axis=1))
    Dt[mask] = 0.0  # exact zeros at identified -1 entries
    return VarianceBound(
        Dt=Dt,
        mask_minus1=mask,
        Dt_over_p=_weighted_form(Dt, moments.p),
        name="aronow_samii",
    )


def neyman_bound_crd(n: int, n_t: int) -> VarianceBound:
    """Classical two-arm bound: block-diagonal (n/n_t) A, (n/n_c) A.

    Requires at least two units per arm; with a single treated or control
    unit the within-arm joint inclusion probability is zero where the bound
    is nonzero, so it is not identified.
    """
    if not 0 < n_t < n:
        raise ValueError("n_t must lie strictly between 0 and n")
    n_c = n - n_t
    if n_t < 2 or n_c < 2:
        raise NotIdentifiedError(
            "Neyman bound needs within-arm pairs jointly observable (n_t >= 2 and n_c >= 2)"
        )
    a = rescaled_demeaning_matrix(n)
    Dt = np.zeros((2 * n, 2 * n))
    Dt[:n, :n] = (n / n_t) * a
    Dt[n:, n:] = (n / n_c) * a
    # CRD joint inclusion probabilities, assembled analytically
    p = np.empty((2 * n, 2 * n))
    pt, pc = n_t / n, n_c / n
    p[:n, :n] = pt * (n_t - 1) / (n - 1)
    p[n:, n:] = pc * (n_c - 1) / (n - 1)
    p[:n, n:] = pt * n_c / (n - 1)
    p[n:, :n] = pt * n_c / (n - 1)
    idx = np.arange(n)
    p[idx, idx] = pt
    p[n + idx, n + idx] = pc
    p[idx, n + idx] = 0.0
    p[n + idx, idx] = 0.0
    mask = np.zeros((2 * n, 2 * n), dtype=bool)
    mask[idx, n + idx] = True
    mask[n + idx, idx] = True
    return VarianceBound(
        Dt=Dt,
        mask_minus1=mask,
        Dt_over_p=_weighted_form(Dt, p),
        name="neyman",
    )


def custom_bound(Dt: np.ndarray, moments: DesignMoments, tol: float = PSD_TOL) -> VarianceBound:
    """Wrap a user-supplied bound matrix after certifying it against the
    design moments."""
    Dt = np.asarray(Dt, dtype=float)
    mask = minus_one_mask(moments)
    bound = VarianceBound(
        Dt=Dt, mask_minus1=mask, Dt_over_p=_weighted_form(Dt, moments.p), name="custom"
    )
    report = certify_bound(moments, bound, tol=tol)
    if not (report.psd_ok and report.identified_ok):
        raise NotIdentifiedError(
            f"supplied matrix is not a valid identified bound: min_eig={report.min_eigenvalue:.3g}, "
            f"mask violations={report.mask_violations}"
        )
    return bound


@dataclass
class BoundCertificate:
    min_eigenvalue: float
    psd_ok: bool
    mask_violations: int
    identified_ok: bool
    comparison_spectrum: np.ndarray | None = None
    comparison_spectrum_projected: np.ndarray | None = None

    def to_json(self, path=None):
        payload = {
            "min_eigenvalue": self.min_eigenvalue,
            "psd_ok": bool(self.psd_ok),
            "mask_violations": int(self.mask_violations),
            "identified_ok": bool(self.identified_ok),
        }
        if self.comparison_spectrum is not None:
            payload["comparison_spectrum"] = self.comparison_spectrum.tolist()
            payload["comparison_spectrum_projected"] = self.comparison_spectrum_projected.tolist()
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def intercept_projector(n: int, k: int) -> np.ndarray:
    """Projection onto the column space of the stacked arm intercepts."""
    kn = n * k
    p = np.zeros((kn, kn))
    for a in range(k):
        block = slice(a * n, (a + 1) * n)
        p[block, block] = 1.0 / n
    return p


def certify_bound(
    moments: DesignMoments,
    bound: VarianceBound,
    tol: float = PSD_TOL,
    compare: VarianceBound | None = None,
) -> BoundCertificate:
    """Validity and identification check, with an optional spectral
    comparison of two bounds (raw, and projected off the intercept space as
    is relevant for demeaned estimators)."""
    if bound.Dt.shape != moments.D.shape:
        raise ValueError("bound and moments dimensions differ")
    diff = bound.Dt - moments.D
    live = ~(moments.zero_mask | moments.maybe_zero_mask)
    diff = diff[np.ix_(live, live)]
    min_eig = float(np.linalg.eigvalsh(diff).min()) if diff.size else 0.0
    d_minus1 = minus_one_mask(moments)
    violations = int(np.sum(d_minus1 & (bound.Dt != 0.0)))
    cert = BoundCertificate(
        min_eigenvalue=min_eig,
        psd_ok=min_eig >= -tol,
        mask_violations=violations,
        identified_ok=violations == 0,
    )
    if compare is not None:
        delta = bound.Dt - compare.Dt
        cert.comparison_spectrum = np.sort(np.linalg.eigvalsh(delta))
        proj = np.eye(delta.shape[0]) - intercept_projector(moments.n, moments.k)
        cert.comparison_spectrum_projected = np.sort(np.linalg.eigvalsh(proj @ delta @ proj))
    return cert


def psd_clip(bound: VarianceBound) -> VarianceBound:
    """Zero the negative spectrum of the weighted form; the resulting
    plug-in estimates are upward biased and never negative."""
    eigvals, eigvecs = np.linalg.eigh(bound.Dt_over_p)
    clipped = (eigvecs * np.maximum(eigvals, 0.0)) @ eigvecs.T
    return VarianceBound(
        Dt=bound.Dt,
        mask_minus1=bound.mask_minus1,
        Dt_over_p=clipped,
        psd_clipped=True,
        name=bound.name,
    )
