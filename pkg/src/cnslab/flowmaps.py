"""Lagrangian coordinates: flow maps, Jacobians, pullbacks, fixed points.

Conventions (all matrices act on column vectors):

- (Dz)_{ij} = d_j z_i (rows index components), grad z = (Dz)^T;
- the divergence of a matrix field contracts the *first* index,
  (div T)_j = sum_i d_i T_{ij}, so the Piola identity reads
  div(adj(DX)) = 0 columnwise;
- A : B = Tr(AB); the elementwise pairing sum_{ik} A_{ik} B_{ik} is
  written explicitly where used;
- adj(A) is the transposed cofactor matrix, adj(A) = det(A) A^{-1}.

The flow map is the Lagrangian integral X(t, y) = y + int_0^t vbar dtau
(trapezoid in time), with DX by spectral differentiation of the
displacement, so determinant and adjugate identities hold to rounding
for band-limited velocities.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import dyadic
from .fourier import SpectralField, gradient, divergence, _fftn
from .linearized import lame_solve
from .paraproduct import compose, dealias_mask, dealias_product


class JacobianError(RuntimeError):
    """The flow's Jacobian determinant dropped to or below zero."""


class NewtonError(RuntimeError):
    """Per-point Newton inversion of the flow map failed to converge."""


class DiffeomorphismError(RuntimeError):
    """Displacement too large for the map to be safely invertible."""


class NonContractionError(RuntimeError):
    """Fixed-point increments grew twice in a row."""


# ---------------------------------------------------------------------------
# determinants and adjugates


def jacobian_adjugate(DX):
    """(J, adj, A) from a matrix-field DX of shape (d, d, ...).

    Closed-form cofactors for d in {2, 3}; A = adj / J.  Raises
    JacobianError when |J| < 1e-12 anywhere (and the flow machinery
    upgrades that to J <= 0 checks where orientation matters).
    """
    DX = np.asarray(DX)
    d = DX.shape[0] if DX.ndim else 0
    if DX.ndim < 2 or DX.shape[1] != d or d not in (2, 3):
        raise ValueError(f"expected (d, d, ...) with d in {{2,3}}, got {DX.shape}")
    if d == 2:
        a, b = DX[0, 0], DX[0, 1]
        c, e = DX[1, 0], DX[1, 1]
        J = a * e - b * c
        adj = np.stack([np.stack([e, -b]), np.stack([-c, a])])
    else:
        c00 = DX[1, 1] * DX[2, 2] - DX[1, 2] * DX[2, 1]
        c01 = DX[1, 2] * DX[2, 0] - DX[1, 0] * DX[2, 2]
        c02 = DX[1, 0] * DX[2, 1] - DX[1, 1] * DX[2, 0]
        c10 = DX[0, 2] * DX[2, 1] - DX[0, 1] * DX[2, 2]
        c11 = DX[0, 0] * DX[2, 2] - DX[0, 2] * DX[2, 0]
        c12 = DX[0, 1] * DX[2, 0] - DX[0, 0] * DX[2, 1]
        c20 = DX[0, 1] * DX[1, 2] - DX[0, 2] * DX[1, 1]
        c21 = DX[0, 2] * DX[1, 0] - DX[0, 0] * DX[1, 2]
        c22 = DX[0, 0] * DX[1, 1] - DX[0, 1] * DX[1, 0]
        J = DX[0, 0] * c00 + DX[0, 1] * c01 + DX[0, 2] * c02
        adj = np.stack([np.stack([c00, c10, c20]),
                        np.stack([c01, c11, c21]),
                        np.stack([c02, c12, c22])])
    if np.min(np.abs(J)) < 1e-12:
        raise JacobianError(f"|det DX| reached {np.min(np.abs(J)):.3e}")
    A = adj / J
    return J, adj, A


# ---------------------------------------------------------------------------
# flow maps


@dataclass
class FlowSlice:
    """The flow map at a single time: displacement, DX, J, adj, A (samples)."""
    grid: object
    t: float
    disp: object            # vector SpectralField, X - id
    disp_samples: np.ndarray
    DX: np.ndarray          # (d, d) + shape
    J: np.ndarray
    adj: np.ndarray
    A: np.ndarray

    def points(self):
        """Mapped sample points X(y) = y + disp(y), shape (d,) + grid shape."""
        return self.grid.x_vectors() + self.disp_samples


class FlowMap:
    """Time series of flow maps X(t) = id + cumulative trapezoid of vbar."""

    def __init__(self, grid, t_grid, disp_fields, gate_integral, gate_c):
        self.grid = grid
        self.t_grid = np.asarray(t_grid, dtype=np.float64)
        self.disp_fields = disp_fields
        self.gate_integral = gate_integral
        self.gate_c = gate_c
        self._slices = {}

    def slice(self, i):
        i = int(i)
        if i < 0:
            i += len(self.t_grid)
        if i not in self._slices:
            disp = self.disp_fields[i]
            ds = disp.samples()
            d = self.grid.d
            gd = gradient(disp)   # (d*d,) stacked: rows d_j disp_i, i-major
            gs = gd.samples().reshape((d, d) + self.grid.shape)
            DX = np.eye(d).reshape((d, d) + (1,) * d) + gs
            J, adj, A = jacobian_adjugate(DX)
            if np.min(J) <= 0.0:
                raise JacobianError(
                    f"det DX <= 0 at t = {self.t_grid[i]:.4g} "
                    f"(min J = {np.min(J):.3e}); the flow folded over")
            self._slices[i] = FlowSlice(self.grid, float(self.t_grid[i]),
                                        disp, ds, DX, J, adj, A)
        return self._slices[i]

    def final(self):
        return self.slice(len(self.t_grid) - 1)


def flow_map(v_series, t_grid, gate_c=0.1, p=2.0):
    """Integrate Lagrangian velocities into a FlowMap (trapezoid in time).

    Warns when the smallness gate int ||grad vbar||_{B^{d/p}_{p,1}} dt
    exceeds gate_c — past that the Lagrangian change of coordinates is
    on thin ice analytically even if J stays positive.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    grid = v_series[0].grid
    d = grid.d
    zero = SpectralField.zero(grid, ncomp=d, real=True)
    disp_fields = [zero]
    acc = zero.coeffs
    spec = dyadic.NormSpec(s=d / p, p=p, r=1)
    gate = 0.0
    prev_norm = dyadic.besov_norm(gradient(v_series[0]), spec)
    for n in range(len(t_grid) - 1):
        dt = float(t_grid[n + 1] - t_grid[n])
        acc = acc + 0.5 * dt * (v_series[n].coeffs + v_series[n + 1].coeffs)
        disp_fields.append(SpectralField(grid, acc.copy(), real=True))
        cur_norm = dyadic.besov_norm(gradient(v_series[n + 1]), spec)
        gate += 0.5 * dt * (prev_norm + cur_norm)
        prev_norm = cur_norm
    if gate > gate_c:
        warnings.warn(f"flow smallness gate exceeded: int ||grad v|| = "
                      f"{gate:.3g} > {gate_c} (anchor: flow-gate)", stacklevel=2)
    fm = FlowMap(grid, t_grid, disp_fields, gate, gate_c)
    fm.final()   # force the J > 0 check at the worst (last) time
    return fm


def piola_residual(flow_slice):
    """max_j ||sum_i d_i adj(DX)_{ij}||_{L2} / ||DX||_{L2} — zero in theory."""
    grid = flow_slice.grid
    d = grid.d
    mask_axes = grid.axes
    cv = grid.cell_volume
    xi = grid.xi_vectors()
    adj_hat = _fftn(flow_slice.adj.astype(np.complex128), axes=mask_axes) * cv
    worst = 0.0
    for j in range(d):
        acc = np.zeros(grid.shape, dtype=np.complex128)
        for i in range(d):
            acc += 1j * xi[i] * adj_hat[i, j]
        worst = max(worst, float(np.sqrt(np.sum(np.abs(acc) ** 2)
                                         / grid.box_volume)))
    dx_norm = float(np.sqrt(np.mean(np.sum(flow_slice.DX ** 2, axis=(0, 1)))
                            * grid.box_volume))
    return worst / max(dx_norm, 1e-300)


# ---------------------------------------------------------------------------
# coordinate changes by spectral evaluation


_CHUNK = 2048


def _eval_coeff_rows(grid, coeff_rows, pts):
    """Evaluate stacked coefficient rows at arbitrary points.

    coeff_rows: (m, n_modes) complex; pts: (d, n_pts).  Returns
    (m, n_pts) complex.  One exponential matrix per chunk, shared by all
    rows — callers stack everything they need per Newton sweep.
    """
    d = grid.d
    xi_flat = grid.xi_vectors().reshape(d, -1)
    out = np.empty((coeff_rows.shape[0], pts.shape[1]), dtype=np.complex128)
    vol = grid.box_volume
    for lo in range(0, pts.shape[1], _CHUNK):
        hi = min(lo + _CHUNK, pts.shape[1])
        phase = xi_flat.T @ pts[:, lo:hi]
        E = np.exp(1j * phase)
        out[:, lo:hi] = coeff_rows @ E / vol
    return out


def eval_at_points(f, pts):
    """Evaluate a SpectralField's Fourier series at points of shape (d, n)."""
    grid = f.grid
    rows = f.coeffs.reshape(f.ncomp if f.is_vector else 1, -1)
    vals = _eval_coeff_rows(grid, rows, pts)
    if f.real:
        vals = vals.real
    return vals[0] if not f.is_vector else vals


def _check_displacement(flow_slice):
    limit = np.pi * flow_slice.grid.M
    worst = float(np.max(np.abs(flow_slice.disp_samples)))
    if worst >= limit:
        raise DiffeomorphismError(
            f"displacement {worst:.3g} exceeds half box edge {limit:.3g}; "
            f"refusing to invert the flow map")


def invert_flow(flow_slice, x_pts, tol=1e-12, max_iter=20):
    """Solve X(y) = x per point by Newton; returns y of shape (d, n).

    The initial guess y = x - disp(x) is first-order accurate; each
    sweep evaluates the displacement and its gradient spectrally at the
    current points (one stacked evaluation) and applies the closed-form
    inverse Jacobian.
    """
    _check_displacement(flow_slice)
    grid = flow_slice.grid
    d = grid.d
    disp = flow_slice.disp
    gd = gradient(disp)
    rows = np.concatenate([disp.coeffs.reshape(d, -1),
                           gd.coeffs.reshape(d * d, -1)])
    y = x_pts - eval_at_points(disp, x_pts)
    scale = max(1.0, 2.0 * np.pi * grid.M)
    for _ in range(max_iter):
        vals = _eval_coeff_rows(grid, rows, y).real
        disp_y = vals[:d]
        DX = vals[d:].reshape(d, d, -1) + np.eye(d)[:, :, None]
        resid = y + disp_y - x_pts
        if float(np.max(np.abs(resid))) < tol * scale:
            return y
        _, _, A = jacobian_adjugate(DX)
        y = y - np.einsum("ij...,j...->i...", A, resid)
    raise NewtonError(
        f"flow inversion stalled at residual {np.max(np.abs(resid)):.3e} "
        f"after {max_iter} Newton sweeps")


def change_coords(f, flow_slice, direction):
    """Compose a field with the flow map or its inverse.

    direction "to_lagrangian": fbar(y) = f(X(y)) — evaluate f's series at
    the mapped sample points.  direction "to_eulerian": g(x) = fbar(X^{-1}(x))
    — invert the map per grid point by Newton, then evaluate.  Both keep
    spectral accuracy; both enforce the diffeomorphism heuristic
    (J > 0 was checked when the slice was built; displacement under half
    a box edge is checked here).
    """
    grid = flow_slice.grid
    if direction == "to_lagrangian":
        _check_displacement(flow_slice)
        pts = flow_slice.points().reshape(grid.d, -1)
        vals = eval_at_points(f, pts)
    elif direction == "to_eulerian":
        x_pts = grid.x_vectors().reshape(grid.d, -1)
        y = invert_flow(flow_slice, x_pts)
        vals = eval_at_points(f, y)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    shape = ((f.ncomp,) if f.is_vector else ()) + grid.shape
    return SpectralField.from_samples(grid, vals.reshape(shape))


def pullback_divergence_residual(H, flow_slice):
    """Residual of div_x H (X(y)) = J^{-1} div_y(adj(DX) Hbar), relative.

    Both sides are computed independently: the left by spectral
    divergence then composition, the right from the pulled-back field
    and the adjugate.  The agreement rests on the Piola identity.
    """
    grid = flow_slice.grid
    lhs = change_coords(divergence(H), flow_slice, "to_lagrangian").samples()
    Hbar = change_coords(H, flow_slice, "to_lagrangian").samples()
    G = np.einsum("ij...,j...->i...", flow_slice.adj, Hbar)
    rhs = divergence(SpectralField.from_samples(grid, G)).samples() / flow_slice.J
    num = float(np.max(np.abs(lhs - rhs)))
    den = float(np.max(np.abs(lhs))) + float(np.max(np.abs(divergence(H).samples())))
    return num / max(den, 1e-300)


# ---------------------------------------------------------------------------
# the Lagrangian right-hand-side tensors


def _compose_shifted(F, z_samples, grid):
    """F(1 + z) evaluated with the dealiased composition machinery.

    Splits F(1+z) = F(1) + (F(1+z) - F(1)) so the deviation vanishes at
    z = 0 as compose() requires; constants therefore short-circuit to
    exact constants (I2 vanishes identically for constant viscosity).
    """
    base = float(F(1.0))
    zf = SpectralField.from_samples(grid, z_samples)
    dev = compose(lambda s, _F=F, _b=base: _F(1.0 + s) - _b, zf)
    return base + dev.samples()


def lagrangian_rhs_terms(flow_slice, w, rho0, params, mu_fn=None, lam_fn=None):
    """The four tensors (I1, I2, I3, I4) of the fixed-point source.

    With A = (DX_v)^{-1}, adj = adj(DX_v), J = det DX_v, S(B) := Dw B + B^T grad w,
    c(B) := sum_{ik} B_{ik} (grad w)_{ik}, rho = rho0 / J:

        I1 = (adj - Id) [ mu(rho) S(A) + lam(rho) c(A) Id ]
        I2 = (mu(rho) - mu(rho0)) S(A) + (lam(rho) - lam(rho0)) c(A) Id
        I3 = mu(rho0) [ Dw (A - Id) + (A - Id)^T grad w ] + lam(rho0) c(A - Id) Id
        I4 = -adj * P(rho0 / J)

    Viscosity laws default to the constant params values (I2 then
    vanishes identically); composition nonlinearities go through the
    padded compose() path.  Everything is returned as (d, d, ...) sample
    arrays; I4's pressure uses params.pressure.
    """
    grid = flow_slice.grid
    d = grid.d
    mu_fn = mu_fn or (lambda rho, _m=params.mu: _m * np.ones_like(rho))
    lam_fn = lam_fn or (lambda rho, _l=params.lam: _l * np.ones_like(rho))
    rho0_s = rho0.samples() if isinstance(rho0, SpectralField) else np.asarray(rho0)
    if np.min(rho0_s) <= 0:
        raise ValueError(f"reference density must stay positive, "
                         f"min = {np.min(rho0_s):.3e}")
    J = flow_slice.J
    adj = flow_slice.adj
    A = flow_slice.A
    rho_s = rho0_s / J

    gw = gradient(w).samples().reshape((d, d) + grid.shape)  # gw[i,j] = d_j w_i
    Dw = gw                                                   # (Dw)_{ij} = d_j w_i
    gradw = np.swapaxes(gw, 0, 1)                             # (grad w)_{ij} = d_i w_j

    eye = np.eye(d).reshape((d, d) + (1,) * d)

    def S(B):
        return (np.einsum("ik...,kj...->ij...", Dw, B)
                + np.einsum("ki...,kj...->ij...", B, gradw))

    def c(B):
        return np.einsum("ik...,ik...->...", B, gradw)

    mu_rho = _compose_shifted(mu_fn, rho_s - 1.0, grid)
    lam_rho = _compose_shifted(lam_fn, rho_s - 1.0, grid)
    mu_rho0 = _compose_shifted(mu_fn, rho0_s - 1.0, grid)
    lam_rho0 = _compose_shifted(lam_fn, rho0_s - 1.0, grid)
    P_rho = _compose_shifted(params.pressure, rho_s - 1.0, grid)

    SA = S(A)
    cA = c(A)
    inner = mu_rho * SA + lam_rho * cA * eye
    I1 = np.einsum("ik...,kj...->ij...", adj - eye, inner)
    I2 = (mu_rho - mu_rho0) * SA + (lam_rho - lam_rho0) * cA * eye
    Ash = A - eye
    I3 = mu_rho0 * S(Ash) + lam_rho0 * c(Ash) * eye
    I4 = -adj * P_rho
    return I1, I2, I3, I4


def _matrix_divergence(grid, T):
    """(div T)_j = sum_i d_i T_{ij}, spectral, dealias-masked."""
    d = grid.d
    mask = dealias_mask(grid)
    xi = grid.xi_vectors()
    T_hat = _fftn(T.astype(np.complex128), axes=grid.axes) * grid.cell_volume * mask
    cols = np.empty((d,) + grid.shape, np.complex128)
    for j in range(d):
        acc = np.zeros(grid.shape, np.complex128)
        for i in range(d):
            acc += 1j * xi[i] * T_hat[i, j]
        cols[j] = acc
    return SpectralField(grid, cols, real=True)


def flow_bound_ratios(flow_slice, v_series, t_grid, p=2.0):
    """Deformation norms against the integrated velocity-gradient strength.

    Measures ||Id - adj||, ||Id - A||, ||adj^T A - Id||, ||J - 1||,
    ||1/J - 1|| in B^{d/p}_{p,1} and divides by
    int ||grad vbar||_{B^{d/p}_{p,1}} dt — the slope constants the
    small-deformation estimates predict to be O(1).
    """
    grid = flow_slice.grid
    d = grid.d
    spec = dyadic.NormSpec(s=d / p, p=p, r=1)
    norms = [dyadic.besov_norm(gradient(v), spec) for v in v_series]
    den = float(np.trapezoid(norms, t_grid))
    eye = np.eye(d).reshape((d, d) + (1,) * d)

    def mat_norm(Mfield):
        f = SpectralField.from_samples(grid, Mfield.reshape((d * d,) + grid.shape))
        return dyadic.besov_norm(f, spec)

    def scal_norm(s):
        return dyadic.besov_norm(SpectralField.from_samples(grid, s), spec)

    ata = np.einsum("ki...,kj...->ij...", flow_slice.adj, flow_slice.A)
    out = {
        "adj_minus_id": mat_norm(flow_slice.adj - eye),
        "A_minus_id": mat_norm(flow_slice.A - eye),
        "adjT_A_minus_id": mat_norm(ata - eye),
        "J_minus_1": scal_norm(flow_slice.J - 1.0),
        "Jinv_minus_1": scal_norm(1.0 / flow_slice.J - 1.0),
        "denominator": den,
        "anchor": "flow-deformation-bounds",
    }
    out["ratios"] = {k: out[k] / max(den, 1e-300)
                     for k in ("adj_minus_id", "A_minus_id", "adjT_A_minus_id",
                               "J_minus_1", "Jinv_minus_1")}
    return out


# ---------------------------------------------------------------------------
# the fixed-point solver


@dataclass
class LagState:
    rho_bar: SpectralField      # rho0 / J at the final time
    u_series: list              # Lagrangian velocity at the time nodes
    t_grid: np.ndarray
    flow: FlowMap


def lagrangian_fixed_point_solve(rho0, u0, params, T, mu_fn=None, lam_fn=None,
                                 n_t=33, tol=1e-8, max_iter=30, gate_c=0.1):
    """Picard iteration for the Lagrangian formulation.

    Each pass builds the flow of the current velocity iterate, assembles
    the source rho0^{-1} div(I1 + I2 + I3 + I4) explicitly (the
    deformation tensors frozen at the previous iterate), and solves the
    variable-coefficient elasticity system

        d_t u - rho0^{-1} div(2 mu(rho0) D(u) + lam(rho0) div u Id) = source

    through the mean-coefficient-implicit integrator.  Stops when the
    E_p-increment (sup-in-time B^{d/p-1} plus time-integrated B^{d/p+1},
    p = 2) drops below tol relative to the iterate size; two consecutive
    increment growths raise NonContractionError.
    """
    grid = rho0.grid
    d = grid.d
    rho0_s = rho0.samples()
    if np.min(rho0_s) <= 0:
        raise ValueError("rho0 must be bounded away from zero")
    t_grid = np.linspace(0.0, T, n_t)
    mu_f = mu_fn or (lambda rho, _m=params.mu: _m * np.ones_like(rho))
    lam_f = lam_fn or (lambda rho, _l=params.lam: _l * np.ones_like(rho))
    rho0_inv = SpectralField.from_samples(grid, 1.0 / rho0_s)
    coeffs = {
        "a": rho0_inv, "b": rho0_inv,
        "mu": SpectralField.from_samples(grid, mu_f(rho0_s)),
        "lam": SpectralField.from_samples(grid, lam_f(rho0_s)),
    }
    spec_sup = dyadic.NormSpec(s=d / 2 - 1, p=2.0, r=1)
    spec_int = dyadic.NormSpec(s=d / 2 + 1, p=2.0, r=1)

    def ep_norm(series):
        with warnings.catch_warnings():
            # the integral piece lives at s = d/p + 1 by design (solution
            # space, not a product estimate); silence the regime nudge
            warnings.simplefilter("ignore")
            sup = max(dyadic.besov_norm(f, spec_sup) for f in series)
            integ = float(np.trapezoid([dyadic.besov_norm(f, spec_int)
                                        for f in series], t_grid))
        return sup + integ

    def solve_with(v_series):
        fm = flow_map(v_series, t_grid, gate_c=gate_c)
        src = []
        for i in range(n_t):
            sl = fm.slice(i)
            I1, I2, I3, I4 = lagrangian_rhs_terms(sl, v_series[i], rho0, params,
                                                  mu_fn=mu_fn, lam_fn=lam_fn)
            divI = _matrix_divergence(grid, I1 + I2 + I3 + I4)
            src.append(dealias_product(rho0_inv, divI))
        series, rep = lame_solve(u0, src, t_grid, coeffs=coeffs)
        return series, fm, rep

    zero = SpectralField.zero(grid, ncomp=d, real=True)
    v_series = [zero] * n_t
    u_series, fm, lame_rep = solve_with(v_series)
    increments = []
    ratios = []
    grew = 0
    for it in range(max_iter):
        new_series, fm, lame_rep = solve_with(u_series)
        inc = ep_norm([new_series[i] - u_series[i] for i in range(n_t)])
        size = max(ep_norm(new_series), 1e-300)
        increments.append(inc)
        if len(increments) >= 2 and increments[-2] > 0:
            ratios.append(increments[-1] / increments[-2])
            grew = grew + 1 if increments[-1] > increments[-2] else 0
            if grew >= 2:
                raise NonContractionError(
                    f"fixed-point increments grew twice: "
                    f"{increments[-3:]} (anchor: lagrangian-contraction)")
        u_series = new_series
        if inc < tol * max(1.0, size):
            break
    final = fm.final()
    rho_bar = SpectralField.from_samples(grid, rho0_s / final.J)
    report = {
        "anchor": "lagrangian-contraction",
        "increments": increments,
        "ratios": ratios,
        "iterations": len(increments),
        "gate_integral": fm.gate_integral,
        "lame_report": lame_rep,
        "mass_residual": float(np.max(np.abs(final.J * rho_bar.samples()
                                             - rho0_s))),
    }
    return LagState(rho_bar, u_series, t_grid, fm), report
