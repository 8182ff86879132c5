"""Dealiased products, the Bony splitting, and composition operators.

Products of grid fields use the 2/3 rule: coefficients with any
|k_i| > N//3 are discarded from both factors and from the product.
What remains is the *exact* convolution of the truncated factors
(aliased images land outside the kept band), and the operation is
bilinear.  Bilinearity is what makes the frequency bookkeeping below
exact: summing the three Bony pieces

    T_uv   = sum_j  (cut_{j-1} u) * (block_j v)      (low-high)
    T_vu   = sum_j  (cut_{j-1} v) * (block_j u)      (high-low)
    R(u,v) = sum_j  sum_{|j'-j| <= 1} (block_j u) * (block_j' v)

walks every band pair exactly once, so their total telescopes to the
dealiased product of the mean-free parts plus the cross terms with the
means — i.e. to the full product minus mean(u)*mean(v).  For mean-zero
fields the identity is exact to rounding; tests use that convention.
"""

import functools

import numpy as np

from . import dyadic
from .fourier import SpectralField, _fftn, _ifftn, gradient, hermitian_symmetrize


@functools.lru_cache(maxsize=64)
def dealias_mask(grid):
    """Boolean mask keeping |k_i| <= N//3 on every axis."""
    kmax = grid.N // 3
    keep_axis = np.abs(grid.k_axis) <= kmax
    mask = np.ones(grid.shape, dtype=bool)
    for ax in range(grid.d):
        shape = [1] * grid.d
        shape[ax] = grid.N
        mask &= keep_axis.reshape(shape)
    mask.setflags(write=False)
    return mask


def _masked_samples(field):
    grid = field.grid
    c = field.coeffs * dealias_mask(grid)
    vals = _ifftn(c, axes=grid.axes) / grid.cell_volume
    return vals.real if field.real else vals


def dealias_product(f, g):
    """Pointwise product with 2/3-rule truncation of inputs and output.

    Shapes broadcast: scalar*scalar, scalar*vector or same-size
    vector*vector (Hadamard).  The result is the exact convolution of
    the truncated coefficient arrays.
    """
    if f.grid != g.grid:
        raise ValueError("fields live on different grids")
    grid = f.grid
    vals = _masked_samples(f) * _masked_samples(g)
    coeffs = _fftn(np.asarray(vals, dtype=np.complex128), axes=grid.axes) * grid.cell_volume
    coeffs *= dealias_mask(grid)
    return SpectralField(grid, coeffs, real=f.real and g.real)


def advect(v, b):
    """Dealiased advection term v . grad b for vector v and scalar b."""
    grid = v.grid
    if not v.is_vector or v.ncomp != grid.d:
        raise ValueError("advect needs a d-component velocity")
    gb = gradient(b)
    out = None
    for i in range(grid.d):
        term = dealias_product(v.component(i), gb.component(i))
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# Bony splitting


def paraproduct(u, v):
    """T_uv = sum_j (cut_{j-1} u) (block_j v): u's low frequencies times v's bands."""
    grid = u.grid
    j_min, j_max = dyadic.resolvable_range(grid)
    total = None
    for j in range(j_min, j_max + 1):
        low = u.with_coeffs(u.coeffs * dyadic._cut_mult(grid, j - 1))
        term = dealias_product(low, dyadic.dyadic_block(v, j))
        total = term if total is None else total + term
    return total


def remainder(u, v):
    """R(u,v) = sum over band pairs |j-j'| <= 1 of (block_j u)(block_j' v)."""
    grid = u.grid
    j_min, j_max = dyadic.resolvable_range(grid)
    blocks_u = {j: dyadic.dyadic_block(u, j) for j in range(j_min, j_max + 1)}
    blocks_v = {j: dyadic.dyadic_block(v, j) for j in range(j_min, j_max + 1)}
    total = None
    for j in range(j_min, j_max + 1):
        for jp in (j - 1, j, j + 1):
            if j_min <= jp <= j_max:
                term = dealias_product(blocks_u[j], blocks_v[jp])
                total = term if total is None else total + term
    return total


class BonyTriple:
    """The three pieces of the product splitting, with their recombination.

    total() = T_uv + T_vu + R equals the dealiased product of u and v
    minus mean(u)*mean(v); for mean-zero factors it *is* the product, to
    rounding.
    """

    def __init__(self, u, v):
        self.T_uv = paraproduct(u, v)
        self.T_vu = paraproduct(v, u)
        self.R = remainder(u, v)

    def total(self):
        return self.T_uv + self.T_vu + self.R


def bony_decompose(u, v):
    return BonyTriple(u, v)


# ---------------------------------------------------------------------------
# composition F(u)


def _pad_coeffs(coeffs, grid, factor):
    axes = grid.axes
    shifted = np.fft.fftshift(coeffs, axes=axes)
    lead = coeffs.ndim - grid.d
    extra = (factor - 1) * grid.N // 2
    widths = [(0, 0)] * lead + [(extra, extra)] * grid.d
    padded = np.pad(shifted, widths)
    return np.fft.ifftshift(padded, axes=axes)


def _truncate_coeffs(coeffs_fine, grid, factor):
    axes = tuple(range(-grid.d, 0))
    shifted = np.fft.fftshift(coeffs_fine, axes=axes)
    lead = coeffs_fine.ndim - grid.d
    start = (factor - 1) * grid.N // 2
    sl = (slice(None),) * lead + (slice(start, start + grid.N),) * grid.d
    return np.fft.ifftshift(shifted[sl], axes=axes)


def compose(F, u, pad=2):
    """F(u) evaluated pointwise on a ``pad``-times oversampled grid.

    F must vanish at 0 (checked to 1e-12) so that F(u) stays mean-free
    at leading order for mean-free u and the result decays like u does.
    Non-finite values of F on the sample range (e.g. a pole crossed by
    the samples) raise.  The truncation back to the coarse grid commits
    an error the size of the spectral tail of F(u); for analytic F and
    band-limited u that tail is far below solver tolerances.
    """
    f0 = complex(F(0.0))
    if abs(f0) > 1e-12:
        raise ValueError(f"compose requires F(0) = 0, got F(0) = {f0}")
    grid = u.grid
    fine = _pad_coeffs(u.coeffs, grid, pad) if pad > 1 else u.coeffs
    h_fine = grid.h / pad
    vals = _ifftn(fine, axes=grid.axes) / h_fine ** grid.d
    if u.real:
        vals = vals.real
    with np.errstate(all="ignore"):
        fv = F(vals)
    fv = np.asarray(fv)
    if not np.all(np.isfinite(fv)):
        raise ValueError("composition left the domain of F (non-finite values)")
    cf = _fftn(fv.astype(np.complex128), axes=grid.axes) * h_fine ** grid.d
    coeffs = _truncate_coeffs(cf, grid, pad) if pad > 1 else cf
    if u.real:
        coeffs = hermitian_symmetrize(coeffs, grid.d)
    return SpectralField(grid, coeffs, real=u.real)


# ---------------------------------------------------------------------------
# transport commutators


def transport_commutator(v, b, j, variant="plain"):
    """Commutator of band projection (and a derivative, for "tilde") with advection.

    plain:  block_j(v . grad b) - v . grad(block_j b)           (scalar)
    tilde:  d_i block_j(v . grad b) - v . grad(d_i block_j b)   (vector over i)

    Both use dealiased products throughout.  b is scalar; v is a
    d-component velocity.
    """
    grid = v.grid
    vb = advect(v, b)
    if variant == "plain":
        first = dyadic.dyadic_block(vb, j)
        second = advect(v, dyadic.dyadic_block(b, j))
        return first - second
    if variant == "tilde":
        bj = dyadic.dyadic_block(b, j)
        first = gradient(dyadic.dyadic_block(vb, j))       # d_i block_j (v.grad b)
        pieces = []
        gbj = gradient(bj)
        for i in range(grid.d):
            pieces.append(advect(v, gbj.component(i)).coeffs)
        second = SpectralField(grid, np.stack(pieces), real=first.real)
        return first - second
    raise ValueError(f"unknown commutator variant {variant!r}")
