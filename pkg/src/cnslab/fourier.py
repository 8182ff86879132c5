"""Periodic grids, spectral fields, and Fourier multipliers.

Everything downstream (dyadic analysis, the linearized solvers, the
nonlinear runs) builds on two types: ``TorusGrid`` describes the box
[0, 2*pi*M)^d together with its frequency lattice {k/M : k integer},
and ``SpectralField`` stores Fourier coefficients normalized so that
they approximate the *continuous* Fourier transform of the sampled
function.  That choice keeps norms, semigroup formulas and rescalings
resolution-independent: refining N changes nothing but the resolved
band.

Conventions (h = 2*pi*M/N is the grid spacing):

    coeff(xi) = h^d * sum_x f(x) exp(-i xi.x)          (forward)
    f(x)      = (2*pi*M)^{-d} * sum_xi coeff(xi) exp(i xi.x)
    Parseval:   sum_x |f(x)|^2 h^d  =  sum_xi |coeff(xi)|^2 / (2*pi*M)^d

so a single mode exp(i*3*x) on the unit box (M=1) carries coefficient
2*pi at xi=3 and nothing elsewhere.  Frequencies run over integer
indices k in [-N/2, N/2) per axis with xi = k/M; the Nyquist frequency
is N/(2M) and the lowest nonzero one is 1/M.
"""

import numpy as np
from scipy import fft as _sfft

_WORKERS = 1


def set_fft_workers(n):
    """Set the worker count used by all FFTs in the package."""
    global _WORKERS
    _WORKERS = max(1, int(n))


def get_fft_workers():
    return _WORKERS


def _fftn(a, axes):
    return _sfft.fftn(a, axes=axes, workers=_WORKERS)


def _ifftn(a, axes):
    return _sfft.ifftn(a, axes=axes, workers=_WORKERS)


class TorusGrid:
    """Uniform grid on the periodic box [0, 2*pi*M)^d.

    Parameters
    ----------
    d : int
        Dimension, 1, 2 or 3.
    N : int
        Points per axis; even and >= 8.
    M : float
        Box scale >= 1.  The box is [0, 2*pi*M)^d and the frequency
        lattice is {k/M}.

    Grids compare and hash by (d, N, M) so multiplier caches can key on
    them.  Derived arrays (frequency meshes) are built lazily and cached.
    """

    __slots__ = ("d", "N", "M", "h", "_xi", "_xi_norm", "_xi_norm2")

    def __init__(self, d, N, M=1.0):
        if d not in (1, 2, 3):
            raise ValueError(f"dimension d must be 1, 2 or 3, got {d}")
        if not (isinstance(N, (int, np.integer)) and N >= 8 and N % 2 == 0):
            raise ValueError(f"N must be an even integer >= 8, got {N}")
        M = float(M)
        if not (M >= 1.0 and np.isfinite(M)):
            raise ValueError(f"box scale M must satisfy M >= 1, got {M}")
        self.d = int(d)
        self.N = int(N)
        self.M = M
        self.h = 2.0 * np.pi * M / N
        self._xi = None
        self._xi_norm = None
        self._xi_norm2 = None

    # -- identity ----------------------------------------------------

    def __eq__(self, other):
        return (isinstance(other, TorusGrid)
                and (self.d, self.N, self.M) == (other.d, other.N, other.M))

    def __hash__(self):
        return hash((self.d, self.N, self.M))

    def __repr__(self):
        return f"TorusGrid(d={self.d}, N={self.N}, M={self.M})"

    # -- geometry ----------------------------------------------------

    @property
    def shape(self):
        return (self.N,) * self.d

    @property
    def axes(self):
        """FFT axes: the trailing d axes, so leading component axes pass through."""
        return tuple(range(-self.d, 0))

    @property
    def cell_volume(self):
        return self.h ** self.d

    @property
    def box_volume(self):
        return (2.0 * np.pi * self.M) ** self.d

    @property
    def nyquist(self):
        return self.N / (2.0 * self.M)

    @property
    def k_axis(self):
        """Integer frequency indices along one axis, FFT order."""
        return (np.fft.fftfreq(self.N) * self.N).astype(np.int64)

    @property
    def xi_axis(self):
        return self.k_axis / self.M

    @property
    def x_axis(self):
        return self.h * np.arange(self.N)

    def x_vectors(self):
        """Physical coordinates, shape (d,) + grid.shape."""
        mesh = np.meshgrid(*([self.x_axis] * self.d), indexing="ij")
        return np.stack(mesh)

    def xi_vectors(self):
        """Frequency vectors xi, shape (d,) + grid.shape."""
        if self._xi is None:
            mesh = np.meshgrid(*([self.xi_axis] * self.d), indexing="ij")
            self._xi = np.stack(mesh)
        return self._xi

    def xi_norm2(self):
        if self._xi_norm2 is None:
            self._xi_norm2 = np.sum(self.xi_vectors() ** 2, axis=0)
        return self._xi_norm2

    def xi_norm(self):
        if self._xi_norm is None:
            self._xi_norm = np.sqrt(self.xi_norm2())
        return self._xi_norm


def make_grid(d, N, M=1.0):
    """Build a TorusGrid, validating d in {1,2,3}, N even >= 8, M >= 1."""
    return TorusGrid(d, N, M)


def _zero_index(ndim_lead, d):
    # index tuple selecting the xi = 0 coefficient of every component
    return (slice(None),) * ndim_lead + (0,) * d


class SpectralField:
    """A scalar or vector field stored by its Fourier coefficients.

    ``coeffs`` has shape grid.shape for a scalar field or
    (m,) + grid.shape for an m-component field (m = d for velocity
    fields; other leading sizes are allowed for stacked data such as
    gradients).  Instances are immutable; physical samples are computed
    on demand and cached.

    The ``real`` flag records that the field represents real-valued
    samples (Hermitian coefficients); ``samples()`` then returns the
    real part, and ``imag_residue()`` measures how far the inverse
    transform strays from real.
    """

    __slots__ = ("grid", "coeffs", "real", "_samples")

    def __init__(self, grid, coeffs, real=False):
        coeffs = np.asarray(coeffs, dtype=np.complex128)
        if coeffs.shape[-grid.d:] != grid.shape:
            raise ValueError(
                f"coefficient array shape {coeffs.shape} does not end with grid shape {grid.shape}")
        if coeffs.ndim > grid.d + 1:
            raise ValueError("at most one leading component axis is supported")
        self.grid = grid
        self.coeffs = coeffs
        self.real = bool(real)
        self._samples = None

    # -- constructors ------------------------------------------------

    @classmethod
    def from_samples(cls, grid, values):
        """Forward transform of point samples (shape grid.shape or (m,)+grid.shape)."""
        values = np.asarray(values)
        real = not np.iscomplexobj(values)
        coeffs = _fftn(values.astype(np.complex128), axes=grid.axes) * grid.cell_volume
        return cls(grid, coeffs, real=real)

    @classmethod
    def zero(cls, grid, ncomp=None, real=True):
        shape = grid.shape if ncomp is None else (ncomp,) + grid.shape
        return cls(grid, np.zeros(shape, dtype=np.complex128), real=real)

    def with_coeffs(self, coeffs, real=None):
        """Same-grid field with new coefficients (keeps the reality flag by default)."""
        return SpectralField(self.grid, coeffs, self.real if real is None else real)

    # -- basic queries -----------------------------------------------

    @property
    def is_vector(self):
        return self.coeffs.ndim == self.grid.d + 1

    @property
    def ncomp(self):
        return self.coeffs.shape[0] if self.is_vector else 1

    def component(self, i):
        if not self.is_vector:
            raise ValueError("component() on a scalar field")
        return SpectralField(self.grid, self.coeffs[i], self.real)

    def samples(self):
        """Physical samples on the grid (cached)."""
        if self._samples is None:
            vals = _ifftn(self.coeffs, axes=self.grid.axes) / self.grid.cell_volume
            self._samples = vals.real if self.real else vals
        return self._samples

    def imag_residue(self):
        vals = _ifftn(self.coeffs, axes=self.grid.axes) / self.grid.cell_volume
        return float(np.max(np.abs(vals.imag)))

    def mean(self):
        """Mean value(s) of the field over the box: coeff(0) / |box|."""
        lead = self.coeffs.ndim - self.grid.d
        m = self.coeffs[_zero_index(lead, self.grid.d)] / self.grid.box_volume
        if self.is_vector:
            return m.real if self.real else m
        m = complex(m)
        return m.real if self.real else m

    def l2(self):
        """L^2(box) norm via the Parseval pairing (no inverse transform)."""
        return float(np.sqrt(np.sum(np.abs(self.coeffs) ** 2) / self.grid.box_volume))

    # -- algebra -----------------------------------------------------

    def __add__(self, other):
        self._check_compatible(other)
        return SpectralField(self.grid, self.coeffs + other.coeffs,
                             self.real and other.real)

    def __sub__(self, other):
        self._check_compatible(other)
        return SpectralField(self.grid, self.coeffs - other.coeffs,
                             self.real and other.real)

    def __mul__(self, c):
        if isinstance(c, SpectralField):
            raise TypeError("use paraproduct.dealias_product for field products")
        real = self.real and not np.iscomplexobj(np.asarray(c))
        return SpectralField(self.grid, self.coeffs * c, real)

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(self.grid, -self.coeffs, self.real)

    def _check_compatible(self, other):
        if not isinstance(other, SpectralField) or other.grid != self.grid:
            raise ValueError("fields live on different grids")
        if other.coeffs.shape != self.coeffs.shape:
            raise ValueError("component counts differ")


def transform(obj, direction, grid=None):
    """Round-trip entry point between samples and coefficients.

    direction="forward": ``obj`` is a sample array (grid required) or a
    SpectralField whose samples are re-transformed; returns a SpectralField.
    direction="inverse": ``obj`` is a SpectralField; returns its samples.
    """
    if direction == "forward":
        if isinstance(obj, SpectralField):
            return SpectralField.from_samples(obj.grid, obj.samples())
        if grid is None:
            raise ValueError("forward transform of raw samples needs a grid")
        return SpectralField.from_samples(grid, obj)
    if direction == "inverse":
        if not isinstance(obj, SpectralField):
            raise ValueError("inverse transform expects a SpectralField")
        return obj.samples()
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# Fourier multipliers


class FourierSymbol:
    """A Fourier multiplier m(xi).

    ``fn(xi_vectors, xi_norm)`` returns the multiplier evaluated on the
    grid: shape grid.shape for a scalar multiplier, or
    (m_out, m_in) + grid.shape for a matrix symbol acting on the
    component axis.  ``homogeneity`` (optional) records the degree s
    with m(t xi) = t^s m(xi), used by scaling tests.
    """

    def __init__(self, fn, homogeneity=None, name=""):
        self.fn = fn
        self.homogeneity = homogeneity
        self.name = name

    def evaluate(self, grid):
        return self.fn(grid.xi_vectors(), grid.xi_norm())

    def __repr__(self):
        return f"FourierSymbol({self.name or self.fn!r})"


def abs_velocity_power(s):
    """|D|^s as a FourierSymbol (zero mode handled by apply_symbol)."""
    def fn(xi, r):
        rsafe = np.where(r == 0.0, 1.0, r)
        return rsafe ** s
    return FourierSymbol(fn, homogeneity=s, name=f"|D|^{s}")


def apply_symbol(field, symbol, zero_mode=0.0):
    """Apply a Fourier multiplier to a field.

    ``symbol`` is a FourierSymbol or a bare callable with the same
    signature.  ``zero_mode`` sets the xi = 0 output: a number (default
    0.0, annihilating the mean — the right choice for homogeneous
    symbols like |D|^s with s < 0) or "keep" to pass the mean through
    scaled by nothing.  Non-finite multiplier values at nonzero
    frequencies raise.
    """
    grid = field.grid
    if isinstance(symbol, FourierSymbol):
        mult = symbol.evaluate(grid)
    else:
        mult = symbol(grid.xi_vectors(), grid.xi_norm())
    mult = np.asarray(mult)

    zero = (0,) * grid.d
    if mult.ndim == grid.d + 2:           # matrix symbol, shape (m_out, m_in) + grid
        bad = ~np.isfinite(mult)
        bad[(slice(None), slice(None)) + zero] = False
        if np.any(bad):
            raise ValueError("symbol is non-finite at a nonzero frequency")
        m_in = mult.shape[1]
        if field.is_vector:
            if m_in != field.ncomp:
                raise ValueError("matrix symbol input size does not match field components")
            out = np.einsum("ab...,b...->a...", mult, field.coeffs)
        else:
            if m_in != 1:
                raise ValueError("matrix symbol with input size != 1 applied to a scalar")
            out = mult[:, 0] * field.coeffs
        out_lead = 1
        in_lead = 1 if field.is_vector else 0
    elif mult.ndim == grid.d:             # scalar multiplier
        bad = ~np.isfinite(mult)
        bad[zero] = False
        if np.any(bad):
            raise ValueError("symbol is non-finite at a nonzero frequency")
        out = mult * field.coeffs
        out_lead = in_lead = field.coeffs.ndim - grid.d
    else:
        raise ValueError(
            "symbol must return grid.shape (scalar) or (m_out, m_in) + grid.shape (matrix); "
            "use the dedicated operators (gradient, divergence, ...) for plain vector outputs")

    if zero_mode != "keep":
        out_idx = _zero_index(out_lead, grid.d)
        in_idx = _zero_index(in_lead, grid.d)
        if zero_mode == 0.0:
            out[out_idx] = 0.0
        else:
            out[out_idx] = zero_mode * field.coeffs[in_idx]
    # A real (radial/even) multiplier preserves Hermitian symmetry; complex
    # multipliers clear the flag (the dedicated operators below handle i*xi
    # cases that do stay real).
    real = field.real and not np.iscomplexobj(mult)
    return SpectralField(grid, out, real=real)


# -- dedicated vector-calculus operators (coefficients manipulated directly) --


def gradient(field):
    """Spectral gradient: scalar -> d-vector, each component i*xi_i * coeff.

    For an m-component input the result stacks the gradients,
    shape (m*d,) + grid.shape ordered [(comp0 d/dx0..d/dx(d-1)), comp1 ...].
    """
    grid = field.grid
    xi = grid.xi_vectors()
    if field.is_vector:
        out = np.concatenate([1j * xi * field.coeffs[m] for m in range(field.ncomp)])
    else:
        out = 1j * xi * field.coeffs
    return SpectralField(grid, out, real=field.real)


def divergence(field):
    """Spectral divergence: d-vector -> scalar, sum_i i*xi_i coeff_i."""
    grid = field.grid
    if not field.is_vector or field.ncomp != grid.d:
        raise ValueError("divergence needs a d-component vector field")
    xi = grid.xi_vectors()
    out = np.sum(1j * xi * field.coeffs, axis=0)
    return SpectralField(grid, out, real=field.real)


def laplacian(field):
    return SpectralField(field.grid, -field.grid.xi_norm2() * field.coeffs, field.real)


def lame_apply(field, mu, lam):
    """The constant-coefficient operator mu*Lap + (lam+mu)*grad div on a vector field."""
    grid = field.grid
    if not field.is_vector or field.ncomp != grid.d:
        raise ValueError("lame_apply needs a d-component vector field")
    xi = grid.xi_vectors()
    r2 = grid.xi_norm2()
    div_hat = np.sum(xi * field.coeffs, axis=0)      # = -i * (div u)-hat
    out = -mu * r2 * field.coeffs - (lam + mu) * xi * div_hat
    return SpectralField(grid, out, real=field.real)


def grad_inv_laplacian(field):
    """grad (-Lap)^{-1} applied to a scalar: coefficients i*xi/|xi|^2, mean -> 0."""
    grid = field.grid
    if field.is_vector:
        raise ValueError("grad_inv_laplacian acts on scalar fields")
    r2 = grid.xi_norm2()
    r2safe = np.where(r2 == 0.0, 1.0, r2)
    out = 1j * grid.xi_vectors() / r2safe * field.coeffs
    out[(slice(None),) + (0,) * grid.d] = 0.0
    return SpectralField(grid, out, real=field.real)


def helmholtz_project(field):
    """Split a vector field u = Pu + Qu into divergence-free and potential parts.

    Q-hat u = xi (xi . u-hat) / |xi|^2 with the mean mode assigned to P
    (a constant field is divergence-free).  Returns (P, Q).
    """
    grid = field.grid
    if not field.is_vector or field.ncomp != grid.d:
        raise ValueError("helmholtz_project needs a d-component vector field")
    xi = grid.xi_vectors()
    r2 = grid.xi_norm2()
    r2safe = np.where(r2 == 0.0, 1.0, r2)
    xi_dot_u = np.sum(xi * field.coeffs, axis=0)
    q = xi * (xi_dot_u / r2safe)
    q[(slice(None),) + (0,) * grid.d] = 0.0
    p = field.coeffs - q
    return (SpectralField(grid, p, field.real), SpectralField(grid, q, field.real))


def lebesgue_norm(field, p):
    """L^p(box) norm from physical samples; vector fields use |f(x)| Euclidean.

    p may be any real >= 1 or inf.  For p = 2 the Parseval route
    (field.l2()) agrees to rounding; this function always goes through
    samples so it can serve as the independent check.
    """
    vals = field.samples()
    mag = np.abs(vals) if not field.is_vector else np.sqrt(
        np.sum(np.abs(vals) ** 2, axis=0))
    if p == np.inf or p == "inf":
        return float(np.max(mag))
    p = float(p)
    if p < 1:
        raise ValueError(f"p must be >= 1 or inf, got {p}")
    return float((np.sum(mag ** p) * field.grid.cell_volume) ** (1.0 / p))


def hermitian_symmetrize(coeffs, d):
    """Project coefficients onto the Hermitian (real-samples) subspace.

    Averages c(k) with conj(c(-k)), where -k is taken modulo N per axis.
    """
    rev = coeffs
    for ax in range(-d, 0):
        rev = np.flip(rev, axis=ax)
        rev = np.roll(rev, 1, axis=ax)
    return 0.5 * (coeffs + np.conj(rev))


def random_field(grid, rng, ncomp=None, amplitude=1.0, envelope=None,
                 band=None, mean_zero=True):
    """Random real field with prescribed spectral envelope.

    White noise is sampled in physical space (so coefficients are
    Hermitian by construction), transformed, and shaped by
    ``envelope(|xi|)`` (default exp(-|xi|^2)).  ``band`` optionally
    truncates to integer frequencies |k_i| <= band per axis.  The result
    is scaled so its L^2 norm equals ``amplitude``.
    """
    shape = grid.shape if ncomp is None else (ncomp,) + grid.shape
    noise = rng.standard_normal(shape)
    f = SpectralField.from_samples(grid, noise)
    env = np.exp(-grid.xi_norm2()) if envelope is None else envelope(grid.xi_norm())
    coeffs = f.coeffs * env
    if band is not None:
        k = np.abs(grid.k_axis)
        keep = np.ones(grid.shape, dtype=bool)
        for ax in range(grid.d):
            kshape = [1] * grid.d
            kshape[ax] = grid.N
            keep &= (k.reshape(kshape) <= band)
        coeffs = coeffs * keep
    if mean_zero:
        lead = 0 if ncomp is None else 1
        coeffs[_zero_index(lead, grid.d)] = 0.0
    out = SpectralField(grid, coeffs, real=True)
    n = out.l2()
    if n > 0:
        out = out * (amplitude / n)
    return out
