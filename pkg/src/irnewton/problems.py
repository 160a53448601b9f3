"""Shipped forward models: positive circular deconvolution and the
Fourier-modulus phase-retrieval operator.

The deconvolution operator is assembled as a dense circulant matrix (desk
scale keeps this cheap), which makes positivity preservation and the adjoint
exact to the last bit.  The phase-retrieval operator evaluates the masked
quadrature Fourier transform of ``exp(i phi)`` directly.
"""

import numpy as np

from .core import (
    ForwardModel,
    Grid,
    GridAlignmentError,
    InvalidInputError,
    Signal,
)

__all__ = [
    "DeconvolutionModel",
    "sobolev_symbol",
    "periodic_gaussian_kernel",
    "PhaseRetrievalModel",
    "make_cell_phantom",
    "save_matrix_csv",
    "load_matrix_csv",
]


def _uniform_weight(grid):
    w = grid.weights
    if not np.allclose(w, w[0], rtol=1e-12, atol=0.0):
        raise InvalidInputError("circular convolution needs uniform quadrature weights")
    return float(w[0])


class DeconvolutionModel(ForwardModel):
    """Circular convolution with a nonnegative kernel on a periodic grid.

    ``(F u)_i = sum_j w_j k_{i-j} u_j``; linear, so the derivative is the
    operator itself and the tangential-cone constant vanishes.  A nonnegative
    kernel makes the map positivity preserving.
    """

    def __init__(self, kernel):
        if kernel.grid.shape is None:
            raise InvalidInputError("deconvolution needs a tensor grid with a shape")
        if np.any(kernel.values < 0):
            raise InvalidInputError("convolution kernel must be nonnegative")
        self.kernel = kernel
        self.input_grid = kernel.grid
        self.output_grid = kernel.grid
        w0 = _uniform_weight(kernel.grid)
        shape = kernel.grid.shape
        n = kernel.grid.size
        k = kernel.values.reshape(shape)
        cols = np.empty((n, n))
        for j in range(n):
            shifts = np.unravel_index(j, shape)
            cols[:, j] = np.roll(k, shifts, axis=tuple(range(len(shape)))).reshape(-1)
        self._matrix = w0 * cols

    @property
    def matrix(self):
        """Dense operator matrix acting on value vectors."""
        return self._matrix

    @property
    def symbol(self):
        """Effective Fourier symbol (1D even kernels give a real one)."""
        if len(self.input_grid.shape) != 1:
            raise InvalidInputError("symbol is only exposed for 1D kernels")
        w0 = _uniform_weight(self.input_grid)
        sym = w0 * np.fft.rfft(self.kernel.values)
        if np.max(np.abs(sym.imag)) > 1e-12 * np.max(np.abs(sym.real)):
            raise InvalidInputError("kernel is not even; symbol is complex")
        return sym.real

    def apply(self, u):
        if not u.grid.compatible(self.input_grid):
            raise GridAlignmentError("signal not on the model grid")
        return Signal(self._matrix @ u.values, self.output_grid)

    def derivative(self, u, h):
        return self.apply(h)

    def adjoint_derivative(self, u, r):
        if not r.grid.compatible(self.output_grid):
            raise GridAlignmentError("residual not on the model output grid")
        return Signal(self._matrix.T @ r.values, self.input_grid)

    @staticmethod
    def from_symbol(grid, symbol):
        """Build the model whose Fourier symbol is approximately ``symbol``
        (rfft layout).  The reconstructed kernel is clipped at zero to keep
        the map positivity preserving; the small truncation ringing this
        removes must stay below 1e-3 of the kernel peak.  The clipped
        kernel's exact symbol is available as :attr:`symbol`.
        """
        if grid.shape is None or len(grid.shape) != 1:
            raise InvalidInputError("from_symbol expects a 1D tensor grid")
        n = grid.shape[0]
        w0 = _uniform_weight(grid)
        symbol = np.asarray(symbol, dtype=float)
        if symbol.shape != (n // 2 + 1,):
            raise InvalidInputError("symbol must be in rfft layout")
        kernel_vals = np.fft.irfft(symbol / w0, n=n)
        floor = kernel_vals.min()
        if floor < -1e-3 * max(kernel_vals.max(), 1.0):
            raise InvalidInputError("symbol does not define a nonnegative kernel")
        kernel_vals = np.maximum(kernel_vals, 0.0)
        return DeconvolutionModel(Signal(kernel_vals, grid))


def sobolev_symbol(n, order, m0):
    """Decaying symbol ``(1 + (m/m0)^2)^(-order/2)`` over rfft frequencies;
    unit mass, mildly ill-posed of degree ``order``."""
    m = np.arange(n // 2 + 1)
    return (1.0 + (m / m0) ** 2) ** (-order / 2.0)


def periodic_gaussian_kernel(grid, width):
    """Wrapped Gaussian kernel of the given width, normalized to unit mass."""
    if grid.shape is None or len(grid.shape) != 1:
        raise InvalidInputError("expected a 1D tensor grid")
    x = grid.points
    length = grid.total_measure
    vals = np.zeros_like(x)
    for m in range(-3, 4):
        vals += np.exp(-((x - length / 2 + m * length) ** 2) / (2 * width**2))
    vals = np.roll(vals, grid.size // 2)
    vals /= np.sum(grid.weights * vals)
    return Signal(vals, grid)


class PhaseRetrievalModel(ForwardModel):
    """Squared Fourier modulus of ``exp(i phi)`` on a disk support.

    ``(F phi)(xi) = |int_{B_rho} exp(-i xi.x) exp(i phi(x)) dx|^2`` with the
    integral taken as a quadrature sum over the masked cells of a regular
    grid.  Adding a constant to ``phi`` leaves the output unchanged (global
    phase invariance) and the output is nonnegative everywhere.
    """

    def __init__(self, support_n=32, rho=0.4, measurement_n=48, kappa=16.0):
        if not 0 < rho <= 0.5:
            raise InvalidInputError("disk radius must lie in (0, 0.5]")
        self.rho = float(rho)
        self.kappa = float(kappa)
        h = 1.0 / support_n
        axis = (np.arange(support_n) + 0.5) * h - 0.5
        xx, yy = np.meshgrid(axis, axis, indexing="ij")
        mask = xx**2 + yy**2 <= rho**2
        if not mask.any():
            raise InvalidInputError("support grid does not resolve the disk")
        self.support_shape = (support_n, support_n)
        self.mask = mask
        pts = np.column_stack([xx[mask], yy[mask]])
        self.input_grid = Grid(pts, np.full(pts.shape[0], h * h))
        self.output_grid = Grid.regular_2d(
            measurement_n, measurement_n, 2 * kappa, 2 * kappa
        )
        xi = self.output_grid.points
        # phase matrix exp(-i xi . x), (measurement points) x (support points)
        self._E = np.exp(-1j * (xi @ pts.T))
        self._a2 = h * h
        self._v = float(self.output_grid.weights[0])

    def _field(self, phi):
        return self._a2 * (self._E @ np.exp(1j * phi.values))

    def apply(self, phi):
        if not phi.grid.compatible(self.input_grid):
            raise GridAlignmentError("phase not on the support grid")
        A = self._field(phi)
        return Signal(np.abs(A) ** 2, self.output_grid)

    def derivative(self, phi, h):
        A = self._field(phi)
        B = self._a2 * (self._E @ (1j * np.exp(1j * phi.values) * h.values))
        return Signal(2.0 * np.real(np.conj(A) * B), self.output_grid)

    def adjoint_derivative(self, phi, r):
        A = self._field(phi)
        back = self._E.T @ (self._v * r.values * np.conj(A))
        vals = 2.0 * np.real(1j * np.exp(1j * phi.values) * back)
        return Signal(vals, self.input_grid)

    def embed(self, signal):
        """Masked values as a full support-square matrix, zero outside."""
        out = np.zeros(self.support_shape)
        out[self.mask] = signal.values
        return out

    def restrict(self, matrix):
        return Signal(np.asarray(matrix)[self.mask], self.input_grid)


def make_cell_phantom(grid, rho):
    """Deterministic synthetic phase phantom on a disk-support grid.

    Equals 1 on the annulus near the disk boundary; the interior carries two
    smooth blobs (a cartoon of two cells) blended in by a taper that vanishes
    identically for radii beyond ``0.85 rho``.
    """
    pts = grid.points
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidInputError("phantom needs a 2D point set")
    r = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2)
    if r.max() > rho * (1 + 1e-9):
        raise InvalidInputError("grid points must lie inside the disk")
    taper = np.cos(0.5 * np.pi * np.clip((r - 0.5 * rho) / (0.35 * rho), 0.0, 1.0)) ** 2
    taper[r >= 0.85 * rho] = 0.0
    c1 = np.array([-0.3 * rho, -0.15 * rho])
    c2 = np.array([0.25 * rho, 0.2 * rho])
    s1, s2 = 0.22 * rho, 0.18 * rho
    blob1 = 0.6 * np.exp(-np.sum((pts - c1) ** 2, axis=1) / (2 * s1**2))
    blob2 = -0.45 * np.exp(-np.sum((pts - c2) ** 2, axis=1) / (2 * s2**2))
    return Signal(1.0 + taper * (blob1 + blob2), grid)


def save_matrix_csv(path, matrix, comments=()):
    """Row-major CSV matrix with a dimension header."""
    mat = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(f"rows={mat.shape[0]},cols={mat.shape[1]}\n")
        for row in mat:
            fh.write(",".join(repr(v) for v in row) + "\n")


def load_matrix_csv(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    dims = dict(part.split("=") for part in lines[0].split(","))
    rows, cols = int(dims["rows"]), int(dims["cols"])
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1 : rows + 1]])
    if data.shape != (rows, cols):
        raise InvalidInputError("matrix data does not match the declared dimensions")
    return data
