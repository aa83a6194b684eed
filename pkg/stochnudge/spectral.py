"""
Fourier representation of periodic, zero-mean vector fields on [0, L]^2.

Coefficients are stored over the full FFT layout with shape (2, M, M) so that
u(x) = sum_k coeffs[:, k] exp(i k.x); index axis -2 carries the first
wavenumber component and axis -1 the second.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

SPACES = ('H', 'V', 'DA', 'Dalpha', 'L4', 'Linf')


@dataclass(frozen=True)
class WaveGrid:
    """Square periodic box of side L resolved by M x M Fourier modes."""
    L: float
    M: int
    dealias_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        if self.L <= 0:
            raise ValueError(f"Domain length must be positive, got L={self.L}")
        if self.M < 2 or self.M & (self.M - 1):
            raise ValueError(f"Modes per dimension must be a power of two, got M={self.M}")
        if not 0 < self.dealias_fraction <= 1:
            raise ValueError(f"dealias_fraction must lie in (0, 1], got {self.dealias_fraction}")

    @property
    def lambda1(self) -> float:
        return (2.0 * math.pi / self.L) ** 2

    @property
    def spacing(self) -> float:
        return self.L / self.M

    @cached_property
    def index(self) -> np.ndarray:
        """Integer wavenumbers along one axis in FFT order."""
        return np.fft.fftfreq(self.M, d=1.0 / self.M).astype(int)

    @cached_property
    def j(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.index, self.index, indexing='ij')

    @cached_property
    def k(self) -> Tuple[np.ndarray, np.ndarray]:
        jx, jy = self.j
        scale = 2.0 * math.pi / self.L
        return scale * jx, scale * jy

    @cached_property
    def k2(self) -> np.ndarray:
        kx, ky = self.k
        return kx ** 2 + ky ** 2

    @cached_property
    def k2_safe(self) -> np.ndarray:
        k2 = self.k2.copy()
        k2[0, 0] = 1.0
        return k2

    @cached_property
    def retained(self) -> np.ndarray:
        """Galerkin mask: circular truncation at radius dealias_fraction * M/2."""
        jx, jy = self.j
        radius = self.dealias_fraction * self.M / 2
        mask = jx ** 2 + jy ** 2 <= radius ** 2
        # the Nyquist row has no conjugate partner
        mask &= (np.abs(jx) < self.M // 2) & (np.abs(jy) < self.M // 2)
        return mask

    @cached_property
    def x(self) -> np.ndarray:
        return np.arange(self.M) * self.spacing


def _reflect(coeffs: np.ndarray) -> np.ndarray:
    """Return c(-k) laid out at position k."""
    return np.roll(np.flip(coeffs, axis=(-2, -1)), shift=1, axis=(-2, -1))


def symmetrize(coeffs: np.ndarray) -> np.ndarray:
    """Enforce c(-k) = conj(c(k)) so the physical field is real."""
    return 0.5 * (coeffs + np.conj(_reflect(coeffs)))


@dataclass
class SpectralField:
    """Zero-mean periodic velocity field stored as truncated Fourier coefficients."""
    grid: WaveGrid
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        expected = (2, self.grid.M, self.grid.M)
        if self.coeffs.shape != expected:
            raise ValueError(f"Coefficient array must have shape {expected}, got {self.coeffs.shape}")

    @classmethod
    def zeros(cls, grid: WaveGrid) -> 'SpectralField':
        return cls(grid, np.zeros((2, grid.M, grid.M), dtype=complex))

    @classmethod
    def from_physical(cls, grid: WaveGrid, values: np.ndarray, project: bool = True) -> 'SpectralField':
        """Transform real samples of shape (2, M, M); project=False keeps the gradient part."""
        coeffs = np.fft.fft2(np.asarray(values, dtype=float), axes=(-2, -1)) / grid.M ** 2
        if project:
            return leray_project(coeffs, grid)
        return truncate(coeffs, grid)

    def to_physical(self, pad: int = 1) -> np.ndarray:
        """Real samples on the (pad * M)^2 grid."""
        coeffs = self.coeffs if pad == 1 else _pad(self.coeffs, self.grid, pad)
        size = self.grid.M * pad
        return np.fft.ifft2(coeffs, axes=(-2, -1)).real * size ** 2

    def copy(self) -> 'SpectralField':
        return SpectralField(self.grid, self.coeffs.copy())

    def _check_grid(self, other: 'SpectralField') -> None:
        if other.grid != self.grid:
            raise ValueError(f"Grid mismatch: {self.grid} vs {other.grid}")

    def __add__(self, other: 'SpectralField') -> 'SpectralField':
        self._check_grid(other)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: 'SpectralField') -> 'SpectralField':
        self._check_grid(other)
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> 'SpectralField':
        return SpectralField(self.grid, scalar * self.coeffs)

    __rmul__ = __mul__

    def __neg__(self) -> 'SpectralField':
        return SpectralField(self.grid, -self.coeffs)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.coeffs)))

    def divergence_residual(self) -> float:
        """max |k . u(k)| / max |k||u(k)|, zero for a solenoidal field."""
        kx, ky = self.grid.k
        div = np.abs(kx * self.coeffs[0] + ky * self.coeffs[1])
        scale = np.max(np.sqrt(self.grid.k2) * np.sqrt(np.sum(np.abs(self.coeffs) ** 2, axis=0)))
        return float(div.max() / scale) if scale > 0 else 0.0


def _pad(coeffs: np.ndarray, grid: WaveGrid, factor: int) -> np.ndarray:
    """Embed coefficients into a (factor * M)^2 spectrum, leaving the new modes empty."""
    size = grid.M * factor
    padded = np.zeros(coeffs.shape[:-2] + (size, size), dtype=complex)
    idx = grid.index % size
    padded[..., idx[:, None], idx[None, :]] = coeffs
    return padded


def truncate(raw: np.ndarray, grid: WaveGrid) -> SpectralField:
    """Zero the mean and every mode outside the Galerkin set, without projecting."""
    coeffs = np.array(raw, dtype=complex)
    coeffs[:, ~grid.retained] = 0.0
    coeffs[:, 0, 0] = 0.0
    return SpectralField(grid, coeffs)


def leray_project(raw: Union[np.ndarray, SpectralField], grid: Optional[WaveGrid] = None) -> SpectralField:
    """
    Apply I - k k^T / |k|^2 modewise and drop the mean.

    Args:
        raw: Conjugate-symmetric coefficients of shape (2, M, M), or a SpectralField
        grid: Grid of the raw coefficients; taken from the field when omitted

    Returns:
        Divergence-free, zero-mean field on the retained modes
    """
    if isinstance(raw, SpectralField):
        grid = raw.grid
        raw = raw.coeffs
    if grid is None:
        raise ValueError("leray_project needs a grid for raw coefficient arrays")
    coeffs = np.asarray(raw, dtype=complex)
    kx, ky = grid.k
    div = (kx * coeffs[0] + ky * coeffs[1]) / grid.k2_safe
    projected = np.stack([coeffs[0] - kx * div, coeffs[1] - ky * div])
    projected[:, ~grid.retained] = 0.0
    projected[:, 0, 0] = 0.0
    return SpectralField(grid, projected)


def stokes_power(phi: SpectralField, alpha: float) -> SpectralField:
    """Multiply every mode by |k|^(2 alpha)."""
    factor = phi.grid.k2_safe ** alpha
    factor[0, 0] = 0.0
    return SpectralField(phi.grid, phi.coeffs * factor)


def gradient_physical(phi: SpectralField) -> np.ndarray:
    """Physical samples of d phi_c / d x_a, shape (2 components, 2 directions, M, M)."""
    kx, ky = phi.grid.k
    derivs = np.stack([1j * kx * phi.coeffs, 1j * ky * phi.coeffs], axis=1)
    return np.fft.ifft2(derivs, axes=(-2, -1)).real * phi.grid.M ** 2


def bilinear(u: SpectralField, v: SpectralField) -> SpectralField:
    """
    Pseudospectral Pi((u . grad) v) on the retained modes.

    Retained modes lie inside radius dealias_fraction * M/2, so with the default
    2/3 rule the quadratic product never aliases back onto them.
    """
    if u.grid != v.grid:
        raise ValueError(f"Grid mismatch in bilinear term: {u.grid} vs {v.grid}")
    grid = u.grid
    u_phys = u.to_physical()
    grad_v = gradient_physical(v)
    advection = u_phys[0] * grad_v[:, 0] + u_phys[1] * grad_v[:, 1]
    coeffs = np.fft.fft2(advection, axes=(-2, -1)) / grid.M ** 2
    return leray_project(coeffs, grid)


def inner(u: SpectralField, v: SpectralField) -> float:
    """H inner product (Parseval)."""
    if u.grid != v.grid:
        raise ValueError(f"Grid mismatch: {u.grid} vs {v.grid}")
    return float(u.grid.L ** 2 * np.sum(np.real(np.conj(u.coeffs) * v.coeffs)))


def norm(phi: SpectralField, space: str = 'H', alpha: Optional[float] = None) -> float:
    """
    Norm of a field in one of H, V, DA, Dalpha, L4, Linf.

    Dalpha is |A^alpha phi|_H. L4 and Linf are evaluated on the 2M zero-padded grid,
    where the L4 quadrature is exact for retained fields.
    """
    grid = phi.grid
    energy = np.sum(np.abs(phi.coeffs) ** 2, axis=0)
    if space == 'H':
        return math.sqrt(grid.L ** 2 * energy.sum())
    if space == 'V':
        return math.sqrt(grid.L ** 2 * np.sum(grid.k2 * energy))
    if space == 'DA':
        return math.sqrt(grid.L ** 2 * np.sum(grid.k2 ** 2 * energy))
    if space == 'Dalpha':
        if alpha is None:
            raise ValueError("Dalpha norm needs an exponent alpha")
        weights = grid.k2_safe ** (2.0 * alpha)
        weights[0, 0] = 0.0
        return math.sqrt(grid.L ** 2 * np.sum(weights * energy))
    if space in ('L4', 'Linf'):
        samples = phi.to_physical(pad=2)
        speed2 = samples[0] ** 2 + samples[1] ** 2
        if space == 'Linf':
            return math.sqrt(float(speed2.max()))
        cell = (grid.L / (2 * grid.M)) ** 2
        return float(cell * np.sum(speed2 ** 2)) ** 0.25
    raise ValueError(f"Unknown space '{space}', expected one of {SPACES}")


def _series_at_points(phi: SpectralField, points: np.ndarray) -> np.ndarray:
    grid = phi.grid
    k1 = 2.0 * math.pi / grid.L * grid.index
    active = np.nonzero(np.any(grid.retained, axis=1))[0]
    ex = np.exp(1j * points[:, 0:1] * k1[None, active])
    ey = np.exp(1j * points[:, 1:2] * k1[None, active])
    block = phi.coeffs[:, active[:, None], active[None, :]]
    values = np.empty((points.shape[0], 2))
    for c in range(2):
        values[:, c] = np.real(np.sum((ex @ block[c]) * ey, axis=1))
    return values


def evaluate_at_points(phi: SpectralField, points: np.ndarray, method: str = 'auto') -> np.ndarray:
    """
    Evaluate the truncated series at arbitrary points.

    Args:
        phi: Field to evaluate
        points: Array of shape (P, 2); positions outside [0, L)^2 are wrapped
        method: 'series' sums the trigonometric polynomial, 'grid' reads the inverse
            FFT and needs every point on a grid node, 'auto' picks 'grid' when possible

    Returns:
        Array of shape (P, 2) with the velocity at each point
    """
    grid = phi.grid
    points = np.mod(np.atleast_2d(np.asarray(points, dtype=float)), grid.L)
    if method not in ('auto', 'series', 'grid'):
        raise ValueError(f"Unknown evaluation method '{method}'")
    cells = points / grid.spacing
    on_grid = np.allclose(cells, np.round(cells), rtol=0.0, atol=1e-9)
    if method == 'grid' and not on_grid:
        raise ValueError("Grid evaluation requested for points that are not grid nodes")
    if method == 'series' or not on_grid:
        return _series_at_points(phi, points)
    idx = np.round(cells).astype(int) % grid.M
    samples = phi.to_physical()
    return np.stack([samples[c][idx[:, 0], idx[:, 1]] for c in range(2)], axis=1)


def random_field(grid: WaveGrid, rng: np.random.Generator, max_mode: int = 8,
                 slope: float = 2.0, solenoidal: bool = True) -> SpectralField:
    """
    Random zero-mean field on |j| <= max_mode with amplitude (1 + |j|^2)^(-slope/2).

    The draws depend only on max_mode, so the same generator state gives the same
    field on any grid that retains those modes.
    """
    if max_mode ** 2 > (grid.dealias_fraction * grid.M / 2) ** 2:
        raise ValueError(f"max_mode={max_mode} exceeds the retained radius of M={grid.M}")
    span = np.arange(-max_mode, max_mode + 1)
    jx, jy = np.meshgrid(span, span, indexing='ij')
    amplitude = (1.0 + jx ** 2 + jy ** 2) ** (-slope / 2.0)
    amplitude[(jx ** 2 + jy ** 2) > max_mode ** 2] = 0.0
    draws = rng.standard_normal((2, 2, span.size, span.size))
    box = (draws[0] + 1j * draws[1]) * amplitude
    box = 0.5 * (box + np.conj(np.flip(box, axis=(-2, -1))))
    coeffs = np.zeros((2, grid.M, grid.M), dtype=complex)
    idx = span % grid.M
    coeffs[:, idx[:, None], idx[None, :]] = box
    if solenoidal:
        return leray_project(coeffs, grid)
    return truncate(coeffs, grid)


def eigenmode(grid: WaveGrid, j1: int, j2: int, amplitude: float = 1.0, phase: float = 0.0) -> SpectralField:
    """Solenoidal Stokes eigenfunction amplitude * d cos(k.x + phase) with d perpendicular to k."""
    if (j1, j2) == (0, 0):
        raise ValueError("The zero wavenumber carries no zero-mean eigenfunction")
    length = math.hypot(j1, j2)
    direction = np.array([-j2, j1]) / length
    coeffs = np.zeros((2, grid.M, grid.M), dtype=complex)
    half = 0.5 * amplitude * np.exp(1j * phase)
    coeffs[:, j1 % grid.M, j2 % grid.M] += half * direction
    coeffs[:, -j1 % grid.M, -j2 % grid.M] += np.conj(half) * direction
    field = SpectralField(grid, coeffs)
    if not grid.retained[j1 % grid.M, j2 % grid.M]:
        raise ValueError(f"Mode ({j1}, {j2}) lies outside the retained set of M={grid.M}")
    return field
