"""
Observation operators, interpolant bases and checks of their approximation properties.

Squares are numbered n = i + (j - 1) K with i counting along the first axis, and
observation vectors interleave the two velocity components of each square.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from sklearn.linear_model import LinearRegression

from .data_structures import BASIS_KINDS, ObservationVector
from .spectral import SpectralField, WaveGrid, evaluate_at_points, leray_project, random_field

logger = logging.getLogger(__name__)

# mollifier radius as a fraction of the square side
MOLLIFIER_FRACTION = 0.1
# squares per side below which the mollifier is poorly resolved on the simulation grid
MIN_POINTS_PER_SQUARE = 20


def square_index(i: int, j: int, K: int) -> int:
    """1-based square number of the square in column i, row j."""
    return i + (j - 1) * K


def to_square_grid(values: np.ndarray, K: int) -> np.ndarray:
    """Interleaved vector of length 2K^2 -> array (2, K, K) indexed [component, i-1, j-1]."""
    return np.asarray(values, dtype=float).reshape(K, K, 2).transpose(2, 1, 0)


def from_square_grid(arr: np.ndarray) -> np.ndarray:
    """Inverse of to_square_grid."""
    return np.ascontiguousarray(np.asarray(arr).transpose(2, 1, 0)).reshape(-1)


def _check_divides(grid: WaveGrid, K: int) -> None:
    if K < 1 or grid.M % K:
        raise ValueError(
            f"K={K} squares per side must divide the grid resolution M={grid.M}; "
            f"choose M as a power-of-two multiple of K"
        )


def _fold(arr: np.ndarray, K: int) -> np.ndarray:
    """Sum FFT-ordered (..., M, M) coefficients over wavenumbers congruent mod K."""
    M = arr.shape[-1]
    return arr.reshape(arr.shape[:-2] + (M // K, K, M // K, K)).sum(axis=(-4, -2))


@lru_cache(maxsize=32)
def _square_weights(grid: WaveGrid, K: int) -> np.ndarray:
    """int over [0, h)^2 of exp(i k.x), per mode."""
    h = grid.L / K
    k1 = 2.0 * math.pi / grid.L * grid.index
    safe = np.where(k1 == 0, 1.0, k1)
    one_d = np.where(k1 == 0, h, (np.exp(1j * safe * h) - 1.0) / (1j * safe))
    return one_d[:, None] * one_d[None, :]


def observe_volumes(phi: SpectralField, K: int) -> ObservationVector:
    """
    Volume averages (N/L^2) int_{Q_n} phi over the K x K squares.

    The integrals are exact: each Fourier mode is integrated in closed form over the
    square and the per-square sums are gathered with a K x K inverse FFT.
    """
    grid = phi.grid
    _check_divides(grid, K)
    folded = _fold(phi.coeffs * _square_weights(grid, K)[None], K)
    averages = (K ** 4 / grid.L ** 2) * np.fft.ifft2(folded, axes=(-2, -1)).real
    return ObservationVector(from_square_grid(averages), K, 'volume')


def node_positions(K: int, L: float, placement: str = 'center', seed: int = 0) -> np.ndarray:
    """
    One node per square, ordered by square number.

    Args:
        K: Squares per side
        L: Domain side length
        placement: 'center', 'random' (seeded, uniform in each square) or
            'offset:a,b' with the relative position (a, b) in [0, 1)^2

    Returns:
        Array of shape (K^2, 2)
    """
    h = L / K
    m = np.arange(K * K)
    corner = np.stack([(m % K) * h, (m // K) * h], axis=1)
    if placement == 'center':
        rel = np.full((K * K, 2), 0.5)
    elif placement == 'random':
        rel = np.random.default_rng(np.random.SeedSequence([seed, K])).random((K * K, 2))
    elif placement.startswith('offset:'):
        try:
            a, b = (float(part) for part in placement[len('offset:'):].split(','))
        except ValueError:
            raise ValueError(f"Malformed node placement '{placement}', expected offset:a,b")
        if not (0 <= a < 1 and 0 <= b < 1):
            raise ValueError(f"Node offsets must lie in [0, 1), got ({a}, {b})")
        rel = np.tile([a, b], (K * K, 1))
    else:
        raise ValueError(f"Unknown node placement '{placement}'")
    return corner + rel * h


def validate_nodes(nodes: np.ndarray, K: int, L: float) -> None:
    """Raise if some node x_n does not lie in its square Q_n."""
    nodes = np.asarray(nodes, dtype=float)
    if nodes.shape != (K * K, 2):
        raise ValueError(f"Expected {K * K} nodes for K={K}, got array of shape {nodes.shape}")
    h = L / K
    m = np.arange(K * K)
    lower = np.stack([(m % K) * h, (m // K) * h], axis=1)
    outside = np.any((nodes < lower) | (nodes >= lower + h), axis=1)
    if outside.any():
        n = int(np.nonzero(outside)[0][0]) + 1
        raise ValueError(f"Node {n} at {tuple(nodes[n - 1])} lies outside its square Q_{n}")


def observe_nodes(phi: SpectralField, nodes: np.ndarray, K: Optional[int] = None) -> ObservationVector:
    """Point values phi(x_n), one node per square."""
    nodes = np.asarray(nodes, dtype=float)
    if K is None:
        K = int(round(math.sqrt(nodes.shape[0])))
    validate_nodes(nodes, K, phi.grid.L)
    values = evaluate_at_points(phi, nodes)
    return ObservationVector(values.reshape(-1), K, 'nodal')


def oversample_average(zeta: ObservationVector, q: int) -> ObservationVector:
    """Average the q^2 fine pairs inside each coarse square."""
    if q < 1 or zeta.K % q:
        raise ValueError(f"Refinement q={q} must divide the fine squares per side K={zeta.K}")
    if q == 1:
        return zeta
    coarse_K = zeta.K // q
    fine = to_square_grid(zeta.values, zeta.K)
    coarse = fine.reshape(2, coarse_K, q, coarse_K, q).mean(axis=(2, 4))
    return ObservationVector(from_square_grid(coarse), coarse_K, zeta.kind)


def bump(r2: np.ndarray) -> np.ndarray:
    """Unnormalized mollifier exp(1/(|z|^2 - 1)) on |z| < 1."""
    r2 = np.asarray(r2, dtype=float)
    inside = r2 < 1.0
    out = np.zeros_like(r2)
    out[inside] = np.exp(1.0 / (r2[inside] - 1.0))
    return out


def mollifier_kernel(radius_cells: float) -> np.ndarray:
    """Discrete rho_eps on a square stencil, normalized to unit sum."""
    reach = int(math.ceil(radius_cells))
    offsets = np.arange(-reach, reach + 1)
    a, b = np.meshgrid(offsets, offsets, indexing='ij')
    kernel = bump((a ** 2 + b ** 2) / radius_cells ** 2)
    return kernel / kernel.sum()


def square_pattern(kind: str, K: int, points_per_square: int) -> np.ndarray:
    """psi_1 (step) or its mollification sampled on the (K P)^2 construction grid."""
    size = K * points_per_square
    indicator = np.zeros((size, size))
    indicator[:points_per_square, :points_per_square] = 1.0
    if kind == 'step':
        return indicator
    radius = MOLLIFIER_FRACTION * points_per_square
    return ndimage.convolve(indicator, mollifier_kernel(radius), mode='wrap')


class InterpolantBasis:
    """
    The D = 2N lifting functions l_d of one square layout.

    All squares share one pattern up to translation, so only psi_1 is stored: on a
    construction grid of P points per square side (at least construction_oversample
    times finer than the simulation grid) and as Fourier coefficients on the
    simulation modes.
    """

    def __init__(self, kind: str, K: int, grid: WaveGrid, points_per_square: int = 40,
                 construction_oversample: int = 4):
        if kind not in BASIS_KINDS:
            raise ValueError(f"Unknown basis kind '{kind}', expected one of {BASIS_KINDS}")
        _check_divides(grid, K)
        self.kind = kind
        self.K = K
        self.grid = grid
        self.h = grid.L / K
        self.warnings: List[str] = []

        ratio = grid.M // K
        base = max(points_per_square, math.ceil(construction_oversample * grid.M / K))
        # a multiple of M/K so simulation nodes fall on construction nodes
        self.points_per_square = ratio * math.ceil(base / ratio)
        self.construction_size = K * self.points_per_square
        self.cell = grid.L / self.construction_size

        if kind == 'mollified' and ratio < MIN_POINTS_PER_SQUARE:
            message = (
                f"Mollifier radius h/10 is under-resolved on the simulation grid "
                f"(M/K = {ratio} < {MIN_POINTS_PER_SQUARE})"
            )
            logger.warning(message)
            self.warnings.append(message)

        self.pattern = square_pattern(kind, K, self.points_per_square)
        self.spectrum = np.fft.fft2(self.pattern) / self.construction_size ** 2
        self.coefficients = self._simulation_coefficients()
        self._fold_index = np.arange(grid.M) % K
        logger.debug(f"Built {kind} basis K={K} on {self.construction_size}^2 construction grid")

    def _simulation_coefficients(self) -> np.ndarray:
        if self.kind == 'step':
            # exact (1/L^2) int_{Q_1} exp(-i k.x)
            return np.conj(_square_weights(self.grid, self.K)) / self.grid.L ** 2
        idx = self.grid.index % self.construction_size
        return self.spectrum[idx[:, None], idx[None, :]]

    @property
    def N(self) -> int:
        return self.K * self.K

    @property
    def D(self) -> int:
        return 2 * self.N

    @property
    def mean_value(self) -> float:
        """<psi_n> = h^2 / L^2."""
        return (self.h / self.grid.L) ** 2

    def _check_dimension(self, zeta: ObservationVector) -> None:
        if zeta.K != self.K:
            raise ValueError(
                f"Observation vector has D={zeta.D} entries but the basis has D={self.D} (K={self.K})"
            )

    def _square_transform(self, values: np.ndarray) -> np.ndarray:
        return np.fft.fft2(to_square_grid(values, self.K), axes=(-2, -1))

    def interpolate(self, zeta: ObservationVector) -> SpectralField:
        """Pi L_h zeta = sum_d zeta_d gamma_d on the simulation modes."""
        self._check_dimension(zeta)
        transform = self._square_transform(zeta.values)
        idx = self._fold_index
        coeffs = self.coefficients[None] * transform[:, idx[:, None], idx[None, :]]
        return leray_project(coeffs, self.grid)

    def gamma(self, d: int) -> SpectralField:
        """gamma_d for a 1-based channel index d."""
        if not 1 <= d <= self.D:
            raise ValueError(f"Channel index d={d} outside 1..{self.D}")
        unit = np.zeros(self.D)
        unit[d - 1] = 1.0
        return self.interpolate(ObservationVector(unit, self.K))

    def construction_spectrum(self, values: np.ndarray) -> np.ndarray:
        """Fourier coefficients of the unprojected L_h zeta on the construction grid."""
        transform = self._square_transform(values)
        idx = np.arange(self.construction_size) % self.K
        coeffs = self.spectrum[None] * transform[:, idx[:, None], idx[None, :]]
        coeffs[:, 0, 0] = 0.0
        return coeffs

    def lift_samples(self, zeta: ObservationVector, resolution: str = 'simulation') -> np.ndarray:
        """
        Physical samples of L_h zeta before projection, shape (2, n, n).

        Args:
            zeta: Observation vector matching the basis
            resolution: 'simulation' for the M^2 grid, 'construction' for the fine grid
        """
        self._check_dimension(zeta)
        mean = self.mean_value * to_square_grid(zeta.values, self.K).sum(axis=(1, 2))
        if resolution == 'simulation' and self.kind == 'step':
            ratio = self.grid.M // self.K
            squares = to_square_grid(zeta.values, self.K)
            samples = np.repeat(np.repeat(squares, ratio, axis=1), ratio, axis=2)
            return samples - mean[:, None, None]
        if resolution not in ('simulation', 'construction'):
            raise ValueError(f"Unknown resolution '{resolution}'")
        size = self.construction_size
        fine = np.fft.ifft2(self.construction_spectrum(zeta.values), axes=(-2, -1)).real * size ** 2
        if resolution == 'construction':
            return fine
        stride = size // self.grid.M
        return fine[:, ::stride, ::stride]

    # Partition-of-unity diagnostics on the construction grid

    @property
    def reach(self) -> int:
        """Largest stencil offset of the discrete mollifier, in construction cells."""
        if self.kind == 'step':
            return 0
        return int(math.ceil(MOLLIFIER_FRACTION * self.points_per_square)) - 1

    def partition_sum(self) -> np.ndarray:
        """sum_n psi_n on one P x P tile (the sum is periodic with period h)."""
        P = self.points_per_square
        return self.pattern.reshape(self.K, P, self.K, P).sum(axis=(0, 2))

    def support_mask(self) -> np.ndarray:
        """Construction nodes within the mollifier radius of Q_1 (the set U_1)."""
        size, P, r = self.construction_size, self.points_per_square, self.reach
        cells = np.zeros(size, dtype=bool)
        cells[np.arange(-r, P + r) % size] = True
        return cells[:, None] & cells[None, :]

    def plateau_mask(self) -> np.ndarray:
        """Nodes of Q_1 whose difference stencil sees only psi_1 = 1 (interior plateau)."""
        size, P, r = self.construction_size, self.points_per_square, self.reach
        cells = np.zeros(size, dtype=bool)
        cells[r + 1:P - 1 - r] = True
        return cells[:, None] & cells[None, :]

    def gradient_samples(self) -> np.ndarray:
        """Central-difference gradient of psi_1 on the construction grid, shape (2, n, n)."""
        p = self.pattern
        gx = (np.roll(p, -1, axis=0) - np.roll(p, 1, axis=0)) / (2.0 * self.cell)
        gy = (np.roll(p, -1, axis=1) - np.roll(p, 1, axis=1)) / (2.0 * self.cell)
        return np.stack([gx, gy])

    def l2_norm(self) -> float:
        return math.sqrt(self.cell ** 2 * np.sum(self.pattern ** 2))

    def gradient_constants(self) -> dict:
        """Scale-free sizes h max|grad psi|, ||grad psi||_L2 and h^2 max|D^2 psi|."""
        if self.kind == 'step':
            raise ValueError("Step basis functions are not in H^1; gradient constants are undefined")
        grad = self.gradient_samples()
        p = self.pattern
        second = [
            (np.roll(p, -1, axis=a) - 2.0 * p + np.roll(p, 1, axis=a)) / self.cell ** 2 for a in (0, 1)
        ]
        return {
            'sup_gradient': self.h * float(np.sqrt((grad ** 2).sum(axis=0)).max()),
            'l2_gradient': math.sqrt(self.cell ** 2 * float(np.sum(grad ** 2))),
            'sup_second': self.h ** 2 * float(max(np.abs(s).max() for s in second)),
        }

    def gram_offsets(self, gradient: bool = False) -> np.ndarray:
        """
        int psi_1 psi_m (or grad psi_1 . grad psi_m) indexed by the square offset mod K.

        Entries are direct products of shifted samples, so disjoint supports give
        exact zeros.
        """
        fields = self.gradient_samples() if gradient else self.pattern[None]
        P = self.points_per_square
        gram = np.empty((self.K, self.K))
        for a in range(self.K):
            for b in range(self.K):
                shifted = np.roll(fields, (a * P, b * P), axis=(-2, -1))
                gram[a, b] = self.cell ** 2 * float(np.sum(fields * shifted))
        return gram

    def near_offsets(self) -> np.ndarray:
        """Offsets beta - alpha mod K lying in {1-K, -1, 0, 1, K-1}^2."""
        near = np.zeros(self.K, dtype=bool)
        near[[0, 1 % self.K, (self.K - 1) % self.K]] = True
        return near[:, None] & near[None, :]


@dataclass
class ApproximationEstimate:
    """Empirical constants of an interpolant observable."""
    mode: str
    c1: float
    c2: float = 0.0
    trials: int = 0
    ratios: np.ndarray = field(default=None, repr=False)


def interpolation_residual(basis: InterpolantBasis, phi: SpectralField,
                           nodes: Optional[np.ndarray] = None) -> Tuple[float, float, float]:
    """
    ||phi - R_h phi||^2 together with ||grad phi||^2 and ||D^2 phi||^2.

    Volume observations are used unless nodes are given. For the step basis the
    residual is evaluated exactly from square integrals; otherwise by Parseval on
    the construction grid.
    """
    grid = phi.grid
    energy = np.sum(np.abs(phi.coeffs) ** 2, axis=0)
    phi_h = grid.L ** 2 * energy.sum()
    phi_h1 = grid.L ** 2 * float(np.sum(grid.k2 * energy))
    phi_h2 = grid.L ** 2 * float(np.sum(grid.k2 ** 2 * energy))
    averages = observe_volumes(phi, basis.K)
    zeta = averages if nodes is None else observe_nodes(phi, nodes, basis.K)

    if basis.kind == 'step':
        h2 = basis.h ** 2
        integrals = h2 * averages.values
        total = to_square_grid(zeta.values, basis.K).sum(axis=(1, 2))
        residual = (
            phi_h - 2.0 * float(np.dot(zeta.values, integrals)) + h2 * float(np.dot(zeta.values, zeta.values))
            - h2 ** 2 / grid.L ** 2 * float(np.dot(total, total))
        )
        return max(residual, 0.0), phi_h1, phi_h2

    size = basis.construction_size
    embedded = np.zeros((2, size, size), dtype=complex)
    idx = grid.index % size
    embedded[:, idx[:, None], idx[None, :]] = phi.coeffs
    diff = embedded - basis.construction_spectrum(zeta.values)
    residual = grid.L ** 2 * float(np.sum(np.abs(diff) ** 2))
    return residual, phi_h1, phi_h2


def verify_approximation(basis: InterpolantBasis, mode: str = 'R1', trials: int = 500,
                         seed: int = 0, nodes: Optional[np.ndarray] = None,
                         max_mode: Optional[int] = None) -> ApproximationEstimate:
    """
    Estimate the (R1) constant or the (R2) pair over random zero-mean fields.

    Args:
        basis: Interpolant basis to test
        mode: 'R1' returns max ||phi - R_h phi||^2 / (h^2 ||phi||_H1^2);
            'R2' fits (c1, c2) by non-negative least squares and scales the pair up
            until the inequality holds for every trial
        trials: Number of random fields
        seed: Seed of the field generator
        nodes: Use nodal observations at these nodes instead of volume averages
        max_mode: Largest wavenumber index of the random fields
    """
    if mode not in ('R1', 'R2'):
        raise ValueError(f"Unknown approximation mode '{mode}', expected R1 or R2")
    if trials < 1:
        raise ValueError(f"Need at least one trial, got {trials}")
    grid = basis.grid
    limit = int(grid.dealias_fraction * grid.M / 2)
    max_mode = min(max_mode or limit, limit)
    rng = np.random.default_rng(np.random.SeedSequence([seed, basis.K, 7]))
    rows = np.empty((trials, 3))
    for t in range(trials):
        band = int(rng.integers(1, max_mode + 1))
        slope = float(rng.uniform(1.0, 4.0))
        phi = random_field(grid, rng, max_mode=band, slope=slope, solenoidal=False)
        rows[t] = interpolation_residual(basis, phi, nodes)

    h2 = basis.h ** 2
    residual, a, b = rows[:, 0], h2 * rows[:, 1], h2 ** 2 * rows[:, 2]
    if mode == 'R1':
        ratios = residual / a
        return ApproximationEstimate('R1', float(ratios.max()), 0.0, trials, ratios)

    fit = LinearRegression(fit_intercept=False, positive=True).fit(np.column_stack([a, b]), residual)
    c1, c2 = (float(v) for v in fit.coef_)
    if c1 <= 0 and c2 <= 0:
        c1 = float((residual / a).max())
    predicted = c1 * a + c2 * b
    scale = float(np.max(residual / predicted))
    if scale > 1.0:
        c1, c2 = scale * c1, scale * c2
    ratios = residual / (c1 * a + c2 * b)
    logger.info(f"(R2) fit for {basis.kind} basis K={basis.K}: c1={c1:.4g}, c2={c2:.4g}")
    return ApproximationEstimate('R2', c1, c2, trials, ratios)
