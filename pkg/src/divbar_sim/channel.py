"""Per-link mutual-information models and multi-slot decode-failure tables.

Each directed link carries an i.i.d. per-slot information amount R (bits).
A receiver decodes a packet of entropy ``h0`` once the information it has
available reaches ``h0``; the probability that a sum of m slot draws is
still short of a threshold is the quantity everything downstream consumes.

``CdfTable`` tabulates exactly that: ``values[m][i]`` is P(R_1+...+R_m < x_i)
on a uniform grid over [0, h0], with the *strict* inequality.  For the
continuous (Rayleigh) model this coincides with the ordinary cdf; for
discrete test channels the distinction matters at atom locations (a draw of
exactly h0 decodes, so it must not count as failure mass).  Row m = 0 is
identically 1 by convention, which makes the first convolution step and the
m-indexed series downstream come out right without special cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError

LN2 = math.log(2.0)

DEFAULT_GRID_CELLS = 1024
DEFAULT_MAX_ORDER = 512

# Series tails below this product are considered fully converged.
TRUNCATION_TOL = 1e-12


@dataclass(frozen=True)
class RayleighFading:
    """Rayleigh block fading: per-slot SNR is exponential with the given
    linear-scale mean, so R = log2(1 + snr)."""

    mean_snr: float

    def __post_init__(self):
        if not (self.mean_snr > 0.0 and math.isfinite(self.mean_snr)):
            raise ConfigError(f"mean_snr must be positive, got {self.mean_snr}")

    @property
    def continuous(self) -> bool:
        return True

    def cdf(self, x: float) -> float:
        # P(log2(1+snr) <= x) = 1 - exp(-(2^x - 1)/mean_snr)
        return 1.0 - math.exp(-(2.0 ** x - 1.0) / self.mean_snr)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        p = np.exp2(x)
        return np.exp(-(p - 1.0) / self.mean_snr) * p * LN2 / self.mean_snr

    def sample(self, rng: np.random.Generator, size=None):
        return np.log2(1.0 + rng.exponential(self.mean_snr, size=size))

    def rates_from_uniform(self, u):
        # Inverse-cdf transform; u in [0, 1).
        return np.log2(1.0 - self.mean_snr * np.log1p(-np.asarray(u)))


@dataclass(frozen=True)
class DiscreteTest:
    """Finite-atom test channel ((rate, prob) pairs).

    Admitted as an analytic oracle only: epoch lengths become geometric and
    every downstream series has a closed form.  The strict-inequality parts
    of the flow-rate lemma do not apply to these channels.
    """

    atoms: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.atoms:
            raise ConfigError("DiscreteTest needs at least one atom")
        atoms = tuple((float(r), float(p)) for r, p in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if any(r < 0.0 for r, _ in atoms):
            raise ConfigError("atom rates must be >= 0")
        if any(p < 0.0 for _, p in atoms):
            raise ConfigError("atom probabilities must be >= 0")
        total = math.fsum(p for _, p in atoms)
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(f"atom probabilities sum to {total!r}, not 1")

    @property
    def continuous(self) -> bool:
        return False

    def cdf(self, x: float) -> float:
        return math.fsum(p for r, p in self.atoms if r <= x)

    def cdf_strict(self, x: float) -> float:
        return math.fsum(p for r, p in self.atoms if r < x)

    def sample(self, rng: np.random.Generator, size=None):
        rates = np.array([r for r, _ in self.atoms])
        probs = np.array([p for _, p in self.atoms])
        probs = probs / probs.sum()
        idx = rng.choice(len(rates), size=size, p=probs)
        return rates[idx]

    def rates_from_uniform(self, u):
        rates = np.array([r for r, _ in self.atoms])
        cum = np.cumsum([p for _, p in self.atoms])
        cum[-1] = 1.0
        idx = np.searchsorted(cum, np.asarray(u), side="right")
        return rates[np.minimum(idx, len(rates) - 1)]


ChannelModel = RayleighFading | DiscreteTest


def sample_rate(model: ChannelModel, rng: np.random.Generator) -> float:
    """One realization of the per-slot information amount on a link."""
    return float(model.sample(rng))


def rate_cdf(model: ChannelModel, x: float) -> float:
    """Exact single-slot cdf P(R <= x).  x must be nonnegative."""
    if x < 0.0:
        raise ValueError(f"rate_cdf argument must be >= 0, got {x}")
    return model.cdf(x)


@dataclass
class CdfTable:
    """Decode-failure probabilities P(sum of m slot draws < x) on a grid.

    values has shape (max_order + 1, cells + 1); values[m][i] is the
    probability at x_i = i * grid_step, with x_cells = h0.  values[0] is
    identically 1.  The array is frozen after construction and safe to share.
    """

    h0: float
    grid_step: float
    max_order: int
    values: np.ndarray

    @property
    def cells(self) -> int:
        return self.values.shape[1] - 1

    def at_h0(self, m: int) -> float:
        return float(self.values[m, -1])

    @property
    def failure_at_h0(self) -> np.ndarray:
        """Vector F(m) = P(m-slot sum < h0) for m = 0..max_order."""
        return self.values[:, -1]


def build_cdf_table(
    model: ChannelModel,
    h0: float,
    grid_step: float | None = None,
    max_order: int = DEFAULT_MAX_ORDER,
) -> CdfTable:
    """Tabulate m-fold decode-failure probabilities for one link.

    Continuous models use the iterated convolution
    F_m(x) = integral of F_{m-1}(x - y) f(y) dy over [0, x], evaluated by
    trapezoid quadrature on the grid (FFT-accelerated; identical weights).
    Discrete models convolve atom masses exactly; atoms are snapped to the
    nearest grid point and mass at or above h0 is lumped into a sink bin,
    which is exact for every evaluation at x <= h0.
    """
    if not (h0 > 0.0 and math.isfinite(h0)):
        raise ConfigError(f"h0 must be positive, got {h0}")
    if grid_step is None:
        grid_step = h0 / DEFAULT_GRID_CELLS
    if not (grid_step > 0.0):
        raise ConfigError(f"grid_step must be positive, got {grid_step}")
    cells = int(round(h0 / grid_step))
    if cells < 64 or abs(cells * grid_step - h0) > 1e-9 * h0:
        raise ConfigError(
            f"grid_step {grid_step} must divide h0 {h0} into >= 64 cells"
        )
    if max_order < 1:
        raise ConfigError(f"max_order must be >= 1, got {max_order}")

    values = np.empty((max_order + 1, cells + 1))
    values[0] = 1.0
    x = np.linspace(0.0, h0, cells + 1)

    if isinstance(model, RayleighFading):
        values[1] = 1.0 - np.exp(-(np.exp2(x) - 1.0) / model.mean_snr)
        f = model.pdf(x)
        # One rfft of the fixed kernel, reused across orders.
        nfft = 1
        while nfft < 2 * cells + 1:
            nfft *= 2
        f_hat = np.fft.rfft(f, nfft)
        for m in range(2, max_order + 1):
            prev = values[m - 1]
            conv = np.fft.irfft(np.fft.rfft(prev, nfft) * f_hat, nfft)[: cells + 1]
            row = (conv - 0.5 * prev * f[0] - 0.5 * prev[0] * f) * grid_step
            # Quadrature hygiene: clamp fft roundoff, keep rows monotone.
            np.clip(row, 0.0, 1.0, out=row)
            np.maximum.accumulate(row, out=row)
            values[m] = row
    else:
        idx = np.minimum(
            np.rint(np.array([r for r, _ in model.atoms]) / grid_step).astype(int),
            cells,
        )
        atom_pmf = np.zeros(cells + 1)
        for i, (_, p) in zip(idx, model.atoms):
            atom_pmf[i] += p
        pmf = atom_pmf.copy()
        values[1] = _strict_cdf_from_pmf(pmf)
        for m in range(2, max_order + 1):
            full = np.convolve(pmf, atom_pmf)
            pmf = full[: cells + 1].copy()
            pmf[cells] += full[cells + 1 :].sum()  # sums >= h0 lump together
            values[m] = _strict_cdf_from_pmf(pmf)

    values.setflags(write=False)
    return CdfTable(h0=h0, grid_step=grid_step, max_order=max_order, values=values)


def _strict_cdf_from_pmf(pmf: np.ndarray) -> np.ndarray:
    out = np.empty_like(pmf)
    out[0] = 0.0
    np.cumsum(pmf[:-1], out=out[1:])
    return out


@lru_cache(maxsize=256)
def cached_cdf_table(
    model: ChannelModel, h0: float, grid_step: float | None, max_order: int
) -> CdfTable:
    """Process-wide memoized table builder; models are frozen dataclasses so
    the cache key is the full channel description.  Sweeps rebuild the same
    handful of tables thousands of times without this."""
    return build_cdf_table(model, h0, grid_step, max_order)
