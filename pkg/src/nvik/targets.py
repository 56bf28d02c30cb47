"""Unnormalized densities: the ring mixture target, geometric interpolation
between an easy initial density and the target, and learnable schedules of
interpolation coefficients."""

from __future__ import annotations

import numpy as np

from . import tape
from .tape import Node, as_node


class RingGmmTarget:
    """Sum (not average) of M isotropic Gaussians on a circle.

    Component m has mean ``(r sin(2 m pi / M), r cos(2 m pi / M))``. Because
    the components are normalized, the true normalizer is exactly M.
    """

    dim = 2

    def __init__(self, modes=8, radius=10.0, variance=0.5):
        self.modes = int(modes)
        self.radius = float(radius)
        self.variance = float(variance)
        self.std = float(np.sqrt(variance))
        ang = 2.0 * np.pi * np.arange(1, self.modes + 1) / self.modes
        self.means = np.stack([radius * np.sin(ang), radius * np.cos(ang)], axis=1)

    def log_density(self, z, detach_params=False):
        z = as_node(z)
        if z.value.shape[-1] != self.dim:
            raise tape.ShapeError(f"ring target expects dim {self.dim}, got {z.value.shape}")
        comps = [tape.gaussian_logpdf(z, self.means[m], self.std)
                 for m in range(self.modes)]
        if z.value.ndim == 1:
            stacked = tape.concat([tape.reshape(c, (1,)) for c in comps], axis=0)
            return tape.logsumexp(stacked, axis=None)
        cols = [tape.reshape(c, (-1, 1)) for c in comps]
        return tape.logsumexp(tape.concat(cols, axis=1), axis=1)

    def log_partition(self):
        """Analytic log Z: the integral of a sum of M normalized Gaussians."""
        return float(np.log(self.modes))

    def mode_assignment(self, z_values):
        """Nearest-mode index per sample, for coverage diagnostics."""
        d2 = ((z_values[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)


class AnnealingPath:
    """Interpolation coefficients for the K-1 annealed densities after the
    initial one: strictly increasing, final coefficient exactly 1.

    The learnable parameterization maps K-1 unconstrained reals through a
    softmax and cumulative sum, then normalizes by the last entry so the
    endpoint is exact; monotonicity holds for any raw values.
    """

    def __init__(self, num_densities, learnable=False, store=None, rng=None):
        if num_densities < 2:
            raise ValueError(f"need at least 2 densities, got {num_densities}")
        self.num_densities = int(num_densities)
        self.learnable = bool(learnable)
        n = self.num_densities - 1
        if learnable:
            init = np.zeros(n)
            self.raw = tape.parameter(init)
            if store is not None:
                store.add("schedule", self.raw)
        else:
            self.raw = None
        self._linear = np.linspace(1.0 / n, 1.0, n)

    def betas(self):
        """Coefficient vector of length K-1 as a (possibly differentiable) node."""
        if not self.learnable:
            return tape.constant(self._linear)
        increments = tape.softmax(self.raw, axis=-1)
        cum = tape.cumsum(increments, axis=-1)
        last = tape.take(cum, self.num_densities - 2, axis=0)
        return cum / last

    def beta_values(self):
        return self.betas().value.copy()


class AnnealedDensity:
    """Geometric bridge: log density is the affine combination
    ``(1 - beta) log q1 + beta log gamma_K`` evaluated in log space."""

    def __init__(self, initial, final, path, index):
        self.initial = initial
        self.final = final
        self.path = path
        self.index = int(index)  # position in path.betas()

    def beta(self):
        return tape.take(self.path.betas(), self.index, axis=0)

    def log_density(self, z, detach_params=False):
        beta = self.beta()
        if detach_params:
            beta = tape.detach(beta)
        lq = self.initial.log_density(z)
        lg = self.final.log_density(z)
        return (1.0 - beta) * lq + beta * lg


class DensitySequence:
    """Ordered density handles gamma_1..gamma_K sharing one schedule.

    Index 0 is the initial proposal's own density (so the first importance
    weight vanishes); index K-1 interpolates with coefficient exactly 1 and
    therefore equals the final target.
    """

    def __init__(self, densities, path=None):
        if len(densities) < 2:
            raise ValueError("a sequence needs at least 2 densities")
        self.densities = list(densities)
        self.path = path

    def __len__(self):
        return len(self.densities)

    def __getitem__(self, k):
        return self.densities[k]


def geometric_sequence(initial, final, path):
    """Build q1, bridged densities, final target from an annealing path."""
    mids = [AnnealedDensity(initial, final, path, i)
            for i in range(path.num_densities - 1)]
    return DensitySequence([initial] + mids, path=path)


def _grid_log_density(density, grid_pts):
    return density.log_density(tape.constant(grid_pts)).value


def pairwise_kl_quadrature(seq, lo=-20.0, hi=20.0, n=400):
    """Reverse KL between consecutive normalized densities, by 2-D quadrature.

    Returns KL(pi_k || pi_{k+1}) for k = 1..K-1. Normalization happens on
    the grid, so any unnormalized handles are fine.
    """
    xs = np.linspace(lo, hi, n)
    cell = (xs[1] - xs[0]) ** 2
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    logs = [_grid_log_density(d, pts) for d in seq.densities]
    kls = []
    for la, lb in zip(logs[:-1], logs[1:]):
        za = _log_trapz(la, cell)
        zb = _log_trapz(lb, cell)
        pa = np.exp(la - za)
        kl = float(np.sum(pa * ((la - za) - (lb - zb))) * cell)
        kls.append(kl)
    return np.array(kls)


def grid_log_partition(density, lo=-20.0, hi=20.0, n=400):
    """Numeric log normalizer of a 2-D density on a square grid."""
    xs = np.linspace(lo, hi, n)
    cell = (xs[1] - xs[0]) ** 2
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return _log_trapz(_grid_log_density(density, pts), cell)


def _log_trapz(log_vals, cell):
    m = log_vals.max()
    return float(m + np.log(np.exp(log_vals - m).sum() * cell))
