"""Figure rendering for run directories: sample scatter over target
contours, schedule trajectories, per-step KL bars, and training-ESS curves.
All figures are written as SVG files next to the delimited output."""

from __future__ import annotations

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import tape, targets


def _save(fig, path):
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return str(path)


def warning_svg(path, message):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.text(0.5, 0.5, message, ha="center", va="center", wrap=True)
    ax.set_axis_off()
    return _save(fig, path)


def sample_scatter(path, samples, target, lim=14.0, n_grid=200):
    """Final-level samples over log-density contours of the target."""
    xs = np.linspace(-lim, lim, n_grid)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    ld = target.log_density(tape.constant(pts)).value.reshape(n_grid, n_grid)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.contour(gx, gy, np.exp(ld), levels=8, cmap="Greys", linewidths=0.8)
    ax.scatter(samples[:, 0], samples[:, 1], s=4, alpha=0.35, c="tab:blue",
               linewidths=0)
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.set_aspect("equal")
    ax.set_title("final-level samples")
    return _save(fig, path)


def schedule_trajectory(path, iters, beta_rows):
    """Interpolation coefficients over training; one line per coefficient."""
    beta_rows = np.asarray(beta_rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for j in range(beta_rows.shape[1]):
        ax.plot(iters, beta_rows[:, j], label=f"beta_{j + 1}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("annealing coefficient")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7, ncol=2)
    ax.set_title("schedule trajectory")
    return _save(fig, path)


def kl_bars(path, kls_learned, kls_linear=None):
    """Per-step quadrature KL between consecutive bridge densities."""
    fig, ax = plt.subplots(figsize=(6, 4))
    idx = np.arange(1, len(kls_learned) + 1)
    width = 0.4 if kls_linear is not None else 0.8
    ax.bar(idx - width / 2 * (kls_linear is not None), kls_learned,
           width=width, label="learned")
    if kls_linear is not None:
        ax.bar(idx + width / 2, kls_linear, width=width, label="linear")
        ax.legend()
    ax.set_xlabel("step k")
    ax.set_ylabel("KL(pi_k || pi_k+1)")
    ax.set_title("per-step KL (quadrature)")
    return _save(fig, path)


def training_ess(path, iters, ess, window=100):
    """Rolling mean and +-2 SD band of the training ESS."""
    ess = np.asarray(ess, float)
    iters = np.asarray(iters)
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(ess) >= window:
        kernel = np.ones(window) / window
        mean = np.convolve(ess, kernel, mode="valid")
        sq = np.convolve(ess ** 2, kernel, mode="valid")
        sd = np.sqrt(np.maximum(sq - mean ** 2, 0.0))
        xs = iters[window - 1:]
        ax.plot(xs, mean, color="tab:blue", label=f"rolling mean (w={window})")
        ax.fill_between(xs, mean - 2 * sd, mean + 2 * sd, alpha=0.25,
                        color="tab:blue", label="+-2 SD")
    else:
        ax.plot(iters, ess, color="tab:blue", label="ESS")
    ax.set_xlabel("iteration")
    ax.set_ylabel("ESS")
    ax.legend()
    ax.set_title("training ESS")
    return _save(fig, path)
