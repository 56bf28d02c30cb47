"""Transition kernels: conditional-Gaussian MLP kernels, deterministic
planar-flow stacks, simple context-free Gaussian kernels, and the fixed
initial proposal.

Kernels are pure given a parameter snapshot; all randomness is drawn by the
caller and passed in as standard-normal noise.
"""

from __future__ import annotations

import numpy as np

from . import tape
from .tape import Node, as_node

_SOFTPLUS_INV_1 = float(np.log(np.expm1(1.0)))  # softplus(x) == 1


class KernelError(ValueError):
    pass


class InitialProposal:
    """Fixed isotropic Gaussian proposal, mean 0 and std 5 by default."""

    def __init__(self, dim=2, std=5.0, mean=None):
        self.dim = int(dim)
        self.std = float(std)
        self.mean = np.zeros(dim) if mean is None else np.asarray(mean, float)

    def sample(self, n, rng):
        return self.mean + self.std * rng.standard_normal((n, self.dim))

    def log_density(self, z, detach_params=False):
        return tape.gaussian_logpdf(as_node(z), self.mean, self.std)


class GaussianMlpKernel:
    """Conditional Gaussian with MLP mean/std maps and a residual mean path.

    h(z) = W_h^T z + b_h;  mu(z) = z + W_mu^T h(z) + b_mu;
    sigma(z) = softplus(W_sig^T h(z) + b_sig), elementwise positive.
    Near-identity at init: weight entries ~ N(0, 1/fan_in) and b_sig set so
    sigma starts at 1, giving a unit-variance random walk.
    """

    stochastic = True

    def __init__(self, dim=2, hidden=50, store=None, group=None, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dim = int(dim)
        self.hidden = int(hidden)

        def init(shape, fan_in):
            return rng.standard_normal(shape) / np.sqrt(fan_in)

        self.w_h = tape.parameter(init((dim, hidden), dim))
        self.b_h = tape.parameter(np.zeros(hidden))
        self.w_mu = tape.parameter(init((hidden, dim), hidden))
        self.b_mu = tape.parameter(np.zeros(dim))
        self.w_sig = tape.parameter(init((hidden, dim), hidden))
        self.b_sig = tape.parameter(np.full(dim, _SOFTPLUS_INV_1))
        self._params = [self.w_h, self.b_h, self.w_mu, self.b_mu,
                        self.w_sig, self.b_sig]
        if store is not None:
            for p in self._params:
                store.add(group, p)

    def parameters(self):
        return list(self._params)

    def _weights(self, detach_params):
        if detach_params:
            return [tape.detach(p) for p in self._params]
        return self._params

    def mean_std(self, z_prev, detach_params=False):
        z_prev = as_node(z_prev)
        if z_prev.value.shape[-1] != self.dim:
            raise KernelError(f"kernel dim {self.dim}, input {z_prev.value.shape}")
        w_h, b_h, w_mu, b_mu, w_sig, b_sig = self._weights(detach_params)
        h = tape.tanh(z_prev @ w_h + b_h)
        mu = z_prev + (h @ w_mu + b_mu)
        sig = tape.softplus(h @ w_sig + b_sig)
        return mu, sig

    def sample_reparam(self, z_prev, noise):
        """Reparameterized draw plus its conditional log density.

        ``noise`` must be standard normal, drawn outside the graph.
        """
        noise = np.asarray(noise, float)
        mu, sig = self.mean_std(z_prev)
        z_new = mu + sig * tape.constant(noise)
        return z_new, tape.gaussian_logpdf(z_new, mu, sig)

    def log_prob(self, z_new, z_prev, detach_params=False):
        mu, sig = self.mean_std(z_prev, detach_params=detach_params)
        return tape.gaussian_logpdf(as_node(z_new), mu, sig)


class GaussianKernel:
    """Context-free Gaussian kernel with trainable mean and std.

    Useful both as a simple reverse kernel and in analytic-oracle tests.
    """

    stochastic = True

    def __init__(self, dim, mean=None, log_std=None, store=None, group=None):
        self.dim = int(dim)
        self.mean = tape.parameter(np.zeros(dim) if mean is None else mean)
        self.log_std = tape.parameter(np.zeros(dim) if log_std is None else log_std)
        self._params = [self.mean, self.log_std]
        if store is not None:
            for p in self._params:
                store.add(group, p)

    def parameters(self):
        return list(self._params)

    def _mean_std(self, detach_params):
        m, ls = self.mean, self.log_std
        if detach_params:
            m, ls = tape.detach(m), tape.detach(ls)
        return m, tape.exp(ls)

    def sample_reparam(self, z_prev, noise):
        mu, sig = self._mean_std(False)
        z_new = mu + sig * tape.constant(np.asarray(noise, float))
        return z_new, tape.gaussian_logpdf(z_new, mu, sig)

    def log_prob(self, z_new, z_prev, detach_params=False):
        mu, sig = self._mean_std(detach_params)
        return tape.gaussian_logpdf(as_node(z_new), mu, sig)


def _planar_corrected_u(w, u):
    """Invertibility-corrected direction vector.

    The inner product w.u_hat is mapped through a shifted softplus so that
    1 + w.u_hat stays positive for any parameters, and u = 0 keeps the layer
    an exact identity (the shift makes the correction vanish at 0).
    """
    wu = tape.nsum(w * u)
    m = tape.softplus(wu + _SOFTPLUS_INV_1) - 1.0
    wnorm2 = tape.nsum(w * w)
    return u + ((m - wu) / wnorm2) * w


class PlanarFlowStack:
    """Deterministic kernel: a composition of planar layers
    f(z) = z + u_hat * tanh(w.z + b) with accumulated log |det J|."""

    stochastic = False

    def __init__(self, dim=2, layers=32, store=None, group=None, rng=None, init_scale=0.01):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dim = int(dim)
        self.layers = int(layers)
        self._params = []
        self._wub = []
        for _ in range(self.layers):
            w = tape.parameter(rng.standard_normal(dim) * init_scale)
            u = tape.parameter(rng.standard_normal(dim) * init_scale)
            b = tape.parameter(np.zeros(()))
            self._wub.append((w, u, b))
            self._params.extend([w, u, b])
        if store is not None:
            for p in self._params:
                store.add(group, p)

    def parameters(self):
        return list(self._params)

    def forward(self, z):
        """Composed map and summed per-layer log |det J| (one value per row)."""
        z = as_node(z)
        batched = z.value.ndim == 2
        n_rows = z.value.shape[0] if batched else 1
        log_det = tape.constant(np.zeros(n_rows) if batched else np.zeros(()))
        for w, u, b in self._wub:
            u_hat = _planar_corrected_u(w, u)
            a = z @ w + b  # (S,) or scalar
            t = tanh_a = tape.tanh(a)
            if batched:
                z = z + tape.reshape(t, (-1, 1)) * tape.reshape(u_hat, (1, -1))
            else:
                z = z + t * u_hat
            wu_hat = tape.nsum(w * u_hat)
            log_det = log_det + tape.log(1.0 + (1.0 - tanh_a * tanh_a) * wu_hat)
        return z, log_det

    def log_prob(self, z_new, z_prev, detach_params=False):
        raise KernelError("deterministic flow kernels have no conditional density; "
                          "their Jacobian enters the incremental weight instead")
