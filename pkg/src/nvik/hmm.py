"""Gaussian-emission HMM experiment: learn heuristic factors that look
ahead at future observations, plus neural proposals for the global emission
parameters and the latent path, trained with partial-optimization forward-KL
gradients level by level.

The nested density sequence over (eta, z_{1:k}) is

    gamma_0 = p(eta) psi(x_{1:K} | eta)
    gamma_k = p(x_{1:k}, z_{1:k}, eta) psi(x_{k+1:K} | eta)
    gamma_K = full joint,

with psi a product over remaining observations of a per-point mixture
density. The psi factors telescope out of the product of incremental
weights, so every variant estimates the same log p(x_{1:K}).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln as sp_gammaln, logsumexp as sp_lse

from . import tape
from .objectives import Adam, ExperimentalGateError, _clamped
from .sampler import norm_weights, systematic_ancestors
from .tape import ParameterStore

LOG_2PI = float(np.log(2.0 * np.pi))

HEURISTIC_VARIANTS = ("none", "gmm", "neural")


class HmmError(ValueError):
    pass


@dataclass
class HmmSpec:
    """Model constants: M clusters, K steps, NormalGamma prior on the
    per-cluster emission mean/precision, sticky uniform transitions."""
    M: int = 4
    K: int = 20
    alpha0: float = 8.0
    beta0: float = 8.0
    mu0: float = 0.0
    nu0: float = 0.001
    stay: float = 0.9

    def __post_init__(self):
        if min(self.alpha0, self.beta0, self.nu0) <= 0:
            raise HmmError("alpha0, beta0, nu0 must be positive")
        if self.M < 2 or self.K < 1:
            raise HmmError("need M >= 2 clusters and K >= 1 steps")

    @property
    def pi(self):
        return np.full(self.M, 1.0 / self.M)

    @property
    def A(self):
        off = (1.0 - self.stay) / (self.M - 1)
        A = np.full((self.M, self.M), off)
        np.fill_diagonal(A, self.stay)
        return A


@dataclass
class HmmInstance:
    x: np.ndarray       # (K,) observations
    z: np.ndarray       # (K,) ground-truth states
    mu: np.ndarray      # (M,) ground-truth means
    tau: np.ndarray     # (M,) ground-truth precisions


def sample_eta_prior(spec, rng, size=()):
    """NormalGamma draw: tau ~ Gamma(a0, b0), mu | tau ~ N(mu0, 1/(nu0 tau))."""
    shape = tuple(np.atleast_1d(size)) if size != () else ()
    tau = rng.gamma(spec.alpha0, 1.0 / spec.beta0, shape + (spec.M,))
    mu = spec.mu0 + rng.standard_normal(shape + (spec.M,)) / np.sqrt(spec.nu0 * tau)
    return mu, tau


def log_prior_eta(spec, mu, tau):
    """Summed NormalGamma log density, vectorized over leading axes."""
    a, b, n0, m0 = spec.alpha0, spec.beta0, spec.nu0, spec.mu0
    lg = a * np.log(b) - sp_gammaln(a) + (a - 1.0) * np.log(tau) - b * tau
    ln = 0.5 * (np.log(n0 * tau) - LOG_2PI) - 0.5 * n0 * tau * (mu - m0) ** 2
    return (lg + ln).sum(axis=-1)


def emission_logpdf(x, mu, tau):
    """log N(x; mu, 1/tau), broadcasting."""
    return 0.5 * (np.log(tau) - LOG_2PI) - 0.5 * tau * (x - mu) ** 2


def simulate(spec, rng, n_instances):
    out = []
    for _ in range(n_instances):
        mu, tau = sample_eta_prior(spec, rng)
        z = np.empty(spec.K, dtype=np.intp)
        z[0] = rng.choice(spec.M, p=spec.pi)
        A = spec.A
        for k in range(1, spec.K):
            z[k] = rng.choice(spec.M, p=A[z[k - 1]])
        x = mu[z] + rng.standard_normal(spec.K) / np.sqrt(tau[z])
        out.append(HmmInstance(x=x, z=z, mu=mu, tau=tau))
    return out


def forward_loglik(spec, x, mu, tau):
    """log p(x_{1:K} | eta) by the forward algorithm."""
    le = emission_logpdf(x[:, None], mu[None, :], tau[None, :])  # (K, M)
    logA = np.log(spec.A)
    a = np.log(spec.pi) + le[0]
    for k in range(1, len(x)):
        a = sp_lse(a[:, None] + logA, axis=0) + le[k]
    return float(sp_lse(a))


def backward_messages(spec, x, mu, tau):
    """(K, M) array b[k, m] = log p(x_{k+2:K} ... actually of the suffix
    after step k+1: b[k, m] = log p(x_{k+1:K} | z_k = m); last row is 0."""
    K = len(x)
    le = emission_logpdf(x[:, None], mu[None, :], tau[None, :])
    logA = np.log(spec.A)
    b = np.zeros((K, spec.M))
    for k in range(K - 2, -1, -1):
        b[k] = sp_lse(logA + (le[k + 1] + b[k + 1])[None, :], axis=1)
    return b


class ExactZProposal:
    """Smoothing-optimal tabular proposal p(z_k | z_{k-1}, x_{k:K}, eta)
    at a fixed eta, from backward messages. With no heuristic these
    proposals make the product of incremental weights exactly
    p(x_{1:K} | eta) for every particle."""

    def __init__(self, spec, x, mu, tau):
        self.spec = spec
        self.le = emission_logpdf(x[:, None], mu[None, :], tau[None, :])
        self.b = backward_messages(spec, x, mu, tau)

    def log_prob_table(self, k, z_prev=None):
        """(S, M) log proposal probabilities; k is 1-based."""
        i = k - 1
        base = self.le[i] + self.b[i]
        if z_prev is None:
            logits = np.log(self.spec.pi)[None, :] + base[None, :]
        else:
            logits = np.log(self.spec.A)[np.asarray(z_prev, dtype=np.intp)] + base[None, :]
        return logits - sp_lse(logits, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# heuristic factors


class NoneHeuristic:
    variant = "none"
    has_params = False

    def log_phi(self, x, mu_vals, tau_vals):
        return tape.constant(np.zeros((mu_vals.shape[0], len(x))))


class GmmHeuristic:
    """Hand-coded per-point mixture with uniform cluster weights."""
    variant = "gmm"
    has_params = False

    def log_phi(self, x, mu_vals, tau_vals):
        le = emission_logpdf(x[None, :, None], mu_vals[:, None, :],
                             tau_vals[:, None, :])  # (S, K, M)
        return tape.constant(sp_lse(le - np.log(mu_vals.shape[1]), axis=2))


class NeuralHeuristic:
    """Per-point mixture whose cluster weights come from an MLP on each
    observation (shared across particles): hidden tanh layer, softmax head."""
    variant = "neural"
    has_params = True

    def __init__(self, spec, store, rng, hidden=64):
        M = spec.M

        def init(shape, fan_in):
            return rng.standard_normal(shape) / np.sqrt(fan_in)

        self.w1 = tape.parameter(init((1, hidden), 1))
        self.b1 = tape.parameter(np.zeros(hidden))
        self.w2 = tape.parameter(init((hidden, M), hidden))
        self.b2 = tape.parameter(np.zeros(M))
        for p in (self.w1, self.b1, self.w2, self.b2):
            store.add("heuristic", p)

    def log_weights(self, x):
        h = tape.tanh(tape.constant(0.1 * x[:, None]) @ self.w1 + self.b1)
        logits = h @ self.w2 + self.b2  # (K, M)
        return logits - tape.reshape(tape.logsumexp(logits, axis=1), (-1, 1))

    def log_phi(self, x, mu_vals, tau_vals):
        le = emission_logpdf(x[None, :, None], mu_vals[:, None, :],
                             tau_vals[:, None, :])  # (S, K, M)
        lw = tape.reshape(self.log_weights(x), (1, len(x), -1))
        return tape.logsumexp(tape.constant(le) + lw, axis=2)


def make_heuristic(variant, spec=None, store=None, rng=None):
    if variant == "none":
        return NoneHeuristic()
    if variant == "gmm":
        return GmmHeuristic()
    if variant == "neural":
        return NeuralHeuristic(spec, store, rng)
    raise HmmError(f"unknown heuristic variant {variant!r}; "
                   f"choose from {HEURISTIC_VARIANTS}")


def log_psi_suffix(heuristic, x, mu_vals, tau_vals):
    """(S, K+1) node whose column j is log psi(x_{j+1:K} | eta); the last
    column is 0 (the final density carries no heuristic)."""
    lp = heuristic.log_phi(x, mu_vals, tau_vals)  # (S, K)
    suff = tape.cumsum(lp, axis=1, reverse=True)
    zeros = tape.constant(np.zeros((mu_vals.shape[0], 1)))
    return tape.concat([suff, zeros], axis=1)


# ---------------------------------------------------------------------------
# proposals


class EtaProposal:
    """q(eta | x_{1:K}): per-cluster NormalGamma with parameters read off
    neural sufficient statistics. A per-point network soft-assigns each
    observation to clusters; per-cluster statistics (sum of weights, of
    weighted x, of weighted x^2) feed four linear heads, exponentiated
    where positivity is required."""

    def __init__(self, spec, store, rng, hidden=128):
        M = spec.M
        self.M = M

        def init(shape, fan_in):
            return rng.standard_normal(shape) / np.sqrt(fan_in)

        self.spec = spec
        self.w1 = tape.parameter(init((1, hidden), 1))
        self.b1 = tape.parameter(np.zeros(hidden))
        self.w2 = tape.parameter(init((hidden, M), hidden))
        self.b2 = tape.parameter(np.zeros(M))
        # heads correct the conjugate update computed from the soft
        # statistics; zero init keeps the start at the conjugate values,
        # positivity comes from the exponentiated multiplicative form
        self.heads = {}
        for name in ("alpha", "beta", "mu", "nu"):
            w = tape.parameter(np.zeros((3, 1)))
            b = tape.parameter(np.zeros(1))
            self.heads[name] = (w, b)
        self._params = [self.w1, self.b1, self.w2, self.b2]
        for w, b in self.heads.values():
            self._params.extend([w, b])
        for p in self._params:
            store.add("eta_proposal", p)

    def params_of(self, x):
        """Four (M,) parameter nodes from the observations.

        Per-cluster soft statistics (sum of assignment weights, of weighted
        x, of weighted x^2) drive a conjugate NormalGamma update; the heads
        multiply each parameter by an exponentiated linear correction
        (additive for the mean).
        """
        spec = self.spec
        xc = tape.constant(x[:, None])
        h = tape.tanh((xc * 0.1) @ self.w1 + self.b1)
        t = tape.softmax(h @ self.w2 + self.b2, axis=1)  # (K, M)
        s0 = tape.nsum(t, axis=0)
        s1 = tape.nsum(t * xc, axis=0)
        s2 = tape.nsum(t * (xc * xc), axis=0)
        n = s0 + 1e-6
        xbar = s1 / n
        ss = s2 - (s1 * s1) / n  # soft within-cluster sum of squares, >= 0
        nu_c = spec.nu0 + s0
        mu_c = (spec.nu0 * spec.mu0 + s1) / nu_c
        al_c = spec.alpha0 + 0.5 * s0
        dev = xbar - spec.mu0
        be_c = (spec.beta0 + 0.5 * ss
                + 0.5 * (spec.nu0 * s0 / nu_c) * (dev * dev))
        f = tape.concat([tape.reshape(s0 * (1.0 / len(x)), (-1, 1)),
                         tape.reshape(xbar * 0.1, (-1, 1)),
                         tape.reshape(ss * (1.0 / len(x)) * 0.01, (-1, 1))],
                        axis=1)  # (M, 3) bounded-scale features

        def head(name):
            w, b = self.heads[name]
            return tape.reshape(f @ w + b, (-1,))

        alpha = al_c * tape.exp(head("alpha"))
        beta = be_c * tape.exp(head("beta"))
        mu = mu_c + head("mu")
        nu = nu_c * tape.exp(head("nu"))
        return alpha, beta, mu, nu

    def sample(self, x, S, rng):
        """(S, M) mu and tau values drawn from the current parameters."""
        a, b, m, n = (p.value for p in self.params_of(x))
        tau = rng.gamma(a, 1.0 / b, (S, len(a)))
        mu = m + rng.standard_normal((S, len(a))) / np.sqrt(n * tau)
        return mu, tau

    def log_prob(self, x, mu_vals, tau_vals):
        """(S,) node, live in the network parameters (score gradient)."""
        a, b, m, n = self.params_of(x)
        lt = tape.constant(np.log(tau_vals))
        t = tape.constant(tau_vals)
        lg = a * tape.log(b) - tape.gammaln(a) + (a - 1.0) * lt - b * t
        d = tape.constant(mu_vals) - m
        ln = 0.5 * (tape.log(n) + lt - LOG_2PI) - 0.5 * n * t * (d * d)
        return tape.nsum(lg + ln, axis=1)


class ZProposal:
    """Categorical proposals q(z_1 | x_1, eta) and q(z_k | x_k, z_{k-1}, eta)
    as small tanh MLPs over [x_k, mu, tau, onehot(z_{k-1})]."""

    def __init__(self, spec, store, rng, hidden=32):
        M = spec.M
        self.M = M

        def init(shape, fan_in):
            return rng.standard_normal(shape) / np.sqrt(fan_in)

        def net(in_dim):
            w1 = tape.parameter(init((in_dim, hidden), in_dim))
            b1 = tape.parameter(np.zeros(hidden))
            w2 = tape.parameter(init((hidden, M), hidden))
            b2 = tape.parameter(np.zeros(M))
            return (w1, b1, w2, b2)

        self.init_net = net(1 + 2 * M)
        self.trans_net = net(1 + 3 * M)
        for p in self.init_net + self.trans_net:
            store.add("z_proposal", p)

    def log_probs(self, x_k, mu_vals, tau_vals, z_prev=None):
        """(S, M) log proposal probabilities (live node)."""
        S, M = mu_vals.shape
        feats = [np.full((S, 1), 0.1 * x_k), 0.1 * mu_vals, tau_vals]
        if z_prev is None:
            w1, b1, w2, b2 = self.init_net
        else:
            onehot = np.zeros((S, M))
            onehot[np.arange(S), z_prev] = 1.0
            feats.append(onehot)
            w1, b1, w2, b2 = self.trans_net
        f = tape.constant(np.concatenate(feats, axis=1))
        h = tape.tanh(f @ w1 + b1)
        logits = h @ w2 + b2
        return logits - tape.reshape(tape.logsumexp(logits, axis=1), (-1, 1))


# ---------------------------------------------------------------------------
# nested sampler over the heuristic-augmented sequence


@dataclass
class HmmLevelRecord:
    level: int
    log_v: np.ndarray
    log_w_in: np.ndarray
    log_q_node: object      # live: q(eta|x) at level 0, q(z_k|.) at k >= 1
    row_idx: np.ndarray     # current-particle -> original eta row
    psi_col: int            # column of the suffix matrix for the theta terms


@dataclass
class HmmRunResult:
    log_w: np.ndarray
    records: list
    psi_suffix: object
    mu: np.ndarray
    tau: np.ndarray
    z: np.ndarray

    @property
    def ess(self):
        w = norm_weights(self.log_w)
        return float(1.0 / np.sum(w * w))

    @property
    def log_Z_hat(self):
        return float(sp_lse(self.log_w) - np.log(self.log_w.shape[0]))


def run_nested(model, x, S, rng, resample=True, fixed_eta=None,
               z_proposal_override=None):
    """Sequential pass over gamma_0 .. gamma_K for one instance.

    ``fixed_eta`` (mu, tau) conditions on known emission parameters (the
    level-0 extension is skipped); ``z_proposal_override`` substitutes a
    tabular proposal with a ``log_prob_table(k, z_prev)`` method.
    """
    spec = model.spec
    K, M = spec.K, spec.M
    records = []

    if fixed_eta is not None:
        mu1, tau1 = fixed_eta
        mu = np.broadcast_to(np.asarray(mu1, float), (S, M)).copy()
        tau = np.broadcast_to(np.asarray(tau1, float), (S, M)).copy()
        log_w = np.zeros(S)
    else:
        mu, tau = model.eta_proposal.sample(x, S, rng)
        log_q_eta = model.eta_proposal.log_prob(x, mu, tau)
        psi0 = None  # filled below once the suffix matrix exists
    psi_suffix = log_psi_suffix(model.heuristic, x, mu, tau)
    psi_vals = psi_suffix.value

    if fixed_eta is None:
        log_gamma0 = log_prior_eta(spec, mu, tau) + psi_vals[:, 0]
        log_v0 = log_gamma0 - log_q_eta.value
        records.append(HmmLevelRecord(level=0, log_v=log_v0,
                                      log_w_in=np.zeros(S),
                                      log_q_node=log_q_eta,
                                      row_idx=np.arange(S), psi_col=0))
        log_w = log_v0.copy()

    log_emit_all = emission_logpdf(x[None, :, None], mu[:, None, :],
                                   tau[:, None, :])  # (S, K, M)
    logA = np.log(spec.A)
    log_pi = np.log(spec.pi)
    row_idx = np.arange(S)
    z_prev = None
    z_path = np.empty((S, K), dtype=np.intp)

    for k in range(1, K + 1):
        if z_proposal_override is not None:
            table = z_proposal_override.log_prob_table(k, z_prev)
            if table.shape[0] == 1:
                table = np.broadcast_to(table, (S, M))
            log_probs = tape.constant(np.array(table))
        else:
            log_probs = model.z_proposal.log_probs(
                x[k - 1], mu[row_idx], tau[row_idx], z_prev)
        probs = np.exp(log_probs.value)
        u = rng.uniform(size=S)
        z_k = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1).clip(max=M - 1)
        onehot = np.zeros((S, M))
        onehot[np.arange(S), z_k] = 1.0
        log_q_zk = tape.nsum(log_probs * tape.constant(onehot), axis=1)

        log_trans = log_pi[z_k] if z_prev is None else logA[z_prev, z_k]
        log_emit = log_emit_all[row_idx, k - 1, z_k]
        log_v = (log_emit + log_trans
                 + psi_vals[row_idx, k] - psi_vals[row_idx, k - 1]
                 - log_q_zk.value)
        records.append(HmmLevelRecord(level=k, log_v=log_v,
                                      log_w_in=log_w.copy(),
                                      log_q_node=log_q_zk,
                                      row_idx=row_idx.copy(), psi_col=k - 1))
        log_w = log_w + log_v
        z_path[:, k - 1] = z_k
        z_prev = z_k
        if resample and k < K:
            anc = systematic_ancestors(log_w, rng)
            log_w = np.full(S, float(sp_lse(log_w) - np.log(S)))
            row_idx = row_idx[anc]
            z_prev = z_k[anc]
            z_path = z_path[anc]

    return HmmRunResult(log_w=log_w, records=records, psi_suffix=psi_suffix,
                        mu=mu, tau=tau, z=z_path)


def log_gamma_k(model, x, z_prefix, mu, tau, k):
    """Reference scalar log gamma_k for a single particle (test oracle)."""
    spec = model.spec
    if not 0 <= k <= spec.K:
        raise HmmError(f"level {k} out of range 0..{spec.K}")
    mu2, tau2 = np.atleast_2d(mu), np.atleast_2d(tau)
    psi = log_psi_suffix(model.heuristic, x, mu2, tau2).value[0, k]
    lp = log_prior_eta(spec, mu2, tau2)[0]
    for j in range(k):
        z_j = z_prefix[j]
        lp += (np.log(spec.pi[z_j]) if j == 0 else np.log(spec.A[z_prefix[j - 1], z_j]))
        lp += emission_logpdf(x[j], mu2[0, z_j], tau2[0, z_j])
    return float(lp + psi)


# ---------------------------------------------------------------------------
# model bundle, training, evaluation


class HmmModel:
    def __init__(self, spec, variant, seed=0, lr=1e-3):
        if variant not in HEURISTIC_VARIANTS:
            raise HmmError(f"unknown heuristic variant {variant!r}")
        self.spec = spec
        self.variant = variant
        self.store = ParameterStore()
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence([int(seed), 99])))
        self.eta_proposal = EtaProposal(spec, self.store, rng)
        self.z_proposal = ZProposal(spec, self.store, rng)
        self.heuristic = make_heuristic(variant, spec, self.store, rng)
        self.optimizer = Adam(self.store, lr=lr)


def partial_grad_step(model, instances, rng, S=36, full_optimization=False,
                      experimental=False):
    """One forward-KL training step over a minibatch of instances.

    Partial optimization differentiates only the extended-proposal side of
    each level's forward KL: the level-0 score on q(eta|x); at level k the
    pi_k-weighted scores of log q(z_k|.) and log psi(x_{k:K}|eta) minus the
    pi_{k-1}-weighted log psi term. Full optimization (additionally
    differentiating the sampling side) is gated behind ``experimental``.
    """
    if full_optimization and not experimental:
        raise ExperimentalGateError(
            "full optimization of the forward KL is known to perform poorly; "
            "set experimental=True to enable it")
    model.store.zero_grads()
    loss = tape.constant(0.0)
    diags = {"level_loss": np.zeros(model.spec.K + 1), "ess": [], "log_Z_hat": []}
    for inst in instances:
        res = run_nested(model, inst.x, S, rng, resample=True)
        for rec in res.records:
            w_in = norm_weights(rec.log_w_in)
            lv_c = _clamped(rec.log_v)
            w_out = norm_weights(rec.log_w_in + lv_c)
            loss = loss - tape.nsum(tape.constant(w_out) * rec.log_q_node)
            if rec.level >= 1 and model.heuristic.has_params:
                col = tape.take(res.psi_suffix, rec.psi_col, axis=1)
                psi = tape.take_rows(col, rec.row_idx)
                loss = loss - tape.nsum(tape.constant(w_out) * psi)
                loss = loss + tape.nsum(tape.constant(w_in) * psi)
                if full_optimization:
                    # score correction for the theta-dependence of the
                    # sampling-side density (total-derivative estimator)
                    col_k = tape.take_rows(
                        tape.take(res.psi_suffix, rec.psi_col + 1, axis=1),
                        rec.row_idx)
                    c = lv_c - float(w_out @ lv_c)
                    loss = loss + tape.nsum(tape.constant(w_out * c) * col_k)
            diags["level_loss"][rec.level] += float(-(w_out @ rec.log_v))
        diags["ess"].append(res.ess)
        diags["log_Z_hat"].append(res.log_Z_hat)
    tape.backward(loss * (1.0 / len(instances)))
    model.optimizer.step()
    diags["level_loss"] /= len(instances)
    diags["ess"] = float(np.mean(diags["ess"]))
    diags["log_Z_hat"] = float(np.mean(diags["log_Z_hat"]))
    return diags


def train_hmm(model, instances, iterations, seed, S=36, batch_size=1,
              progress_every=0):
    rows = []
    n = len(instances)
    order_rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence([int(seed), 7])))
    for it in range(iterations):
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence([int(seed), 8, it])))
        batch = [instances[order_rng.integers(n)] for _ in range(batch_size)]
        d = partial_grad_step(model, batch, rng, S=S)
        rows.append((it, float(d["level_loss"].sum()), d["ess"], d["log_Z_hat"]))
        if progress_every and (it + 1) % progress_every == 0:
            print(f"hmm iter {it + 1}/{iterations} ess={d['ess']:.1f} "
                  f"logZ={d['log_Z_hat']:.2f}", flush=True)
    return rows


def evaluate(model, instances, S=1000, seed=0):
    """Per-instance log-normalizer estimate and final-weight ESS, with
    intermediate resampling. Returns (instance_id, variant, log_Z_hat, ess)."""
    rows = []
    for i, inst in enumerate(instances):
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence([int(seed), 9, i])))
        res = run_nested(model, inst.x, S, rng, resample=True)
        rows.append((i, model.variant, res.log_Z_hat, res.ess))
    return rows
