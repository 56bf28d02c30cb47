"""Per-level divergence objectives and their gradient estimators.

Each estimator op builds a scalar surrogate whose backward pass accumulates
the intended self-normalized gradient into the parameter store, restricted
to the requested parameter groups. Conventions:

- ops accumulate the *descent* gradient (d divergence / d param) into
  ``.grad``; the optimizer subtracts.
- incoming weights are the cumulative weights at the previous level
  (uniform after resampling); outgoing weights multiply in the clamped
  incremental weight.
- all weights are detached; incremental log weights are clamped to
  [-50, 50] before exponentiation inside self-normalized estimators, after
  diagnostics are recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp as _lse

from . import tape
from .sampler import norm_weights

LOG_V_CLAMP = 50.0


class ObjectiveError(ValueError):
    pass


class ExperimentalGateError(RuntimeError):
    pass


@dataclass
class LevelObjective:
    """Which divergence a level minimizes and which groups it updates.

    ``forward_groups`` receive the forward-side gradient (kernel pathwise or
    score part plus the preceding-target covariance part); ``reverse_groups``
    receive the reverse-side gradient (reverse kernel, current target).
    """
    level: int
    divergence: str  # "forward_kl" | "reverse_kl"
    forward_groups: tuple = ()
    reverse_groups: tuple = ()
    stl: bool = False
    baseline: bool = True
    score_only: bool = False
    uniform_incoming: bool = False  # ignore incoming weights (lower-bound style)
    experimental: bool = False

    def __post_init__(self):
        if self.divergence not in ("forward_kl", "reverse_kl"):
            raise ObjectiveError(f"unknown divergence {self.divergence!r}")
        self.forward_groups = tuple(self.forward_groups)
        self.reverse_groups = tuple(self.reverse_groups)

    @property
    def update_groups(self):
        return self.forward_groups + tuple(
            g for g in self.reverse_groups if g not in self.forward_groups)


@dataclass
class GradientEstimate:
    """Per-group gradient contributions plus scalar diagnostics."""
    grads: dict
    loss_estimate: float = 0.0
    baseline_value: float = 0.0


class BaselineState:
    """Exponential moving average of the expected log-incremental weight."""

    def __init__(self, decay=0.99):
        self.decay = float(decay)
        self.value = 0.0
        self._initialized = False

    def update(self, mean_log_v):
        mean_log_v = float(mean_log_v)
        if not self._initialized:
            self.value = mean_log_v
            self._initialized = True
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * mean_log_v
        return self.value


def _clamped(log_v):
    return np.clip(log_v, -LOG_V_CLAMP, LOG_V_CLAMP)


def _weights(record, uniform_incoming=False):
    """(incoming, outgoing) normalized weights for the level's estimators."""
    s = record.log_v.shape[0]
    lw_in = np.zeros(s) if uniform_incoming else record.log_w_in
    w_in = norm_weights(lw_in)
    w_out = norm_weights(lw_in + _clamped(record.log_v))
    return w_in, w_out


def snis_expectation(record, g, target_kind="target", uniform_incoming=False):
    """Self-normalized estimate of E[g(z_k, z_{k-1})].

    ``target_kind`` "proposal" weights by the incoming cumulative weights
    (extended proposal); "target" folds in the incremental weight (extended
    target). With per-step resampling the incoming weights are uniform and
    the target estimator reduces to normalized incremental weights.
    """
    w_in, w_out = _weights(record, uniform_incoming)
    vals = np.asarray(g(record.z_new.value, record.z_prev.value), float)
    if target_kind == "proposal":
        return float(w_in @ vals)
    if target_kind == "target":
        return float(w_out @ vals)
    raise ObjectiveError(f"unknown target_kind {target_kind!r}")


def _masked_backward(loss, store, update_groups, collect):
    """Backward with gradients restricted to the given groups."""
    params = store.all_parameters()
    prior = [p.grad for p in params]
    keep = set()
    for lab in update_groups:
        keep.update(id(p) for p in store.group(lab))
    before = None
    if collect:
        before = {lab: [np.zeros_like(p.value) if p.grad is None else p.grad.copy()
                        for p in store.group(lab)] for lab in update_groups}
    tape.backward(loss)
    for p, g0 in zip(params, prior):
        if id(p) not in keep:
            p.grad = g0
    if not collect:
        return {}
    out = {}
    for lab in update_groups:
        out[lab] = [(np.zeros_like(p.value) if p.grad is None else p.grad) - b
                    for p, b in zip(store.group(lab), before[lab])]
    return out


def _wsum(weights, node_vec):
    """Scalar node: weights (detached array) dot a (S,) node."""
    return tape.nsum(tape.constant(weights) * node_vec)


def _has_params(density):
    return getattr(density, "path", None) is not None and getattr(density.path, "learnable", False)


def grad_rev_kl_wrt_forward(record, fwd_kernel, gamma_prev, gamma_next, rev_kernel,
                            store, update_groups, stl=False, score_only=False,
                            baseline=None, collect=True):
    """Gradient of the reverse KL w.r.t. the forward-side parameters
    (forward kernel, and preceding-target parameters such as the schedule).

    The kernel part is pathwise through the reparameterized sample (the
    score term of q is severed when ``stl`` is set); for non-reparameterized
    kernels ``score_only`` switches to the likelihood-ratio form with the
    baseline applied. The preceding-target part is the covariance of the
    negative log-incremental weight with its score.
    """
    if not update_groups:
        raise ObjectiveError("update_groups is empty")
    w_in, w_out = _weights(record, uniform_incoming=False)
    lv = record.log_v
    b = baseline.value if baseline is not None else 0.0

    if record.log_det is not None:
        # deterministic flow: fully pathwise, no q/r densities
        z_live = record.z_new
        log_v_live = (gamma_next.log_density(z_live, detach_params=True)
                      + record.log_det - tape.constant(record.log_gamma_prev.value))
        loss = -_wsum(w_in, log_v_live)
    elif score_only:
        log_q_fixed = fwd_kernel.log_prob(tape.detach(record.z_new), record.z_prev)
        coeff = -(lv - b)
        loss = _wsum(w_in * coeff, log_q_fixed)
    else:
        log_q = record.log_q_stl if (stl and record.log_q_stl is not None) else record.log_q
        log_v_live = (gamma_next.log_density(record.z_new, detach_params=True)
                      + rev_kernel.log_prob(record.z_prev, record.z_new, detach_params=True)
                      - tape.constant(record.log_gamma_prev.value)
                      - log_q)
        loss = -_wsum(w_in, log_v_live)

    if _has_params(gamma_prev):
        c = float(w_in @ lv)
        loss = loss + _wsum(w_in * (c - lv), record.log_gamma_prev)

    grads = _masked_backward(loss, store, update_groups, collect)
    return GradientEstimate(grads, loss_estimate=float(-(w_in @ lv)), baseline_value=b)


def grad_rev_kl_wrt_reverse(record, store, update_groups, collect=True):
    """Gradient of the reverse KL w.r.t. the reverse-side parameters
    (reverse kernel, current-target parameters)."""
    w_in, w_out = _weights(record, uniform_incoming=False)
    loss = tape.constant(0.0)
    if record.log_r is not None:
        loss = loss - _wsum(w_in, record.log_r)
    loss = loss - _wsum(w_in, record.log_gamma_next) + _wsum(w_out, record.log_gamma_next)
    grads = _masked_backward(loss, store, update_groups, collect)
    return GradientEstimate(grads, loss_estimate=float(-(w_in @ record.log_v)))


def grad_fwd_kl_wrt_forward(record, fwd_kernel, store, update_groups,
                            uniform_incoming=False, collect=True):
    """Gradient of the forward KL w.r.t. the forward-side parameters:
    the wake-sleep-style estimator with outgoing weights for the extended
    target and incoming weights for the normalizer term."""
    if not update_groups:
        raise ObjectiveError("update_groups is empty")
    w_in, w_out = _weights(record, uniform_incoming)
    log_q_fixed = fwd_kernel.log_prob(tape.detach(record.z_new), record.z_prev)
    loss = -_wsum(w_out, log_q_fixed)
    loss = loss - _wsum(w_out, record.log_gamma_prev) + _wsum(w_in, record.log_gamma_prev)
    grads = _masked_backward(loss, store, update_groups, collect)
    return GradientEstimate(grads, loss_estimate=float(w_out @ record.log_v))


def grad_fwd_kl_wrt_reverse(record, store, update_groups, experimental=False,
                            baseline=None, collect=True):
    """Gradient of the forward KL w.r.t. the reverse-side parameters.

    Gated: this estimator is known to be unstable (it lowers the probability
    of high-weight samples), so it refuses to run without the experimental
    flag.
    """
    if not experimental:
        raise ExperimentalGateError(
            "forward-KL updates of reverse-side parameters are unstable; "
            "set experimental=True to use them anyway")
    w_in, w_out = _weights(record, uniform_incoming=False)
    lv = record.log_v
    b = baseline.value if baseline is not None else 0.0
    coeff = lv - b
    c_mean = float(w_out @ coeff)
    loss = tape.constant(0.0)
    if record.log_r is not None:
        loss = loss + _wsum(w_out * coeff, record.log_r)
    loss = loss + _wsum(w_out * coeff, record.log_gamma_next)
    loss = loss - c_mean * _wsum(w_out, record.log_gamma_next)
    grads = _masked_backward(loss, store, update_groups, collect)
    return GradientEstimate(grads, loss_estimate=float(w_out @ lv), baseline_value=b)


_F_TABLE = {
    "reverse_kl": (lambda w: -np.log(w), lambda w: -1.0 / w),
    "forward_kl": (lambda w: w * np.log(w), lambda w: np.log(w) + 1.0),
}


def grad_f_divergence(record, f_kind, fwd_kernel, gamma_prev, gamma_next, rev_kernel,
                      store, update_groups, score_only=False, collect=True):
    """General f-divergence gradient, self-normalized.

    The normalized incremental weight is estimated from the particle system
    itself; with f(w) = -log w this reduces to the reverse-KL ops and with
    f(w) = w log w to the forward-KL ops (up to floating-point association).
    """
    if f_kind not in _F_TABLE:
        raise ObjectiveError(f"unknown f-divergence kind {f_kind!r}")
    f, f_prime = _F_TABLE[f_kind]
    w_in, w_out = _weights(record, uniform_incoming=False)
    lv_c = _clamped(record.log_v)
    # log of self-normalized incremental weight: E_proposal[w_tilde] = 1
    log_wt = lv_c - _lse(np.log(np.maximum(w_in, 1e-300)) + lv_c)
    wt = np.exp(log_wt)
    a = f_prime(wt) * wt
    cpair = f(wt) - a

    loss = tape.constant(0.0)
    if score_only:
        log_q_fixed = fwd_kernel.log_prob(tape.detach(record.z_new), record.z_prev)
        loss = loss + _wsum(w_in * cpair, log_q_fixed)
    elif record.log_det is not None:
        log_v_live = (gamma_next.log_density(record.z_new, detach_params=True)
                      + record.log_det - tape.constant(record.log_gamma_prev.value))
        loss = loss + _wsum(w_in * a, log_v_live)
    else:
        log_v_live = (gamma_next.log_density(record.z_new, detach_params=True)
                      + rev_kernel.log_prob(record.z_prev, record.z_new, detach_params=True)
                      - tape.constant(record.log_gamma_prev.value)
                      - record.log_q)
        loss = loss + _wsum(w_in * a, log_v_live)
    if _has_params(gamma_prev):
        loss = loss + _wsum(w_in * (cpair - float(w_in @ cpair)), record.log_gamma_prev)
    if _has_params(gamma_next):
        loss = (loss + _wsum(w_in * a, record.log_gamma_next)
                - float(w_in @ a) * _wsum(w_out, record.log_gamma_next))
    if record.log_r is not None:
        loss = loss + _wsum(w_in * a, record.log_r)
    grads = _masked_backward(loss, store, update_groups, collect)
    return GradientEstimate(grads, loss_estimate=float(w_in @ f(wt)))


class Adam:
    """Standard Adam over a parameter store (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = {}
        self._v = {}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.store.all_parameters()):
            g = p.grad
            if g is None:
                continue
            m = self._m.get(i)
            v = self._v.get(i)
            if m is None:
                m = np.zeros_like(p.value)
                v = np.zeros_like(p.value)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._m[i], self._v[i] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        return {"m": dict(self._m), "v": dict(self._v), "t": self.t}


def adam_step(params, lr, state, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional Adam update reading each node's accumulated .grad.

    ``state`` is a dict with keys "m", "v", "t"; shapes must match.
    """
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    for i, p in enumerate(params):
        g = np.zeros_like(p.value) if p.grad is None else p.grad
        if g.shape != p.value.shape:
            raise ObjectiveError(f"gradient shape {g.shape} != parameter shape {p.value.shape}")
        m = m_all.get(i, np.zeros_like(p.value))
        v = v_all.get(i, np.zeros_like(p.value))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_all[i], v_all[i] = m, v
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.value = p.value - lr * mhat / (np.sqrt(vhat) + eps)


def nvi_step(model, rng, collect=False):
    """One training iteration: a sampler pass, one local objective per level
    (gradients never flow across levels), then an optimizer step.

    ``model`` bundles the density sequence, kernels, parameter store, level
    objectives, baselines, and optimizer (see experiments.AnnealModel).
    Returns per-level loss estimates plus sampler diagnostics.
    """
    from . import sampler as smp

    model.store.zero_grads()
    any_stl = any(o.stl for o in model.level_objectives)
    result = smp.run_sequence(
        model.seq, model.fwd_kernels, model.rev_kernels, model.num_particles,
        rng, initial_proposal=model.initial_proposal,
        resample=model.resample, stl=any_stl)

    diags = {"level_loss": [], "baseline": []}
    estimates = []
    for t, (rec, obj) in enumerate(zip(result.records, model.level_objectives)):
        baseline = model.baselines[t]
        fwd = model.fwd_kernels[t]
        rev = model.rev_kernels[t] if model.rev_kernels else None
        g_prev, g_next = model.seq[t], model.seq[t + 1]
        if obj.uniform_incoming:
            rec.log_w_in = np.zeros_like(rec.log_w_in)
        if obj.divergence == "reverse_kl":
            est = grad_rev_kl_wrt_forward(
                rec, fwd, g_prev, g_next, rev, model.store,
                obj.forward_groups, stl=obj.stl, score_only=obj.score_only,
                baseline=baseline if obj.baseline else None, collect=collect)
            if obj.reverse_groups:
                grad_rev_kl_wrt_reverse(rec, model.store, obj.reverse_groups,
                                        collect=False)
        else:
            est = grad_fwd_kl_wrt_forward(
                rec, fwd, model.store, obj.forward_groups, collect=collect)
            if obj.reverse_groups:
                grad_fwd_kl_wrt_reverse(
                    rec, model.store, obj.reverse_groups,
                    experimental=obj.experimental,
                    baseline=baseline if obj.baseline else None, collect=False)
        w_in, _ = _weights(rec, obj.uniform_incoming)
        baseline.update(w_in @ rec.log_v)
        diags["level_loss"].append(est.loss_estimate)
        diags["baseline"].append(baseline.value)
        estimates.append(est)

    model.optimizer.step()
    diags["ess"] = smp.ess(result.final)
    diags["log_Z_hat"] = smp.log_Z_hat(result.final)
    diags["mean_log_v"] = [float(np.mean(r.log_v)) for r in result.records]
    diags["var_log_v"] = [float(np.var(r.log_v)) for r in result.records]
    if collect:
        diags["estimates"] = estimates
    return diags
