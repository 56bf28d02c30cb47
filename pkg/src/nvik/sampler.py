"""Properly-weighted nested importance sampling: sequential extension with
incremental weights, systematic resampling, ESS, and the stochastic bound
on the log normalizer.

Cumulative log weights are plain arrays (always detached); everything the
per-level objectives may need to differentiate is kept on the incremental
weight record as live graph nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .tape import Node


class DegenerateSystemError(RuntimeError):
    pass


class SamplerError(ValueError):
    pass


@dataclass
class ParticleSystem:
    z: Node                 # (S, D) detached current-level states
    log_w: np.ndarray       # (S,) cumulative log weights
    level: int = 0
    ancestors: np.ndarray = None  # set by resampling

    @property
    def size(self):
        return self.log_w.shape[0]


@dataclass
class IncrementalWeightRecord:
    """Per-level graph pieces for the objectives.

    ``log_v`` are detached values; node fields stay live with respect to
    kernel, target, and schedule parameters (and, through the reparameterized
    ``z_new``, the forward kernel's sample path). ``log_q_stl`` evaluates the
    forward density with detached parameters, severing the score term.
    """
    level: int
    log_v: np.ndarray
    log_w_in: np.ndarray
    log_w_out: np.ndarray
    z_prev: Node
    z_new: Node
    log_gamma_next: Node
    log_gamma_prev: Node
    log_q: Node = None
    log_q_stl: Node = None
    log_r: Node = None
    log_det: Node = None

    def log_v_node(self, stl=False):
        """Assembled live incremental log weight."""
        fwd = self.log_q_stl if (stl and self.log_q_stl is not None) else self.log_q
        if self.log_det is not None:  # deterministic flow kernel
            return self.log_gamma_next + self.log_det - self.log_gamma_prev
        return (self.log_gamma_next + self.log_r) - (self.log_gamma_prev + fwd)

    def norm_weights_in(self):
        return norm_weights(self.log_w_in)

    def norm_weights_out(self):
        return norm_weights(self.log_w_out)


def norm_weights(log_w):
    m = log_w.max()
    w = np.exp(log_w - m)
    return w / w.sum()


def init(num_particles, initial_proposal, gamma_1, rng):
    """Draw from the initial proposal and weight against the first density."""
    if num_particles < 1:
        raise SamplerError("need at least one particle")
    z = initial_proposal.sample(num_particles, rng)
    zn = tape.constant(z)
    log_w = gamma_1.log_density(zn).value - initial_proposal.log_density(zn).value
    return ParticleSystem(z=zn, log_w=log_w, level=1)


def extend(ps, fwd_kernel, rev_kernel, gamma_prev, gamma_next, noise=None,
           rng=None, level=None, stl=False):
    """One nested-importance-sampling extension.

    For a stochastic forward kernel the incremental weight is
    ``gamma_k(z_k) r(z_{k-1}|z_k) / (gamma_{k-1}(z_{k-1}) q(z_k|z_{k-1}))``;
    a deterministic flow replaces the r/q pair with its log |det J|.
    """
    if level is not None and ps.level != level - 1:
        raise SamplerError(f"level mismatch: system at {ps.level}, expected {level - 1}")
    z_prev = tape.detach(ps.z)
    s = ps.size

    if getattr(fwd_kernel, "stochastic", True):
        if rev_kernel is None:
            raise SamplerError("stochastic forward kernel requires a reverse kernel")
        if noise is None:
            noise = rng.standard_normal(z_prev.value.shape)
        z_new, log_q = fwd_kernel.sample_reparam(z_prev, noise)
        log_q_stl = fwd_kernel.log_prob(z_new, z_prev, detach_params=True) if stl else None
        log_r = rev_kernel.log_prob(z_prev, z_new)
        log_gamma_next = gamma_next.log_density(z_new)
        log_gamma_prev = gamma_prev.log_density(z_prev)
        log_v = (log_gamma_next.value + log_r.value
                 - log_gamma_prev.value - log_q.value)
        rec = IncrementalWeightRecord(
            level=ps.level + 1, log_v=log_v, log_w_in=ps.log_w.copy(),
            log_w_out=ps.log_w + log_v, z_prev=z_prev, z_new=z_new,
            log_gamma_next=log_gamma_next, log_gamma_prev=log_gamma_prev,
            log_q=log_q, log_q_stl=log_q_stl, log_r=log_r)
    else:
        z_new, log_det = fwd_kernel.forward(z_prev)
        log_gamma_next = gamma_next.log_density(z_new)
        log_gamma_prev = gamma_prev.log_density(z_prev)
        log_v = log_gamma_next.value + log_det.value - log_gamma_prev.value
        rec = IncrementalWeightRecord(
            level=ps.level + 1, log_v=log_v, log_w_in=ps.log_w.copy(),
            log_w_out=ps.log_w + log_v, z_prev=z_prev, z_new=z_new,
            log_gamma_next=log_gamma_next, log_gamma_prev=log_gamma_prev,
            log_det=log_det)

    new_ps = ParticleSystem(z=tape.detach(z_new), log_w=ps.log_w + log_v,
                            level=ps.level + 1)
    return new_ps, rec


def systematic_ancestors(log_w, rng):
    """Ancestor indices from one uniform draw; equal weights map to identity
    offspring counts."""
    w = norm_weights(log_w)
    s = w.shape[0]
    u = rng.uniform()
    positions = (u + np.arange(s)) / s
    return np.searchsorted(np.cumsum(w), positions).clip(max=s - 1)


def resample_systematic(ps, rng):
    """Systematic resampling; new weights all equal the incoming log-mean so
    the running normalizer estimate is preserved."""
    if not np.any(np.isfinite(ps.log_w)):
        raise DegenerateSystemError("degenerate particle system: all weights -inf")
    idx = systematic_ancestors(ps.log_w, rng)
    log_mean = log_Z_hat(ps)
    z = tape.constant(ps.z.value[idx])
    return ParticleSystem(z=z, log_w=np.full(ps.size, log_mean),
                          level=ps.level, ancestors=idx)


def ess(ps_or_log_w):
    """(sum w)^2 / sum w^2 computed in log space."""
    log_w = ps_or_log_w.log_w if isinstance(ps_or_log_w, ParticleSystem) else ps_or_log_w
    from scipy.special import logsumexp as lse
    return float(np.exp(2.0 * lse(log_w) - lse(2.0 * log_w)))


def log_Z_hat(ps_or_log_w):
    """Stochastic lower bound: log of the average unnormalized weight."""
    log_w = ps_or_log_w.log_w if isinstance(ps_or_log_w, ParticleSystem) else ps_or_log_w
    from scipy.special import logsumexp as lse
    return float(lse(log_w) - np.log(log_w.shape[0]))


@dataclass
class SequenceResult:
    final: ParticleSystem
    records: list
    pre_resample: list  # systems as they stood before each resampling
    resampled: list     # ancestor index arrays (or None) per transition


def run_sequence(seq, fwd_kernels, rev_kernels, num_particles, rng,
                 initial_proposal=None, resample=False, stl=False,
                 resample_final=False):
    """init -> [extend -> optional resample]^(K-1).

    ``seq`` is a DensitySequence; kernel lists have K-1 entries (reverse
    entries may be None for flows). By default the system is never resampled
    after the last extension, so final weights stay informative.
    """
    K = len(seq)
    if len(fwd_kernels) != K - 1:
        raise SamplerError(f"need {K - 1} forward kernels, got {len(fwd_kernels)}")
    proposal = initial_proposal if initial_proposal is not None else seq[0]
    ps = init(num_particles, proposal, seq[0], rng)
    records, pre_resample, resampled = [], [], []
    for k in range(1, K):
        ps, rec = extend(ps, fwd_kernels[k - 1],
                         rev_kernels[k - 1] if rev_kernels else None,
                         seq[k - 1], seq[k], rng=rng, stl=stl)
        records.append(rec)
        pre_resample.append(ps)
        do_resample = resample and (k < K - 1 or resample_final)
        if do_resample:
            ps = resample_systematic(ps, rng)
            resampled.append(ps.ancestors)
        else:
            resampled.append(None)
    return SequenceResult(final=ps, records=records,
                          pre_resample=pre_resample, resampled=resampled)
