"""Annealing-experiment assembly: method presets, model construction,
training and evaluation loops, and checkpoint I/O.

Methods (all minimize the reverse KL per level):

==============  ========  ========  =======  ================
name            schedule  resample  kernels  incoming weights
==============  ========  ========  =======  ================
svi (K=2)       linear    no        mlp      importance
avo             linear    no        mlp      uniform
nvi             linear    no        mlp      importance
nvir            linear    yes       mlp      importance
nvi_star        learned   no        mlp      importance
nvir_star       learned   yes       mlp      importance
avo_flow        linear    no        flow     uniform
nvi_star_flow   learned   no        flow     importance
==============  ========  ========  =======  ================
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import objectives, sampler, targets, tape
from .kernels import GaussianMlpKernel, InitialProposal, PlanarFlowStack
from .objectives import Adam, BaselineState, LevelObjective
from .tape import ParameterStore


class ConfigError(ValueError):
    pass


class NanLossError(RuntimeError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


METHOD_PRESETS = {
    "svi": dict(schedule="linear", resample=False, flows=False, uniform=False, default_K=2),
    "avo": dict(schedule="linear", resample=False, flows=False, uniform=True),
    "nvi": dict(schedule="linear", resample=False, flows=False, uniform=False),
    "nvir": dict(schedule="linear", resample=True, flows=False, uniform=False),
    "nvi_star": dict(schedule="learned", resample=False, flows=False, uniform=False),
    "nvir_star": dict(schedule="learned", resample=True, flows=False, uniform=False),
    "avo_flow": dict(schedule="linear", resample=False, flows=True, uniform=True),
    "nvi_star_flow": dict(schedule="learned", resample=False, flows=True, uniform=False),
}

PAPER_BUDGET = 288


@dataclass
class AnnealModel:
    config: dict
    store: ParameterStore
    target: targets.RingGmmTarget
    initial_proposal: InitialProposal
    path: targets.AnnealingPath
    seq: targets.DensitySequence
    fwd_kernels: list
    rev_kernels: list
    level_objectives: list
    baselines: list
    optimizer: Adam
    num_particles: int
    resample: bool

    @property
    def num_levels(self):
        return len(self.seq)


def _rng(seed, *stream):
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence([int(seed)] + [int(s) for s in stream])))


def resolve_anneal_config(cfg):
    """Fill defaults and validate; returns a new dict."""
    cfg = dict(cfg)
    method = cfg.setdefault("method", "nvir_star")
    if method not in METHOD_PRESETS:
        raise ConfigError(f"unknown method {method!r}; choose from "
                          f"{sorted(METHOD_PRESETS)}")
    preset = METHOD_PRESETS[method]
    cfg.setdefault("experiment", "anneal")
    K = int(cfg.setdefault("K", preset.get("default_K", 8)))
    if K < 2:
        raise ConfigError(f"K must be >= 2, got {K}")
    if method == "svi" and K != 2:
        raise ConfigError("svi is the single-level baseline; it requires K=2")
    paper_budget = _as_bool(cfg.setdefault("paper_budget", "S" not in cfg))
    cfg["paper_budget"] = paper_budget
    if paper_budget:
        if PAPER_BUDGET % K != 0:
            raise ConfigError(f"paper budget {PAPER_BUDGET} not divisible by K={K}")
        S = int(cfg.setdefault("S", PAPER_BUDGET // K))
        if K * S != PAPER_BUDGET:
            raise ConfigError(f"paper_budget requires K*S={PAPER_BUDGET}, got {K * S}")
    else:
        S = int(cfg.setdefault("S", 36))
    if S < 1:
        raise ConfigError(f"S must be positive, got {S}")
    cfg["K"], cfg["S"] = K, S
    cfg.setdefault("iterations", 20000)
    cfg.setdefault("lr", 1e-3)
    cfg.setdefault("seed", 0)
    cfg.setdefault("hidden", 50)
    cfg.setdefault("flow_layers", 32)
    cfg.setdefault("stl", True)
    cfg.setdefault("eval_batches", 100)
    cfg.setdefault("eval_batch_size", 100)
    cfg.setdefault("schedule", preset["schedule"])
    cfg.setdefault("resample", preset["resample"])
    cfg["resample"] = _as_bool(cfg["resample"])
    cfg["stl"] = _as_bool(cfg["stl"])
    for key in ("iterations", "eval_batches", "eval_batch_size", "seed",
                "hidden", "flow_layers"):
        cfg[key] = int(cfg[key])
    cfg["lr"] = float(cfg["lr"])
    if preset["flows"] and cfg.get("schedule") == "learned" and method == "avo_flow":
        raise ConfigError("avo_flow uses a fixed linear schedule")
    return cfg


def _as_bool(v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {v!r}")
    return bool(v)


def build_anneal_model(cfg, seed=None):
    """Construct target, schedule, kernels, and per-level objectives."""
    cfg = resolve_anneal_config(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    method = cfg["method"]
    preset = METHOD_PRESETS[method]
    K, S = cfg["K"], cfg["S"]
    init_rng = _rng(cfg["seed"], 0)

    store = ParameterStore()
    target = targets.RingGmmTarget()
    proposal = InitialProposal(dim=2, std=5.0)
    learned = cfg["schedule"] == "learned"
    path = targets.AnnealingPath(K, learnable=learned, store=store)
    seq = targets.geometric_sequence(proposal, target, path)

    fwd_kernels, rev_kernels = [], []
    for t in range(K - 1):
        if preset["flows"]:
            fwd_kernels.append(PlanarFlowStack(
                dim=2, layers=cfg["flow_layers"], store=store,
                group=f"forward_kernel:{t}", rng=init_rng))
            rev_kernels.append(None)
        else:
            fwd_kernels.append(GaussianMlpKernel(
                dim=2, hidden=cfg["hidden"], store=store,
                group=f"forward_kernel:{t}", rng=init_rng))
            rev_kernels.append(GaussianMlpKernel(
                dim=2, hidden=cfg["hidden"], store=store,
                group=f"reverse_kernel:{t}", rng=init_rng))

    level_objectives, baselines = [], []
    for t in range(K - 1):
        fwd = (f"forward_kernel:{t}",)
        if learned and t >= 1:
            fwd = fwd + ("schedule",)
        rev = () if preset["flows"] else (f"reverse_kernel:{t}",)
        if learned:
            rev = rev + ("schedule",)
        level_objectives.append(LevelObjective(
            level=t + 1, divergence="reverse_kl",
            forward_groups=fwd, reverse_groups=rev,
            stl=cfg["stl"] and not preset["flows"],
            uniform_incoming=preset["uniform"]))
        baselines.append(BaselineState(decay=0.99))

    return AnnealModel(
        config=cfg, store=store, target=target, initial_proposal=proposal,
        path=path, seq=seq, fwd_kernels=fwd_kernels, rev_kernels=rev_kernels,
        level_objectives=level_objectives, baselines=baselines,
        optimizer=Adam(store, lr=cfg["lr"]), num_particles=S,
        resample=cfg["resample"])


def train_anneal(model, iterations=None, progress_every=0, callback=None):
    """Run nvi_step for the configured number of iterations.

    Returns per-iteration diagnostics rows:
    (iter, level, loss_estimate, ess, log_Z_hat, baseline).
    Raises NanLossError with a diagnostic dump on a non-finite loss.
    """
    cfg = model.config
    iterations = cfg["iterations"] if iterations is None else int(iterations)
    seed = cfg["seed"]
    rows = []
    for it in range(iterations):
        rng = _rng(seed, 1, it)
        diags = objectives.nvi_step(model, rng)
        losses = diags["level_loss"]
        if not np.all(np.isfinite(losses)):
            raise NanLossError(
                f"non-finite loss at iteration {it}: {losses}",
                dump={"iteration": it, "level_loss": losses,
                      "ess": diags["ess"], "log_Z_hat": diags["log_Z_hat"],
                      "betas": model.path.beta_values().tolist()})
        for lvl, (loss, b) in enumerate(zip(losses, diags["baseline"]), start=1):
            rows.append((it, lvl, loss, diags["ess"], diags["log_Z_hat"], b))
        if callback is not None:
            callback(it, model, diags)
        if progress_every and (it + 1) % progress_every == 0:
            print(f"iter {it + 1}/{iterations} "
                  f"log_Z_hat={diags['log_Z_hat']:.4f} ess={diags['ess']:.1f}",
                  flush=True)
    return rows


def eval_anneal(model, eval_batches=None, eval_batch_size=None, seed=None,
                collect_samples=False):
    """Evaluate log-normalizer estimates and ESS on final-level weights.

    Intermediate resampling follows the method policy; the system is never
    resampled after the final extension, so the reported ESS and log-mean
    weight come from informative final weights.
    """
    cfg = model.config
    nb = cfg["eval_batches"] if eval_batches is None else int(eval_batches)
    bs = cfg["eval_batch_size"] if eval_batch_size is None else int(eval_batch_size)
    seed = cfg["seed"] if seed is None else int(seed)
    log_z, esses, step_rows, samples = [], [], [], []
    for b in range(nb):
        rng = _rng(seed, 2, b)
        res = sampler.run_sequence(
            model.seq, model.fwd_kernels, model.rev_kernels, bs, rng,
            initial_proposal=model.initial_proposal,
            resample=model.resample, stl=False)
        log_z.append(sampler.log_Z_hat(res.final))
        esses.append(sampler.ess(res.final))
        if b == 0:
            for step, rec in enumerate(res.records, start=1):
                step_rows.append((step, sampler.ess(rec.log_w_out),
                                  sampler.log_Z_hat(rec.log_w_out),
                                  float(np.mean(rec.log_v)),
                                  float(np.var(rec.log_v))))
        if collect_samples:
            samples.append(res.final.z.value)
    log_z = np.array(log_z)
    esses = np.array(esses)
    out = {
        "log_Z_hat": log_z, "ess": esses,
        "mean_log_Z_hat": float(log_z.mean()), "sd_log_Z_hat": float(log_z.std(ddof=1)) if nb > 1 else 0.0,
        "mean_ess": float(esses.mean()), "sd_ess": float(esses.std(ddof=1)) if nb > 1 else 0.0,
        "step_rows": step_rows,
    }
    if collect_samples:
        out["samples"] = np.concatenate(samples, axis=0)
    return out


def draw_samples(model, n, seed=None):
    """Final-level particles and their nearest-mode assignment."""
    out = eval_anneal(model, eval_batches=max(1, n // model.config["eval_batch_size"]),
                      seed=seed, collect_samples=True)
    z = out["samples"][:n]
    return z, model.target.mode_assignment(z)


def save_checkpoint(path, model):
    arrays = model.store.state_arrays()
    np.savez(path, __config__=json.dumps(model.config), **arrays)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint written by save_checkpoint."""
    with np.load(path, allow_pickle=False) as data:
        cfg = json.loads(str(data["__config__"]))
        arrays = {k: data[k] for k in data.files if k != "__config__"}
    model = build_anneal_model(cfg)
    model.store.load_state_arrays(arrays)
    return model
