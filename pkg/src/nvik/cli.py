"""Command-line runner: ``nvi train|eval|plot``.

Config files are flat ``key=value`` text (``#`` comments allowed);
``--set key=value`` overrides file entries and dedicated flags
(``--seed``, ``--out``) win over both. The environment variable
``NVI_SEED`` is the lowest-precedence seed source.

Exit codes: 0 success; 2 invalid config or arguments; 3 non-finite loss
during training; 4 missing checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments, hmm, plots, sampler, targets
from .experiments import ConfigError, NanLossError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NAN = 3
EXIT_NO_CHECKPOINT = 4


# ---------------------------------------------------------------------------
# config handling


def parse_config_file(path):
    cfg = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{i}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        cfg[key.strip()] = value.strip()
    return cfg


def apply_overrides(cfg, pairs):
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        cfg[key.strip()] = value.strip()
    return cfg


def resolve_seed(cfg, flag_seed):
    if flag_seed is not None:
        return int(flag_seed)
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("NVI_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"NVI_SEED is not an integer: {env!r}")
    return 0


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                        else v for v in row])


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg, out_dir, restarts):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    experiment = cfg.get("experiment", "anneal")
    base_seed = int(cfg["seed"])
    report = {"experiment": experiment, "restarts": restarts, "seed": base_seed}
    t0 = time.time()
    for r in range(restarts):
        rdir = out_dir / f"restart_{r}"
        rdir.mkdir(parents=True, exist_ok=True)
        seed = base_seed + r
        if experiment == "anneal":
            _train_anneal_restart(cfg, seed, rdir)
        elif experiment == "hmm":
            _train_hmm_restart(cfg, seed, rdir)
        else:
            raise ConfigError(f"unknown experiment {experiment!r}")
    report["wall_clock_s"] = time.time() - t0
    (out_dir / "report.json").write_text(json.dumps(report, indent=2),
                                         encoding="utf-8")
    print(f"trained {restarts} restart(s) into {out_dir}")
    return EXIT_OK


def _train_anneal_restart(cfg, seed, rdir):
    model = experiments.build_anneal_model(cfg, seed=seed)
    schedule_rows = []

    def log_schedule(it, m, diags):
        if it % 100 == 0 or it == m.config["iterations"] - 1:
            schedule_rows.append([it] + list(m.path.beta_values()))

    rows = experiments.train_anneal(model, callback=log_schedule)
    write_csv(rdir / "diagnostics.csv",
              ["iter", "level", "loss_estimate", "ess", "log_Z_hat", "baseline"],
              rows)
    nb = len(model.seq) - 1
    write_csv(rdir / "schedule.csv",
              ["iter"] + [f"beta_{j + 1}" for j in range(nb)], schedule_rows)
    experiments.save_checkpoint(rdir / "checkpoint.npz", model)


def _hmm_config(cfg, seed):
    spec = hmm.HmmSpec(M=int(cfg.get("M", 4)), K=int(cfg.get("K", 20)))
    params = dict(
        variant=cfg.get("method", cfg.get("heuristic", "neural")),
        iterations=int(cfg.get("iterations", 2000)),
        S=int(cfg.get("S", 36)),
        eval_S=int(cfg.get("eval_S", 1000)),
        lr=float(cfg.get("lr", 1e-3)),
        train_instances=int(cfg.get("train_instances", 2000)),
        test_instances=int(cfg.get("test_instances", 200)),
        seed=seed,
    )
    if params["variant"] not in hmm.HEURISTIC_VARIANTS:
        raise ConfigError(f"unknown hmm heuristic {params['variant']!r}")
    return spec, params


def _hmm_instances(spec, params):
    data_rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence([int(params.get("data_seed", 1234)), 0])))
    train = hmm.simulate(spec, data_rng, params["train_instances"])
    test = hmm.simulate(spec, data_rng, params["test_instances"])
    return train, test


def _train_hmm_restart(cfg, seed, rdir):
    spec, params = _hmm_config(cfg, seed)
    train, _ = _hmm_instances(spec, params)
    model = hmm.HmmModel(spec, params["variant"], seed=seed, lr=params["lr"])
    rows = hmm.train_hmm(model, train, params["iterations"], seed,
                         S=params["S"])
    if not np.all(np.isfinite([r[1] for r in rows])):
        raise NanLossError("non-finite hmm training loss")
    write_csv(rdir / "diagnostics.csv",
              ["iter", "loss_estimate", "ess", "log_Z_hat"], rows)
    arrays = model.store.state_arrays()
    np.savez(rdir / "checkpoint.npz",
             __config__=json.dumps({**params, "M": spec.M, "K": spec.K,
                                    "experiment": "hmm"}),
             **arrays)


def _restart_dirs(out_dir):
    out_dir = Path(out_dir)
    dirs = sorted(d for d in out_dir.glob("restart_*") if d.is_dir())
    if not dirs:
        # allow a bare directory holding a single checkpoint
        if (out_dir / "checkpoint.npz").exists():
            return [out_dir]
        raise FileNotFoundError(f"no checkpoints under {out_dir}")
    for d in dirs:
        if not (d / "checkpoint.npz").exists():
            raise FileNotFoundError(f"missing checkpoint {d / 'checkpoint.npz'}")
    return dirs


def cmd_eval(cfg, out_dir):
    out_dir = Path(out_dir)
    dirs = _restart_dirs(out_dir)
    experiment = cfg.get("experiment", "anneal")
    if experiment == "hmm":
        return _eval_hmm(cfg, out_dir, dirs)
    summary = []
    for d in dirs:
        model = experiments.load_checkpoint(d / "checkpoint.npz")
        res = experiments.eval_anneal(model)
        summary.append([model.config["method"], model.config["K"],
                        res["mean_log_Z_hat"], res["sd_log_Z_hat"],
                        res["mean_ess"], res["sd_ess"]])
        write_csv(d / "sampler_steps.csv",
                  ["step", "ess", "log_Z_hat", "mean_log_v", "var_log_v"],
                  res["step_rows"])
    write_csv(out_dir / "summary.csv",
              ["method", "K", "mean_log_Z_hat", "sd_log_Z_hat",
               "mean_ess", "sd_ess"], summary)
    for row in summary:
        print(f"{row[0]} K={row[1]}: log_Z_hat={row[2]:.4f} (sd {row[3]:.4f}) "
              f"ess={row[4]:.1f} (sd {row[5]:.1f})")
    return EXIT_OK


def _load_hmm_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        params = json.loads(str(data["__config__"]))
        arrays = {k: data[k] for k in data.files if k != "__config__"}
    spec = hmm.HmmSpec(M=int(params["M"]), K=int(params["K"]))
    model = hmm.HmmModel(spec, params["variant"], seed=int(params["seed"]),
                         lr=float(params["lr"]))
    model.store.load_state_arrays(arrays)
    return model, params


def _eval_hmm(cfg, out_dir, dirs):
    all_rows = []
    for d in dirs:
        model, params = _load_hmm_checkpoint(d / "checkpoint.npz")
        _, test = _hmm_instances(model.spec, params)
        rows = hmm.evaluate(model, test, S=params["eval_S"],
                            seed=int(params["seed"]))
        write_csv(d / "metrics.csv",
                  ["instance_id", "variant", "log_Z_hat", "ess"], rows)
        all_rows.extend(rows)
        ess = np.array([r[3] for r in rows])
        lz = np.array([r[2] for r in rows])
        print(f"{params['variant']}: mean ess={ess.mean():.1f} "
              f"mean log_Z_hat={lz.mean():.2f}")
    write_csv(out_dir / "metrics.csv",
              ["instance_id", "variant", "log_Z_hat", "ess"], all_rows)
    return EXIT_OK


def cmd_plot(cfg, out_dir):
    out_dir = Path(out_dir)
    try:
        dirs = _restart_dirs(out_dir)
    except FileNotFoundError:
        dirs = []
    made = []
    for d in (dirs or [out_dir]):
        diag = d / "diagnostics.csv"
        if not diag.exists() or len(diag.read_text(encoding="utf-8").splitlines()) <= 1:
            made.append(plots.warning_svg(d / "training_ess.svg",
                                          "no diagnostics recorded"))
            continue
        rows = list(csv.DictReader(open(diag, encoding="utf-8")))
        if "level" in rows[0]:  # annealing run
            lvl1 = [r for r in rows if r["level"] == "1"]
            iters = [int(r["iter"]) for r in lvl1]
            ess = [float(r["ess"]) for r in lvl1]
            made.append(plots.training_ess(d / "training_ess.svg", iters, ess))
            model = experiments.load_checkpoint(d / "checkpoint.npz")
            samples, _ = experiments.draw_samples(model, 2000)
            made.append(plots.sample_scatter(d / "samples.svg", samples,
                                             model.target))
            kls = targets.pairwise_kl_quadrature(model.seq)
            lin_path = targets.AnnealingPath(len(model.seq), learnable=False)
            lin_seq = targets.geometric_sequence(model.initial_proposal,
                                                 model.target, lin_path)
            kls_lin = targets.pairwise_kl_quadrature(lin_seq)
            made.append(plots.kl_bars(d / "kl_bars.svg", kls, kls_lin))
            sched = d / "schedule.csv"
            if sched.exists():
                srows = list(csv.reader(open(sched, encoding="utf-8")))[1:]
                if srows:
                    its = [int(r[0]) for r in srows]
                    betas = [[float(v) for v in r[1:]] for r in srows]
                    made.append(plots.schedule_trajectory(
                        d / "schedule.svg", its, betas))
        else:  # hmm run
            iters = [int(r["iter"]) for r in rows]
            ess = [float(r["ess"]) for r in rows]
            made.append(plots.training_ess(d / "training_ess.svg", iters, ess))
    for p in made:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="nvi", description=__doc__)
    p.add_argument("command", choices=["train", "eval", "plot"])
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="key=value")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config_file(args.config)
        apply_overrides(cfg, args.overrides)
        cfg["seed"] = resolve_seed(cfg, args.seed)
        out_dir = args.out or cfg.get("out", "runs/default")
        if cfg.get("experiment", "anneal") == "anneal":
            cfg = experiments.resolve_anneal_config(cfg)
        if args.command == "train":
            return cmd_train(cfg, out_dir, args.restarts)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir)
        return cmd_plot(cfg, out_dir)
    except (ConfigError, hmm.HmmError, ValueError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NanLossError as e:
        print(f"error: non-finite loss: {e}", file=sys.stderr)
        dump = getattr(e, "dump", {})
        if dump:
            print(json.dumps(dump, indent=2), file=sys.stderr)
        return EXIT_NAN
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
