"""Command-line front end.

Subcommands ``tv``, ``huber``, ``check`` and ``equiv``. Every option may
also come from a ``key = value`` file given with ``--config`` (keys are
option names without the leading dashes; ``-`` and ``_`` are
interchangeable). Command-line values override the file, which overrides
the defaults.

Exit codes: 0 success, 1 condition or convergence failure, 2 bad
configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from . import __version__
from .instances import sadmm_vs_sdr, sdr_vs_drs, sdr_vs_pds
from .linops import ConditionReport, Metric, check_metric_condition, identity, stack
from .solvers import ConditionError, StoppingRule

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
EQUIV_BOUND = 1e-9

TV_COLUMNS = ["run_id", "seed", "tau", "sigma1", "sigma2", "iterations", "final_residual",
              "objective", "psnr", "wall_ms", "status"]
HUBER_COLUMNS = ["N", "class", "eta", "seed", "iterations", "wall_ms", "F_final",
                 "improvement_pct", "status"]


class ConfigError(ValueError):
    pass


# parsing helpers -----------------------------------------------------------

def parse_int_list(text: str) -> List[int]:
    """``"a:b"`` (inclusive range) or ``"a,b,c"``."""
    text = str(text).strip()
    try:
        if ":" in text:
            a, b = text.split(":")
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None


def parse_seeds(text: str) -> List[int]:
    """A bare count ``K`` means seeds ``0..K-1``; otherwise as :func:`parse_int_list`."""
    text = str(text).strip()
    if text.isdigit():
        return list(range(int(text)))
    return parse_int_list(text)


def parse_float_list(text: str) -> List[float]:
    """``"a:b"`` (inclusive integer steps) or ``"a,b,c"``."""
    text = str(text).strip()
    if ":" in text:
        return [float(v) for v in parse_int_list(text)]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def parse_classes(text: str) -> List[str]:
    out = [c.strip().upper() for c in str(text).split(",") if c.strip()]
    if not out or any(c not in ("A", "B", "C") for c in out):
        raise argparse.ArgumentTypeError(f"classes must be drawn from A,B,C, got {text!r}")
    return out


def parse_shape(text: str):
    try:
        a, b = str(text).lower().split("x")
        shape = int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 8x8, got {text!r}") from None
    if min(shape) < 2:
        raise argparse.ArgumentTypeError("both sides must be >= 2")
    return shape


def positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def read_config(path) -> List[str]:
    """Turn a ``key = value`` file into command-line tokens."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    tokens: List[str] = []
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        low = value.lower()
        if low in ("true", "yes", "on"):
            tokens.append(flag)
        elif low in ("false", "no", "off"):
            continue
        else:
            tokens.append(flag)
            tokens.extend(value.split())
    return tokens


# output ----------------------------------------------------------------------

def fmt(v) -> str:
    """17 significant digits for floats; integers and strings verbatim."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.16e}"
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[Dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c, "")) for c in columns])
    if path is None or str(path) == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue(), newline="")


def mean_row(rows: Sequence[Dict], keys: Sequence[str]) -> Dict:
    out = {}
    for k in keys:
        vals = [float(r[k]) for r in rows]
        out[k] = float(np.mean(vals)) if vals else float("nan")
    return out


def thread_count() -> int:
    cap = os.environ.get("SPLITDR_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError("SPLITDR_THREADS must be an integer") from None
    return n


def run_parallel(fn, jobs):
    """Ordered map over ``jobs`` on at most :func:`thread_count` threads."""
    n = thread_count()
    if n == 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, jobs))


# tv ----------------------------------------------------------------------------

def tv_grid(cfg, shape):
    """List of ``(kappa or None, tau, sigma1, sigma2)`` step-size points."""
    from .experiments.imaging import grad_norm_sq
    from .experiments.tv import boundary_steps, kappa_steps

    nrm2 = grad_norm_sq(*shape)
    if cfg["boundary"]:
        if cfg.get("tau") is None:
            raise ConfigError("--boundary needs --tau")
        ells = cfg.get("ell") or [0.5]
        return [(None,) + boundary_steps(cfg["tau"], ell, nrm2) for ell in ells]
    explicit = [cfg.get(k) for k in ("tau", "sigma1", "sigma2")]
    if all(v is not None for v in explicit):
        return [(None,) + tuple(explicit)]
    if any(v is not None for v in explicit):
        raise ConfigError("give all of --tau, --sigma1, --sigma2 or none")
    kappas = cfg.get("kappa_sweep") or [cfg["kappa"]]
    return [(k,) + kappa_steps(k, nrm2) for k in kappas]


def cmd_tv(cfg) -> int:
    from .experiments.imaging import read_pgm, synthetic_image
    from .experiments.tv import build_tv, run_tv

    image = None
    image_seed = None
    if cfg.get("image"):
        try:
            image = read_pgm(cfg["image"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read image {cfg['image']}: {exc}") from None
        shape = image.shape
    else:
        syn = cfg.get("synthetic") or [32]
        if len(syn) not in (1, 2):
            raise ConfigError("--synthetic takes N and an optional seed")
        n = syn[0]
        image_seed = syn[1] if len(syn) == 2 else None
        shape = (n, n)
    seeds = cfg.get("seeds") or ([image_seed] if image_seed is not None else [0])
    grid = tv_grid(cfg, shape)
    rule = StoppingRule(cfg["eps"], cfg["max_iter"])
    noise = 0.0 if cfg["no_noise"] else cfg["noise_std"]
    dump = cfg.get("dump_iterates")
    if dump:
        Path(dump).mkdir(parents=True, exist_ok=True)

    jobs = [(i * len(seeds) + j, point, seed) for i, point in enumerate(grid)
            for j, seed in enumerate(seeds)]

    def one(job):
        run_id, (kappa, tau, s1, s2), seed = job
        img = image
        if img is None:
            img = synthetic_image(shape[0], seed if image_seed is None else image_seed)
        prob = build_tv(shape[0], seed=seed, alpha=cfg["alpha"], blur=not cfg["no_blur"],
                        noise_std=noise, image=img,
                        tau=tau, sigma1=s1, sigma2=s2)
        rep = run_tv(prob, rule, record_objective=False, unchecked=cfg["unchecked"])
        if dump:
            np.savez(Path(dump) / f"run_{run_id:04d}.npz", x=rep.state.x, b=prob.b,
                     objective=rep.objective, shape=np.array(shape))
        return {"run_id": run_id, "seed": seed, "tau": tau, "sigma1": s1, "sigma2": s2,
                "iterations": rep.iterations, "final_residual": rep.final_residual,
                "objective": rep.objective, "psnr": rep.psnr, "wall_ms": 1e3 * rep.wall_time,
                "status": rep.status}

    rows = run_parallel(one, jobs)
    out = []
    for i in range(len(grid)):
        block = rows[i * len(seeds):(i + 1) * len(seeds)]
        out.extend(block)
        agg = mean_row(block, ["iterations", "final_residual", "objective", "psnr", "wall_ms"])
        agg.update(run_id="mean", seed="", tau=block[0]["tau"], sigma1=block[0]["sigma1"],
                   sigma2=block[0]["sigma2"],
                   status=f"{sum(r['status'] == 'converged' for r in block)}/{len(block)} converged")
        out.append(agg)
    write_csv(cfg.get("out"), TV_COLUMNS, out)
    return EXIT_OK if all(r["status"] == "converged" for r in rows) else EXIT_FAIL


# huber ---------------------------------------------------------------------------

def cmd_huber(cfg) -> int:
    from .experiments.huber import build_huber, run_huber
    from .oracle import CertificationError, OracleConfig, huber_l1_problem, oracle_solve
    from .oracle import improvement_pct
    from .prox import SubproblemError

    Ns = cfg["n"]
    classes = cfg["classes"]
    etas = cfg.get("eta") if cfg.get("eta") is not None else cfg["etas"]
    seeds = cfg["seeds"]
    rule = StoppingRule(cfg["eps"], cfg["max_iter"])
    for eta in etas:
        if not 0.0 <= eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")

    instances = {}
    for N in Ns:
        for cls in classes:
            for seed in seeds:
                instances[N, cls, seed] = build_huber(N, cls, seed, cfg["alpha"], cfg["delta"],
                                                      cfg["z_scale"])

    def reference(key):
        if cfg["no_oracle"]:
            return float("nan")
        p = instances[key]
        try:
            return oracle_solve(huber_l1_problem(p.M, p.z, p.alpha, p.delta),
                                OracleConfig("dense_kkt"))[1]
        except CertificationError:
            return float("nan")

    keys = list(instances)
    F_ref = dict(zip(keys, run_parallel(reference, keys)))

    jobs = [(N, cls, eta, seed) for N in Ns for cls in classes for eta in etas for seed in seeds]

    def one(job):
        N, cls, eta, seed = job
        prob = instances[N, cls, seed]
        row = {"N": N, "class": cls, "eta": float(eta), "seed": seed}
        try:
            rep = run_huber(prob, eta, rule, tau=cfg["tau"], sigma=cfg.get("sigma"))
        except SubproblemError:
            row.update(iterations=0, wall_ms=float("nan"), F_final=float("nan"),
                       improvement_pct=float("nan"), status="newton_failure")
            return row
        ref = F_ref[N, cls, seed]
        row.update(iterations=rep.iterations, wall_ms=1e3 * rep.wall_time, F_final=rep.F_final,
                   improvement_pct=improvement_pct(ref, rep.F_final) if math.isfinite(ref)
                   else float("nan"), status=rep.status)
        return row

    rows = run_parallel(one, jobs)
    out = []
    for i in range(0, len(rows), len(seeds)):
        block = rows[i:i + len(seeds)]
        out.extend(block)
        agg = mean_row(block, ["iterations", "wall_ms", "F_final", "improvement_pct"])
        agg.update(N=block[0]["N"], **{"class": block[0]["class"]}, eta=block[0]["eta"], seed="mean",
                   status=f"{sum(r['status'] == 'converged' for r in block)}/{len(block)} converged")
        out.append(agg)
    write_csv(cfg.get("out"), HUBER_COLUMNS, out)
    return EXIT_OK if all(r["status"] == "converged" for r in rows) else EXIT_FAIL


# check ---------------------------------------------------------------------------

def cmd_check(cfg) -> int:
    tau, s1, s2 = cfg.get("tau"), cfg.get("sigma1"), cfg.get("sigma2")
    if cfg["operator"] == "identity":
        n = cfg["dim"]
        tau = 1.0 if tau is None else tau
        s1 = 1.0 if s1 is None else s1
        Y, S, L = Metric.scalar(tau, n), Metric.scalar(s1, n), identity(n)
    else:
        from .experiments.imaging import grad_norm_sq, grad_op
        from .experiments.tv import boundary_steps, kappa_steps

        shape = cfg["shape"]
        N = shape[0] * shape[1]
        if cfg["boundary"]:
            if tau is None:
                raise ConfigError("--boundary needs --tau")
            tau, s1, s2 = boundary_steps(tau, (cfg.get("ell") or [0.5])[0], grad_norm_sq(*shape))
        elif None in (tau, s1, s2):
            if any(v is not None for v in (tau, s1, s2)):
                raise ConfigError("give all of --tau, --sigma1, --sigma2 or none")
            tau, s1, s2 = kappa_steps(cfg["kappa"], grad_norm_sq(*shape))
        Y = Metric.scalar(tau, N)
        S = Metric.diagonal(np.concatenate([np.full(2 * N, s1), np.full(N, s2)]))
        L = stack([grad_op(*shape), identity(N)])
    method = None if cfg["method"] == "auto" else cfg["method"]
    if method is None and cfg["operator"] == "tv":
        # grad* grad and Id commute: closed form from the power-iteration norm
        margin = 1.0 - tau * s1 * grad_norm_sq(*shape) - tau * s2
        rep = ConditionReport(margin >= -cfg["tol"], margin, "power_iteration")
    else:
        rep = check_metric_condition(Y, S, L, tol=cfg["tol"], method=method)
    print(f"monotone: {str(rep.is_monotone).lower()}")
    print(f"margin: {rep.margin:.16e}")
    print(f"method: {rep.method}")
    return EXIT_OK if rep.is_monotone else EXIT_FAIL


# equiv ---------------------------------------------------------------------------

def cmd_equiv(cfg) -> int:
    dim = cfg.get("dim")
    if dim is not None and not 2 <= dim <= 12:
        raise ConfigError("--dim must lie in [2, 12]")
    seeds = list(range(cfg["seed"], cfg["seed"] + cfg["count"]))
    suites = [("sdr_vs_pds", sdr_vs_pds, 50), ("sdr_vs_drs", sdr_vs_drs, 200),
              ("sadmm_vs_sdr", sadmm_vs_sdr, 100)]
    ok = True
    for name, fn, iters in suites:
        it = cfg.get("iters") or iters
        dev = max(fn(s, it, dim) for s in seeds)
        good = dev <= EQUIV_BOUND
        ok &= good
        print(f"{name}: max deviation {dev:.3e} over {len(seeds)} seeds x {it} iterations "
              f"[{'ok' if good else 'FAIL'}]")
    return EXIT_OK if ok else EXIT_FAIL


# argument parser -----------------------------------------------------------------

DEFAULTS = {
    "tv": dict(alpha=0.5, kappa=10.0, kappa_sweep=None, boundary=False, ell=None, eps=1e-6,
               max_iter=100_000, noise_std=1e-3, no_noise=False, no_blur=False, unchecked=False),
    "huber": dict(n=[50], classes=["A", "B", "C"], etas=[0.0, 0.8, 0.9, 1.0], eta=None,
                  seeds=list(range(10)), eps=1e-6, max_iter=20_000, tau=1.0, sigma=None,
                  no_oracle=False),
    "check": dict(operator="tv", shape=(8, 8), dim=4, kappa=10.0, boundary=False, ell=None,
                  method="auto", tol=1e-9),
    "equiv": dict(seed=0, count=10, iters=None, dim=None),
}


def build_parser() -> argparse.ArgumentParser:
    from .experiments.huber import DEFAULT_ALPHA, DEFAULT_DELTA, DEFAULT_Z_SCALE

    DEFAULTS["huber"].update(alpha=DEFAULT_ALPHA, delta=DEFAULT_DELTA, z_scale=DEFAULT_Z_SCALE)
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="splitdr", description=__doc__.split("\n")[0],
                                argument_default=S)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="key = value file")
        if out:
            sp.add_argument("--out", help="CSV path ('-' for stdout)")

    tv = sub.add_parser("tv", help="total-variation restoration sweep", argument_default=S)
    common(tv)
    src = tv.add_mutually_exclusive_group()
    src.add_argument("--image", help="8-bit PGM input")
    src.add_argument("--synthetic", type=int, nargs="+", metavar="N [SEED]",
                     help="N x N synthetic image, optional image seed")
    tv.add_argument("--seeds", type=parse_seeds, help="noise seeds: K, a:b or a,b,c")
    tv.add_argument("--alpha", type=float)
    tv.add_argument("--kappa", type=float)
    tv.add_argument("--kappa-sweep", type=parse_float_list, help="e.g. 6:10")
    tv.add_argument("--tau", type=positive_float)
    tv.add_argument("--sigma1", type=positive_float)
    tv.add_argument("--sigma2", type=positive_float)
    tv.add_argument("--boundary", action="store_true", help="sigma1, sigma2 on the boundary from --ell")
    tv.add_argument("--ell", type=parse_float_list)
    tv.add_argument("--eps", type=positive_float)
    tv.add_argument("--max-iter", type=int)
    tv.add_argument("--noise-std", type=float)
    tv.add_argument("--no-noise", action="store_true")
    tv.add_argument("--no-blur", action="store_true", help="identity forward operator")
    tv.add_argument("--unchecked", action="store_true", help="skip the step-size condition check")
    tv.add_argument("--dump-iterates", metavar="DIR", help="write final iterates as .npz")

    hu = sub.add_parser("huber", help="Huber + l1 spectral-split sweep", argument_default=S)
    common(hu)
    hu.add_argument("--n", type=parse_int_list, help="dimensions, e.g. 50 or 50,100")
    hu.add_argument("--classes", type=parse_classes)
    hu.add_argument("--etas", type=parse_float_list)
    hu.add_argument("--eta", type=parse_float_list, help="alias of --etas")
    hu.add_argument("--seeds", type=parse_seeds, help="K, a:b or a,b,c")
    hu.add_argument("--alpha", type=float)
    hu.add_argument("--delta", type=positive_float)
    hu.add_argument("--z-scale", type=positive_float)
    hu.add_argument("--tau", type=positive_float)
    hu.add_argument("--sigma", type=positive_float)
    hu.add_argument("--eps", type=positive_float)
    hu.add_argument("--max-iter", type=int)
    hu.add_argument("--no-oracle", action="store_true", help="skip the reference solve")

    ch = sub.add_parser("check", help="step-size condition checker", argument_default=S)
    common(ch, out=False)
    ch.add_argument("--operator", choices=["tv", "identity"])
    ch.add_argument("--shape", type=parse_shape, help="grid, e.g. 8x8")
    ch.add_argument("--dim", type=int, help="dimension for --operator identity")
    ch.add_argument("--tau", type=positive_float)
    ch.add_argument("--sigma1", type=positive_float)
    ch.add_argument("--sigma2", type=positive_float)
    ch.add_argument("--kappa", type=float)
    ch.add_argument("--boundary", action="store_true")
    ch.add_argument("--ell", type=parse_float_list)
    ch.add_argument("--method", choices=["auto", "dense_eigen", "power_iteration"])
    ch.add_argument("--tol", type=float)

    eq = sub.add_parser("equiv", help="run the equivalence suites", argument_default=S)
    common(eq, out=False)
    eq.add_argument("--seed", type=int, help="first seed")
    eq.add_argument("--count", type=int, help="number of seeds")
    eq.add_argument("--iters", type=int)
    eq.add_argument("--dim", type=int)
    return p


def resolve(parser, argv) -> Dict:
    """Defaults, then the config file, then the command line."""
    cli = vars(parser.parse_args(argv))
    cmd = cli["command"]
    cfg = dict(DEFAULTS[cmd])
    if "config" in cli:
        tokens = read_config(cli["config"])
        cfg.update(vars(parser.parse_args([cmd] + tokens)))
    cfg.update(cli)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        cfg = resolve(parser, argv)
        fn = {"tv": cmd_tv, "huber": cmd_huber, "check": cmd_check, "equiv": cmd_equiv}[cfg["command"]]
        return fn(cfg)
    except ConditionError as exc:
        print(f"splitdr: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ConfigError, ValueError) as exc:
        print(f"splitdr: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
