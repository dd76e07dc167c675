"""Command-line front end.

Every subcommand reads one YAML config (or a shipped preset, ``preset:NAME``),
writes its reports into the output directory and finishes with an atomic
``manifest.json``.  The exit status is 0 when no check outside the declared
negative controls returned FAIL and no error occurred, 1 on such a FAIL and 2
on errors.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    build_bounds,
    build_factor,
    build_functional,
    build_manifold,
    build_probe,
    build_test_function,
    load_config,
    preset_names,
    SCHEMA_VERSION,
)
from .errors import RicprobeError

PASS, FAIL, INCONCLUSIVE = "PASS", "FAIL", "INCONCLUSIVE"
PATH_COLUMNS_DOC = "path, knot, t, x0..x{n-1}, l (local time), discarded"


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(w) for k, w in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(w) for w in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


class Writer:
    """Single writer for the output directory; every file lands via rename."""

    def __init__(self, out, formats):
        self.out = out
        self.formats = tuple(formats)
        self.written = {}
        os.makedirs(out, exist_ok=True)

    def _atomic(self, name, text):
        path = os.path.join(self.out, name)
        fd, tmp = tempfile.mkstemp(dir=self.out, prefix=f".{name}.")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
        return path

    def json(self, key, name, obj, force=False):
        if "json" not in self.formats and not force:
            return None
        text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
        self.written[key] = self._atomic(name, text)
        return self.written[key]

    def csv(self, key, name, columns, rows):
        if "csv" not in self.formats:
            return None
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        self.written[key] = self._atomic(name, buf.getvalue())
        return self.written[key]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# -- shared setup ------------------------------------------------------------


class Context:
    def __init__(self, cfg, workers):
        from .estimators import RunParams

        self.cfg = cfg
        self.M = build_manifold(cfg.manifold)
        self.x = build_probe(self.M, cfg.probe)
        self.workers = workers
        r = cfg.run
        self.params = RunParams(r.n_paths, r.n_steps, cfg.master_seed, workers, r.antithetic, r.dt_max)
        self._tf = None

    @property
    def tf(self):
        if self._tf is None:
            self._tf = build_test_function(self.M, self.x, self.cfg.probe)
        return self._tf

    def schedule(self, mode):
        from .estimators import DEFAULT_SCHEDULE

        s = self.cfg.run.schedule
        return DEFAULT_SCHEDULE[mode] if s is None else tuple(s)


def _diagnostic(ctx, bounds=None):
    """Discard statistics and the mean of ``exp((2 + eps) A_T)`` at the run horizon."""
    from .diffusion import SimConfig, simulate_ensemble
    from .estimators import integrability_diagnostic

    M, x = ctx.M, ctx.x
    bounds = build_bounds(M, _default_bounds()) if bounds is None else bounds
    r = ctx.cfg.run
    n = min(r.n_paths, 20000)
    cfg = SimConfig(r.T, r.n_steps, ctx.cfg.master_seed)
    ens = simulate_ensemble(M, x, M.default_frame(x), cfg, n, bounds=bounds, workers=ctx.workers)
    return {"discards": int(ens.discarded.sum()), "n_paths": n, "discard_fraction": ens.discard_fraction,
            "integrability": integrability_diagnostic(ens), "bounds": bounds.describe()}


def _default_bounds():
    from .config import BoundsSpec

    return BoundsSpec()


# -- subcommands -------------------------------------------------------------


def cmd_simulate(ctx, w):
    """Simulate the ensemble; dump the first ``run.dump_paths`` paths knot by knot."""
    from .bounds import true_bounds
    from .diffusion import SimConfig, simulate_ensemble
    from .estimators import mean_estimate

    M, x, r = ctx.M, ctx.x, ctx.cfg.run
    cfg = SimConfig(r.T, r.n_steps, ctx.cfg.master_seed)
    U0 = M.default_frame(x)
    ens = simulate_ensemble(M, x, U0, cfg, r.n_paths, antithetic=r.antithetic, workers=ctx.workers)
    summary = {"T": r.T, "n_steps": r.n_steps, "n_paths": r.n_paths, "discards": int(ens.discarded.sum()),
               "discard_fraction": ens.discard_fraction,
               "local_time": mean_estimate(ens, ens.l[:, -1], "E l_T").to_dict()}
    # P_T of every ambient coordinate function
    summary["terminal_coordinates"] = mean_estimate(ens, ens.X[:, -1], "E X_T").to_dict()
    w.json("summary", "simulate.json", summary)
    n_dump = min(r.dump_paths, r.n_paths)
    if n_dump:
        dump = simulate_ensemble(M, x, U0, cfg, n_dump, record_times=list(cfg.grid), antithetic=r.antithetic,
                                 workers=1)
        cols = ["path", "knot", "t"] + [f"x{i}" for i in range(M.ambient)] + ["l", "discarded"]
        rows = []
        for i in range(n_dump):
            for j, k in enumerate(dump.knots):
                rows.append([i, int(k), float(dump.times[j]), *map(float, dump.X[i, j]), float(dump.l[i, j]),
                             int(dump.discarded[i])])
        w.csv("paths", "paths.csv", cols, rows)
        w.json("paths_header", "paths.json", {"schema_version": SCHEMA_VERSION, "columns": cols,
                                              "n_paths": n_dump, "rows_per_path": r.n_steps + 1,
                                              "manifold": repr(M), "config_hash": ctx.cfg.digest()}, force=True)
    return [], {"discards": summary["discards"], "discard_fraction": summary["discard_fraction"],
                "integrability": _diagnostic(ctx, true_bounds(M))["integrability"]}


def _curvature_common(ctx, w, quantity):
    from .estimators import ricci_estimate, second_form_estimate

    r = ctx.cfg.run
    if quantity == "ricci":
        rep = ricci_estimate(ctx.M, ctx.tf, ctx.params, ctx.schedule("interior"), r.p, r.grad_method)
    else:
        rep = second_form_estimate(ctx.M, ctx.tf, ctx.params, ctx.schedule("boundary"), r.p, r.grad_method)
    d = rep.to_dict()
    w.json("report", f"{quantity}.json", d)
    rows = []
    sched = ctx.schedule("interior" if quantity == "ricci" else "boundary")
    for form, vals in rep.per_T.items():
        for T, e in zip(sched, vals):
            rows.append([form, T, e["value"], e["ci"]])
    w.csv("per_T", f"{quantity}_per_T.csv", ["form", "T", "value", "ci"], rows)
    return [], {"report": {"value": rep.value, "ci": rep.ci, "consistent": rep.consistent}}


def cmd_curvature(ctx, w):
    return _curvature_common(ctx, w, "ricci")


def cmd_second_form(ctx, w):
    return _curvature_common(ctx, w, "second_form")


def _run_check(ctx, spec):
    """Run one check; returns ``(verdict, margin, ci, report dict)``."""
    from . import inequalities as iq
    from .estimators import (
        grad_pt_f_bismut,
        grad_pt_f_fd,
        gradient_agreement,
        martingale_isometry,
        mu_limit_interior,
        mu_sqrt_limits,
    )

    M, x = ctx.M, ctx.x
    T = spec.T if spec.T is not None else ctx.cfg.run.T
    params = ctx.params.with_(n_paths=spec.n_paths or ctx.params.n_paths,
                              n_steps=spec.n_steps or ctx.params.n_steps)
    bounds = build_bounds(M, spec.bounds)
    nc = spec.negative_control
    name = spec.name

    if name in ("gradient-1", "gradient-2"):
        if name == "gradient-1":
            rep = iq.check_gradient_ineq_1(M, x, ctx.tf, T, spec.p, bounds, params, spec.cross_check, nc)
        else:
            rep = iq.check_gradient_ineq_2(M, x, ctx.tf, T, spec.q, bounds, params, nc)
        return rep.verdict, rep.margin, rep.margin_ci, rep.to_dict()
    if name in ("pathspace-gradient", "poincare", "log-sobolev", "truncated-poincare", "truncated-log-sobolev"):
        F = build_functional(M, spec.functional, T, ctx.tf)
        if name == "pathspace-gradient":
            rep = iq.check_pathspace_gradient(M, x, F, T, spec.q, bounds, params, spec.cross_check, nc)
        elif name == "poincare":
            t = T if spec.t is None else spec.t
            rep = iq.check_poincare(M, x, F, t, T, bounds, params, spec.n_inner, spec.n_nodes, spec.use_oracle, nc)
        elif name == "log-sobolev":
            t1 = T if spec.t1 is None else spec.t1
            rep = iq.check_logsobolev(M, x, F, spec.t0, t1, T, bounds, params, spec.n_inner, spec.n_nodes,
                                      spec.use_oracle, nc)
        else:
            mode = "poincare" if name == "truncated-poincare" else "logsobolev"
            rep = iq.check_truncated(M, x, F, mode, T, bounds, params, spec.n_nodes, negative_control=nc)
        return rep.verdict, rep.margin, rep.margin_ci, rep.to_dict()
    if name == "q-bound":
        from .diffusion import simulate_ensemble
        from .transport import check_Q_bound, evolve_Q

        ens = simulate_ensemble(M, x, M.default_frame(x), params.config(T, 0), params.n_paths, bounds=bounds,
                                full=True, workers=params.workers)
        kept = ens.subset(ens.kept)
        rep = check_Q_bound(kept, evolve_Q(kept), bounds)
        ok = rep.all_passed and rep.annihilation <= 1e-6
        d = {"fraction_passed": rep.fraction_passed, "worst_margin": float(np.max(rep.margin)),
             "annihilation": rep.annihilation, "boundary_hits": rep.n_hits, "n_paths": len(kept),
             "discards": int(ens.discarded.sum())}
        return (PASS if ok else FAIL), 0.0 - float(np.max(rep.margin)), 0.0, d
    if name == "bismut-fd":
        b = grad_pt_f_bismut(M, x, ctx.tf, T, params)
        f = grad_pt_f_fd(M, x, ctx.tf, T, params)
        ok, diff, tol = gradient_agreement(b, f)
        d = {"bismut": b.to_dict(), "fd": f.to_dict(), "difference": diff, "tolerance": tol}
        return (PASS if ok else FAIL), float(np.min(tol - diff)), 0.0, d
    if name in ("mu-interior", "mu-boundary"):
        if name == "mu-interior":
            fit = mu_limit_interior(M, x, bounds, params, ctx.schedule("interior"))
            target = float(bounds.k(x[None])[0])
            extra = {}
        else:
            fit, second = mu_sqrt_limits(M, x, bounds, params, ctx.schedule("boundary"))
            target = 2.0 * float(bounds.s(x[None])[0]) / math.sqrt(math.pi)
            extra = {"squared_fit": second.to_dict()}
        err = abs(fit.intercept - target)
        ok = err <= 0.10 * abs(target)
        d = {"fit": fit.to_dict(), "target": target, "relative_error": err / abs(target) if target else None, **extra}
        return (PASS if ok else FAIL), float(0.10 * abs(target) - err), float(fit.intercept_ci), d
    if name == "isometry":
        F = build_functional(M, spec.functional, T, ctx.tf)
        if F.m != 1:
            raise ConfigError("isometry needs a terminal functional")

        def grad(y):
            return F.grads([y])[0]

        eps = 0.01 if spec.eps is None else spec.eps
        rep = martingale_isometry(M, x, F, grad, eps, params, spec.n_outer, spec.n_inner, spec.n_nodes,
                                  spec.use_oracle)
        cc = math.hypot(rep.lhs.ci, rep.rhs.ci)
        return (PASS if rep.agree else FAIL), float(cc - abs(rep.lhs.value - rep.rhs.value)), cc, rep.to_dict()
    raise ConfigError(f"unknown check {name!r}")


def cmd_check(ctx, w):
    verdicts, rows = [], []
    for i, spec in enumerate(ctx.cfg.checks):
        label = spec.label or f"{i:02d}-{spec.name}"
        v, margin, ci, d = _run_check(ctx, spec)
        d = {"label": label, "check": spec.name, "verdict": v, "negative_control": spec.negative_control, **d}
        w.json(f"check:{label}", f"check_{label}.json", d)
        rows.append([label, spec.name, v, margin, ci, int(spec.negative_control)])
        verdicts.append((label, v, spec.negative_control))
        print(f"{label:40s} {v:13s} margin={margin:+.4g} ci={ci:.3g}{'  [negative control]' if spec.negative_control else ''}")
    w.csv("aggregate", "aggregate.csv", ["label", "check", "verdict", "margin", "ci", "negative_control"], rows)
    diag = {}
    if ctx.cfg.checks:
        diag = _diagnostic(ctx, build_bounds(ctx.M, ctx.cfg.checks[0].bounds))
    return verdicts, diag


def cmd_conformal(ctx, w):
    from .conformal import ConformalManifold, locality_experiment, transformed_curvature

    spec = ctx.cfg.conformal
    if spec is None:
        raise ConfigError("the conformal command needs a conformal block")
    phi = build_factor(ctx.M, ctx.x, spec)
    tf = ctx.tf if ctx.cfg.probe.test_function != "coordinate" or ctx.M.kind == "sphere" else None
    rep = locality_experiment(ctx.M, ctx.x, phi, ctx.params, ctx.schedule("interior"), tf, spec.exit_threshold)
    tc = transformed_curvature(ctx.M, phi, ctx.x, spec.variant)
    d = rep.to_dict()
    d["formula"] = {"phi": tc.phi, "ric_phi_frame": tc.ric_phi_frame, "norm": tc.norm, "variant": tc.variant}
    if spec.grid_points:
        d["bounds_sup"] = ConformalManifold(ctx.M, phi).bound_sup(spec.grid_points)
    local = phi.r_in is not None and spec.factor == "radial"
    ok = rep.agree if local else rep.matches_prediction
    v = PASS if ok else FAIL
    d["verdict"] = v
    w.json("locality", "conformal.json", d)
    print(f"base {rep.base.value:.4f} +- {rep.base.ci:.2g}  conformal {rep.conformal.value:.4f} +- "
          f"{rep.conformal.ci:.2g}  predicted delta {rep.predicted_delta:.4g}  {v}")
    return [("locality", v, False)], {"exit_probability": rep.exit_probability}


def cmd_local_time(ctx, w):
    from .diffusion import SimConfig, simulate_ensemble
    from .estimators import mean_estimate

    M, x, r = ctx.M, ctx.x, ctx.cfg.run
    if not M.has_boundary:
        raise ConfigError("local-time needs a manifold with boundary")
    cfg = SimConfig(r.T, r.n_steps, ctx.cfg.master_seed)
    ens = simulate_ensemble(M, x, M.default_frame(x), cfg, r.n_paths, antithetic=r.antithetic, workers=ctx.workers)
    est = mean_estimate(ens, ens.l[:, -1], "E l_T")
    d = {"T": r.T, "n_steps": r.n_steps, "n_paths": r.n_paths, "estimate": est.to_dict(),
         "discards": int(ens.discarded.sum())}
    verdicts = []
    dist, _ = M.boundary(x)
    if abs(float(dist)) <= 1e-9:
        target = 2.0 * math.sqrt(r.T / math.pi)
        rel = abs(est.value - target) / target
        v = PASS if rel <= 0.05 else FAIL
        d.update({"leading_order": target, "relative_error": rel, "verdict": v})
        verdicts.append(("local-time", v, False))
        print(f"E l_T = {est.value:.5f} +- {est.ci:.2g}  leading order {target:.5f}  rel {rel:.3%}  {v}")
    w.json("local_time", "local_time.json", d)
    return verdicts, {"discards": d["discards"], "discard_fraction": ens.discard_fraction}


COMMANDS = {
    "simulate": cmd_simulate,
    "curvature": cmd_curvature,
    "second-form": cmd_second_form,
    "check": cmd_check,
    "conformal": cmd_conformal,
    "local-time": cmd_local_time,
}


# -- entry point -------------------------------------------------------------


def _parser():
    p = argparse.ArgumentParser(prog="ricprobe", description="Monte Carlo probes of curvature bounds on path space.")
    p.add_argument("--version", action="version", version=f"ricprobe {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML file, or preset:NAME")
        s.add_argument("--seed", type=int, help="override master_seed")
        s.add_argument("--workers", type=int, help="worker processes (default: run.workers, then RICPROBE_WORKERS)")
        s.add_argument("--out", help="output directory (overrides output.dir)")
        s.add_argument("--format", choices=("json", "csv"), help="write only this format")
    sub.add_parser("presets", help="list the shipped presets")
    return p


def run(argv=None):
    """Parse ``argv``, run the command and return the exit status."""
    args = _parser().parse_args(argv)
    if args.command == "presets":
        print("\n".join(preset_names()))
        return 0
    try:
        cfg = load_config(args.config)
        upd = {}
        if args.seed is not None:
            upd["master_seed"] = args.seed
        if upd or args.out or args.format:
            data = cfg.model_dump()
            data.update(upd)
            if args.out:
                data["output"]["dir"] = args.out
            if args.format:
                data["output"]["formats"] = [args.format]
            cfg = type(cfg).model_validate(data)
        workers = args.workers or cfg.run.workers
        if workers is None:
            from .diffusion import default_workers

            workers = default_workers()
        w = Writer(cfg.output.dir, cfg.output.formats)
        started = time.time()
        ctx = Context(cfg, workers)
        verdicts, diag = COMMANDS[args.command](ctx, w)
    except (RicprobeError, ValueError, OSError) as exc:
        print(f"ricprobe: error: {exc}", file=sys.stderr)
        return 2
    failed = [lab for lab, v, nc in verdicts if v == FAIL and not nc]
    code = 1 if failed else 0
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "command": args.command,
        "config_hash": cfg.digest(),
        "master_seed": cfg.master_seed,
        "workers": workers,
        "started": started,
        "finished": time.time(),
        "reports": {k: os.path.basename(v) for k, v in w.written.items()},
        "verdicts": {lab: {"verdict": v, "negative_control": nc} for lab, v, nc in verdicts},
        "diagnostics": diag,
        "config": cfg.model_dump(mode="json"),
        "exit_code": code,
    }
    w.json("manifest", "manifest.json", manifest, force=True)
    return code


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
