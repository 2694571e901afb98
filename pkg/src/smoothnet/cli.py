"""Command-line front end.

    smoothnet [--config FILE] [--out DIR] [--seed N] [--threads N] COMMAND

Commands: verify-activations, build, eval, scale, lowerbound, learn. The
config file holds one ``key = value`` pair per line, keys namespaced by
command (``build.eps = 0.1``); ``#`` starts a comment. Exit codes: 0 success,
2 certification or acceptance failure, 3 config error, 4 infeasible budget.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import activations as acts
from . import analysis as an
from . import construct as cs
from . import learn as lr
from . import linfweights as lw
from . import netcore as nc
from . import report as rp
from .errors import BudgetInfeasible, CertificationFailed, ConfigError, PreconditionFailed, SmoothNetError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BUDGET = 0, 2, 3, 4


# ------------------------------------------------------------------ config

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


_ACT = _choice("sigmoid", "tanh_shifted", "silu", "gelu")
_TARGET = _choice("sine", "half_square")

# key -> (parser, default); a default of ``None`` with ``required`` below means the key must be given.
SCHEMA: dict[str, tuple[Callable, object]] = {
    "verify.sigmoid.tail_constant": (_opt_float, None),
    "verify.tanh_shifted.tail_constant": (_opt_float, None),
    "verify.silu.tail_constant": (_opt_float, None),
    "verify.gelu.tail_constant": (_opt_float, None),
    "build.target": (_TARGET, None),
    "build.s": (float, None),
    "build.eps": (float, None),
    "build.mode": (_choice("l2", "linf"), None),
    "build.d": (int, 1),
    "build.activation": (_ACT, "sigmoid"),
    "build.C_cal": (_opt_float, None),
    "build.K": (_opt_int, None),
    "build.n_samples": (int, 1000000),
    "build.grid_factor": (float, 10.0),
    "build.max_grid_points": (int, 2000000),
    "eval.net": (str, None),
    "eval.target": (_TARGET, "sine"),
    "eval.s": (float, 2.0),
    "eval.metric": (_choice("l2", "linf"), "l2"),
    "eval.n_samples": (int, 1000000),
    "eval.spacing": (float, 1e-3),
    "scale.mode": (_choice("l2", "linf"), "l2"),
    "scale.target": (_TARGET, "sine"),
    "scale.s": (float, 2.0),
    "scale.d": (int, 1),
    "scale.activation": (_ACT, "sigmoid"),
    "scale.ladder": (_floats, (0.2, 0.14, 0.1, 0.07, 0.05)),
    "scale.C_cal": (_opt_float, 32.0),
    "scale.n_samples": (int, 1000000),
    "scale.grid_factor": (float, 10.0),
    "lowerbound.K_max": (int, 8),
    "lowerbound.resolution": (int, 4096),
    "lowerbound.n_nets": (int, 500),
    "lowerbound.L_max": (int, 4),
    "lowerbound.M_max": (int, 8),
    "learn.preset": (_choice(*sorted(lr.PRESETS)), "desk"),
    "learn.raw_target": (_bool, False),
    "learn.epochs": (_opt_int, None),
    "learn.runs": (_opt_int, None),
    "learn.width": (_opt_int, None),
    "learn.ns": (_ints, ()),
    "learn.slack": (float, 0.05),
}
REQUIRED = {"build": ("build.target", "build.s", "build.eps", "build.mode"), "eval": ("eval.net",)}


@dataclass
class RunConfig:
    values: dict
    given: dict  # key -> line number

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values, given = {}, {}
        for no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {no}: expected key = value, got {raw.strip()!r}")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"line {no}: unknown key {key!r}")
            if key in given:
                raise ConfigError(f"line {no}: duplicate key {key!r} (first on line {given[key]})")
            try:
                values[key] = SCHEMA[key][0](val)
            except ValueError as exc:
                raise ConfigError(f"line {no}: bad value for {key}: {exc}") from exc
            given[key] = no
        return cls(values, given)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls({}, {})
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text)

    def section(self, name: str) -> dict:
        """Every key of the section, defaults filled in; required keys must be present."""
        for key in REQUIRED.get(name, ()):
            if key not in self.values:
                last = max(self.given.values(), default=0)
                raise ConfigError(f"line {last + 1}: missing required key {key!r}")
        pre = name + "."
        return {k: self.values.get(k, default) for k, (_, default) in SCHEMA.items() if k.startswith(pre)}


# ----------------------------------------------------------------- helpers

def _target(name: str, s: float, d: int) -> cs.TargetFunction:
    if name == "half_square":
        if d != 1:
            raise ConfigError("half_square is one-dimensional")
        return cs.half_square()
    return cs.normalized_sine(s, d)


def _build(mode: str, act, f, s: float, eps: float, C_cal=None, K=None):
    ref = acts.find_reference_point(act, max(4, math.ceil(s), f.d))
    if mode == "l2":
        return cs.build_l2_approximator(act, ref, f, s, eps, C_cal)
    return lw.build_linf_approximator(act, ref, f, s, eps, C_cal, K=K)


def _measure(mode: str, net, f, n_samples: int, seed: int, spacing: float):
    if mode == "l2":
        err, _ = an.mc_l2_error(net, f, n_samples, seed, f.d)
        return err
    err, _ = an.sup_error_on_grid(net, f, None, spacing, f.d)
    return err


def _linf_spacing(net, grid_factor: float, d: int, cap: int) -> float:
    """delta / grid_factor; grids of more than ``cap`` points are refused."""
    sp = net.meta["delta"] / grid_factor
    if (1 / sp + 1) ** d > cap:
        raise ConfigError(f"certification grid of spacing {sp:.3g} exceeds {cap} points; "
                          "raise build.max_grid_points or lower build.grid_factor")
    return sp


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _budget_facts(budget) -> list[tuple[str, object]]:
    facts = [("K", budget.K), ("delta", budget.delta), ("C_cal", budget.C_cal), ("eps_eff", budget.eps_eff)]
    facts += [(f"split.{k}", v) for k, v in budget.splits.items() if isinstance(v, (int, float))]
    return facts


# ---------------------------------------------------------------- commands

def cmd_verify_activations(cfg: RunConfig, args) -> int:
    sec = cfg.section("verify")
    rows, failed = [], []
    for act in acts.SMOOTH:
        c = sec[f"verify.{act.name}.tail_constant"]
        try:
            r = acts.verify_tail_class(act, tail_constant=c)
            rows.append((act.name, r.tail_class.value, r.tail_constant, r.implied_constant, r.witness, "certified"))
        except CertificationFailed as exc:
            failed.append(act.name)
            cc = act.tail_constant if c is None else c
            rows.append((act.name, act.tail_class.value, cc, float("nan"), exc.witness, "FAILED"))
            print(f"FAILED {act.name}: {exc}")
    out = _out(args)
    rp.write_csv(out / "activations.csv",
                 ("activation", "tail_class", "tail_constant", "implied_constant", "witness", "status"), rows)
    print(f"{'activation':14s} {'class':15s} {'C':>10s} {'implied':>12s} {'witness':>10s}")
    for a, tc, c, imp, w, st in rows:
        print(f"{a:14s} {tc:15s} {c:10.6g} {imp:12.6g} {w:10.4g}  {st}")
    print("lipschitz: " + ", ".join(f"{a.name}={a.lipschitz:g}" for a in acts.SMOOTH))
    rp.write_manifest(out / "MANIFEST", "verify-activations", args.seed, args.threads, sec,
                      [(f"failed.{n}", True) for n in failed])
    return EXIT_FAIL if failed else EXIT_OK


def cmd_build(cfg: RunConfig, args) -> int:
    sec = cfg.section("build")
    act = acts.get(sec["build.activation"])
    s, eps, d, mode = sec["build.s"], sec["build.eps"], sec["build.d"], sec["build.mode"]
    f = _target(sec["build.target"], s, d)
    t0 = time.perf_counter()
    net, budget = _build(mode, act, f, s, eps, sec["build.C_cal"], sec["build.K"])
    if mode == "l2":
        err, se = an.mc_l2_error(net, f, sec["build.n_samples"], args.seed, d)
        metric = "mc_l2"
    else:
        sp = _linf_spacing(net, sec["build.grid_factor"], d, sec["build.max_grid_points"])
        err, _ = an.sup_error_on_grid(net, f, None, sp, d)
        se, metric = 0.0, "grid_sup"
    ms = int(round(1000 * (time.perf_counter() - t0)))
    out = _out(args)
    nc.save(net, out / "network.net")
    nr = nc.norms(net)
    ok = err <= eps
    expected_depth = 6 if mode == "l2" else 7
    rp.write_csv(out / "build.csv", ("mode", "activation", "eps", "metric", "error", "stderr", "K", "width",
                                     "depth", "expected_depth", "linf_norm", "params", "certified"),
                 [(mode, act.name, eps, metric, err, se, budget.K, net.width, net.depth, expected_depth,
                   nr.linf, nr.param_count, ok)])
    print(f"{'certified' if ok else 'NOT certified'}: error {err:.4g} {'<=' if ok else '>'} {eps:g} ({metric})")
    print(f"depth {net.depth} (schedule {expected_depth}), width {net.width}, K {budget.K}, "
          f"max |weight| {nr.linf:.4g}, parameters {nr.param_count}")
    rp.write_manifest(out / "MANIFEST", "build", args.seed, args.threads, sec,
                      _budget_facts(budget) + [("runtime_ms", ms)])
    return EXIT_OK if ok else EXIT_FAIL


def cmd_eval(cfg: RunConfig, args) -> int:
    sec = cfg.section("eval")
    try:
        net = nc.load(sec["eval.net"])
    except OSError as exc:
        raise ConfigError(f"cannot read network {sec['eval.net']}: {exc}") from exc
    f = _target(sec["eval.target"], sec["eval.s"], net.d_in)
    if sec["eval.metric"] == "l2":
        err, se = an.mc_l2_error(net, f, sec["eval.n_samples"], args.seed, net.d_in)
    else:
        err, _ = an.sup_error_on_grid(net, f, None, sec["eval.spacing"], net.d_in)
        se = 0.0
    out = _out(args)
    rp.write_csv(out / "eval.csv", ("metric", "error", "stderr", "width", "depth"),
                 [(sec["eval.metric"], err, se, net.width, net.depth)])
    print(f"{sec['eval.metric']} error {err:.6g} (stderr {se:.2g}); width {net.width}, depth {net.depth}")
    rp.write_manifest(out / "MANIFEST", "eval", args.seed, args.threads, sec)
    return EXIT_OK


def cmd_scale(cfg: RunConfig, args) -> int:
    sec = cfg.section("scale")
    act = acts.get(sec["scale.activation"])
    mode, s, d = sec["scale.mode"], sec["scale.s"], sec["scale.d"]
    f = _target(sec["scale.target"], s, d)
    budgets = {}

    def build(eps):
        net, budgets[eps] = _build(mode, act, f, s, eps, sec["scale.C_cal"])
        return net

    def measure(eps, net):
        sp = net.meta["delta"] / sec["scale.grid_factor"] if mode == "linf" else 0.0
        return _measure(mode, net, f, sec["scale.n_samples"], args.seed, sp)

    rows = an.run_scaling_study(sec["scale.ladder"], build, measure)
    out = _out(args)
    an.rows_to_csv(rows, out / "scale.csv", exclude=("runtime_ms",))
    notes, facts = [], []
    if len({r.width for r in rows}) >= 2:
        slope, _, r2 = an.fit_log_slope([(r.width, r.measured_error) for r in rows])
        notes = [f"slope {slope:.3f}", f"r2 {r2:.3f}"]
        facts = [("fit.slope", slope), ("fit.r2", r2)]
        print(f"fitted slope of error vs width: {slope:.4f} (r2 {r2:.3f}); theory -2s/d = {-2 * s / d:g}")
    rp.write_svg(out / "scale.svg", {f"{act.name} {mode}": [(r.width, r.measured_error) for r in rows]},
                 title=f"{mode} error vs width", xlabel="width", ylabel="error", notes=notes)
    failed = [r for r in rows if r.measured_error > r.control]
    for r in rows:
        print(f"eps {r.control:<6g} error {r.measured_error:.4g} width {r.width} depth {r.depth} "
              f"max|w| {r.linf_norm:.3g} {'ok' if r.measured_error <= r.control else 'FAIL'}")
    facts += [(f"runtime_ms.{r.control:g}", r.runtime_ms) for r in rows]
    for eps, b in budgets.items():
        facts += [(f"eps{eps:g}.{k}", v) for k, v in _budget_facts(b)]
    rp.write_manifest(out / "MANIFEST", "scale", args.seed, args.threads, sec, facts)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_lowerbound(cfg: RunConfig, args) -> int:
    sec = cfg.section("lowerbound")
    out = _out(args)
    ok = True
    lin = an.best_linear_sq_error(1.0)
    ok &= abs(lin - 1 / 180) <= 1e-15
    dp_rows = []
    for K in range(1, sec["lowerbound.K_max"] + 1):
        dp = an.best_pwl_sq_error_dp(K, sec["lowerbound.resolution"])
        closed = K**-4 / 720
        dp_rows.append((K, dp, closed, dp / closed))
        ok &= abs(dp / closed - 1) <= 0.01
    rp.write_csv(out / "lowerbound_dp.csv", ("K", "dp_sq_error", "closed_form", "ratio"), dp_rows)
    rng = np.random.default_rng(args.seed)
    piece_rows = []
    for i in range(sec["lowerbound.n_nets"]):
        L = int(rng.integers(2, sec["lowerbound.L_max"] + 1))
        M = int(rng.integers(1, sec["lowerbound.M_max"] + 1))
        net = an.random_relu_net(rng, L, M)
        k = an.extract_pwl_profile(net).n_pieces
        bound = an.piece_count_bound(M, L)
        piece_rows.append((i, L, M, k, bound, k <= bound))
        ok &= k <= bound
    rp.write_csv(out / "piece_counts.csv", ("net", "L", "M", "pieces", "bound", "within"), piece_rows)
    rp.write_svg(out / "lowerbound.svg",
                 {"DP optimum": [(r[0], r[1]) for r in dp_rows], "K^-4/720": [(r[0], r[2]) for r in dp_rows]},
                 title="best squared L2 error of K-piece linear fits to x^2/2", xlabel="pieces K",
                 ylabel="squared error")
    worst = max(abs(r[3] - 1) for r in dp_rows)
    print(f"linear fit to x^2 on unit interval: {lin:.17g} (1/180 = {1 / 180:.17g})")
    print(f"DP vs closed form: max relative deviation {worst:.3g} over K <= {sec['lowerbound.K_max']}")
    print(f"piece counts: {sum(r[5] for r in piece_rows)}/{len(piece_rows)} within (M+1)^(L-1)")
    rp.write_manifest(out / "MANIFEST", "lowerbound", args.seed, args.threads, sec,
                      [("dp.max_rel_dev", worst), ("passed", ok)])
    return EXIT_OK if ok else EXIT_FAIL


def cmd_learn(cfg: RunConfig, args) -> int:
    sec = cfg.section("learn")
    preset = lr.PRESETS[sec["learn.preset"]]
    over = {}
    if sec["learn.raw_target"] or args.raw_target:
        over["normalize_target"] = False
    for key, field_ in (("learn.epochs", "epochs"), ("learn.runs", "runs"), ("learn.width", "width")):
        if sec[key] is not None:
            over[field_] = sec[key]
    if sec["learn.ns"]:
        over["ns"] = sec["learn.ns"]
    preset = replace(preset, **over)
    t0 = time.perf_counter()
    res = lr.run_separation_experiment(preset, args.seed, workers=args.threads)
    ms = int(round(1000 * (time.perf_counter() - t0)))
    out = _out(args)
    rp.write_csv(out / "learn_records.csv", ("activation", "n", "run", "eta", "lambda", "gen_error"), res.records)
    rp.write_csv(out / "learn_cells.csv", ("activation", "n", "run", "eta", "lambda", "gen_error", "diverged"),
                 res.cells)
    rp.write_csv(out / "learn_summary.csv", ("activation", "alpha", "r2"),
                 [(a, v[0], v[1]) for a, v in res.summary.items()])
    rp.write_svg(out / "learn.svg", {f"{a} (alpha {v[0]:.2f})": list(zip(preset.ns, v[2]))
                                     for a, v in res.summary.items()},
                 title="generalization error vs sample size", xlabel="n", ylabel="test MSE")
    ok = True
    base = res.summary.get("relu")
    for a, (alpha, r2, means) in res.summary.items():
        print(f"{a:14s} alpha {alpha:.4f} r2 {r2:.3f} errors " + " ".join(f"{m:.4g}" for m in means))
    if base is not None and len(preset.ns) >= 2:
        smooth = [a for a in res.summary if a != "relu"]
        checks = []
        for a in smooth:
            alpha_ok = res.summary[a][0] >= base[0] - sec["learn.slack"]
            below = res.summary[a][2][-1] <= base[2][-1]
            checks.append(alpha_ok and below)
        ok = all(checks)
        print("ordering: " + ", ".join(f"alpha({a}) >= alpha(relu) - {sec['learn.slack']:g}" for a in smooth)
              + f" and errors below relu at n={preset.ns[-1]}: {'yes' if ok else 'no'}")
    rp.write_manifest(out / "MANIFEST", "learn", args.seed, args.threads, sec,
                      [("normalize_target", preset.normalize_target), ("epochs", preset.epochs),
                       ("width", preset.width), ("runs", preset.runs), ("runtime_ms", ms), ("ordering_holds", ok)])
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "verify-activations": cmd_verify_activations,
    "build": cmd_build,
    "eval": cmd_eval,
    "scale": cmd_scale,
    "lowerbound": cmd_lowerbound,
    "learn": cmd_learn,
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="smoothnet", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="smoothnet_out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--raw-target", action="store_true",
                    help="learn: use the unnormalized random-feature target")
    args = ap.parse_args(argv)
    if args.seed < 0 or args.threads < 1:
        print("error: --seed must be nonnegative and --threads positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = RunConfig.load(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, PreconditionFailed) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetInfeasible as exc:
        print(f"infeasible budget: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except SmoothNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
