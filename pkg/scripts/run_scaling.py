"""Error against width over an eps ladder, L2 (Monte Carlo) or sup norm (dense grid).

    python scripts/run_scaling.py [--mode l2|linf] [--activation sigmoid] [--out DIR]
"""

import argparse
from pathlib import Path

from smoothnet import activations as acts
from smoothnet import analysis as an
from smoothnet import construct as cs
from smoothnet import linfweights as lw
from smoothnet import report as rp


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mode", choices=("l2", "linf"), default="l2")
    ap.add_argument("--activation", default="sigmoid")
    ap.add_argument("--ladder", default="0.2,0.14,0.1,0.07,0.05")
    ap.add_argument("--C-cal", type=float, default=32.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/scaling")
    args = ap.parse_args()
    act = acts.get(args.activation)
    ref = acts.find_reference_point(act, 4)
    f = cs.normalized_sine(2, 1)
    ladder = [float(v) for v in args.ladder.split(",")]

    if args.mode == "l2":
        build = lambda eps: cs.build_l2_approximator(act, ref, f, 2, eps, C_cal=args.C_cal)[0]  # noqa: E731
        measure = lambda eps, net: an.mc_l2_error(net, f, 10**6, seed=args.seed)[0]  # noqa: E731
    else:
        build = lambda eps: lw.build_linf_approximator(act, ref, f, 2, eps)[0]  # noqa: E731
        measure = lambda eps, net: an.sup_error_on_grid(net, f, None, net.meta["delta"] / 10)[0]  # noqa: E731

    rows = an.run_scaling_study(ladder, build, measure)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    an.rows_to_csv(rows, out / f"{args.mode}_{act.name}.csv", exclude=("runtime_ms",))
    for r in rows:
        print(f"eps {r.control:<6g} error {r.measured_error:.4g} width {r.width} depth {r.depth} "
              f"{r.runtime_ms} ms")
    if len({r.width for r in rows}) >= 2:
        slope, _, r2 = an.fit_log_slope([(r.width, r.measured_error) for r in rows])
        print(f"slope of error against width {slope:.3f} (r2 {r2:.3f})")
    rp.write_svg(out / f"{args.mode}_{act.name}.svg", {act.name: [(r.width, r.measured_error) for r in rows]},
                 title=f"{args.mode} error vs width", xlabel="width", ylabel="error")


if __name__ == "__main__":
    main()
