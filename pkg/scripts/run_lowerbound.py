"""ReLU lower-bound checks: exact linear fit error of x^2, DP optimum against K^-4/720, piece counts.

    python scripts/run_lowerbound.py [--K-max 8] [--resolution 4096] [--nets 500] [--seed 0]
"""

import argparse

import numpy as np

from smoothnet import analysis as an


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--K-max", type=int, default=8)
    ap.add_argument("--resolution", type=int, default=4096)
    ap.add_argument("--nets", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"best linear L2^2 error of x^2 on [0,1]: {an.best_linear_sq_error(1):.17g} (1/180 = {1 / 180:.17g})")
    for K in range(1, args.K_max + 1):
        dp = an.best_pwl_sq_error_dp(K, args.resolution)
        closed = K ** -4 / 720
        print(f"K {K}: DP {dp:.6e}  K^-4/720 {closed:.6e}  ratio {dp / closed:.6f}")

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.nets):
        L, M = int(rng.integers(2, 5)), int(rng.integers(1, 9))
        pieces = an.extract_pwl_profile(an.random_relu_net(rng, L, M)).n_pieces
        worst = max(worst, pieces / an.piece_count_bound(M, L))
    print(f"{args.nets} random nets: max pieces / (M+1)^(L-1) = {worst:.3f}")


if __name__ == "__main__":
    main()
