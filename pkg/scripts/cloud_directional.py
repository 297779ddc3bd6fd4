"""Iterative point attack on the trained 3D segmenter: LGM vs FGM vs Random.

Best-over-(lambda, alpha) mIoU per epsilon (in voxel sizes) and seed, the
paired ordering counts, and the drop ratio mIoU(eps=L) / mIoU(eps=0.25 L).
"""

import time

from _common import parser, save

from dynattack.experiments import cloud_preset, metric_table, paired_wins, run_experiment


def main():
    args = parser(__doc__).parse_args()
    t0 = time.time()
    cfg = cloud_preset(range(args.seeds))
    reports = run_experiment(cfg, jobs=args.jobs)
    table = metric_table(reports)
    L = cfg.victim.voxel_size
    print(f"reports: {save(reports, args.out, 'clouds')}")
    for frac in cfg.attack.epsilons:
        eps = frac * L
        a, n = paired_wins(table, "lgm", "fgm", eps)
        b, _ = paired_wins(table, "fgm", "random", eps)
        both = sum(table[("lgm", eps)][s] <= table[("fgm", eps)][s] <= table[("random", eps)][s]
                   for s in table[("lgm", eps)])
        print(f"eps {frac}L: LGM<=FGM {a}/{n}  FGM<=Random {b}/{n}  both {both}/{n}")
        for m in ("lgm", "fgm", "random"):
            print(f"   {m:>6}: " + " ".join(f"{table[(m, eps)][s]:.3f}" for s in sorted(table[(m, eps)])))
    lo, hi = table[("lgm", 0.25 * L)], table[("lgm", 1.0 * L)]
    print("drop ratio per seed: " + " ".join(
        f"{hi[s] / lo[s]:.2f}" if lo[s] > 0 else "inf" for s in sorted(lo)))
    print(f"elapsed {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
