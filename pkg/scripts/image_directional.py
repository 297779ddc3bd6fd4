"""Single-step FGSM against trained layer-skip and 2D masked-conv victims.

Prints, per victim and epsilon, the best-over-lambda LGM accuracy next to
the FGM accuracy for every seed, and the paired win count LGM <= FGM.
"""

import time

from _common import parser, save

from dynattack.experiments import image_preset, metric_table, paired_wins, run_experiment


def main():
    args = parser(__doc__).parse_args()
    t0 = time.time()
    for arch in ("layer_skip", "sparse2d"):
        cfg = image_preset(arch, range(args.seeds))
        reports = run_experiment(cfg, jobs=args.jobs)
        table = metric_table(reports)
        print(f"== {arch}  ({save(reports, args.out, f'images-{arch}')})")
        for eps in cfg.attack.epsilons:
            f, l_ = table[("fgm", eps)], table[("lgm", eps)]
            wins, n = paired_wins(table, "lgm", "fgm", eps)
            cells = " ".join(f"{l_[s]:.3f}/{f[s]:.3f}" for s in sorted(f))
            print(f"eps {eps:>4}: LGM<=FGM {wins}/{n}   lgm/fgm per seed: {cells}")
    print(f"elapsed {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
