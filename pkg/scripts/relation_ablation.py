"""Point attack with only the soft-occupancy relation varied
(sigmoid-like, RBF, bilinear); counts seeds with sigmoid <= RBF <= bilinear."""

import time

from _common import parser, save

from dynattack.experiments import ablation_preset, run_experiment


def main():
    args = parser(__doc__).parse_args()
    t0 = time.time()
    cfg = ablation_preset(range(args.seeds))
    reports = run_experiment(cfg, jobs=args.jobs)
    print(f"reports: {save(reports, args.out, 'ablation')}")
    by_seed: dict = {}
    for r in reports:
        by_seed.setdefault(r.seed, {})[r.relation] = r.post_metric
    ok = 0
    for seed, m in sorted(by_seed.items()):
        good = m["sigmoid_like"] <= m["rbf"] <= m["bilinear"]
        ok += good
        print(f"seed {seed}: " + "  ".join(f"{k} {v:.3f}" for k, v in m.items()) + ("" if good else "  x"))
    print(f"ordered {ok}/{len(by_seed)}   elapsed {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
