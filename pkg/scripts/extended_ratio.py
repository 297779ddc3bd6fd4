"""Extended-voxel-set size M'/M on the default synthetic clouds for step
budgets across the swept alpha range."""

import numpy as np

from dynattack.data import make_synthetic_clouds
from dynattack.experiments import cloud_preset
from dynattack.occupancy import build_extended_voxels, voxelize


def main():
    cfg = cloud_preset()
    data = make_synthetic_clouds(cfg.dataset.kind, 16, seed=0, split="test")
    L = cfg.victim.voxel_size
    for alpha in (0.0005, 0.001, 0.0025) + tuple(cfg.attack.alphas):
        r = [build_extended_voxels(voxelize(p, L), alpha) for p in data.clouds]
        ratio = np.array([g.n_extended / g.n_voxels for g in r])
        print(f"alpha {alpha:<7} M {np.mean([g.n_voxels for g in r]):7.1f}  "
              f"M'/M mean {ratio.mean():.3f} min {ratio.min():.3f} max {ratio.max():.3f}")


if __name__ == "__main__":
    main()
