"""Calibration pilot: shape-consistency ablation at candidate configs.

Not part of the test suite; run manually to pick the acceptance config.
"""

import sys
import time

import numpy as np

from voxelcycle.evaluation import (ExperimentSetup, ambiguity_check, CyclicShift,
                                   evaluate_s_scores, train_aux_segmentor,
                                   train_shape_ablation_pair)
from voxelcycle.phantom import PhantomSpec
from voxelcycle.trainer import TrainConfig

from dataclasses import replace


def main(seeds, cfg):
    setup = ExperimentSetup()
    data_a, data_b = setup.train_datasets()
    test_a, test_b = setup.test_datasets()

    t0 = time.time()
    aux_cfg = replace(cfg, seed=cfg.seed + 999)
    aux_a = train_aux_segmentor(aux_cfg, "seg_a", data_a)
    aux_b = train_aux_segmentor(aux_cfg, "seg_b", data_b)
    print(f"aux segmentors trained in {time.time()-t0:.0f}s", flush=True)

    wins_ab = wins_ba = 0
    shape_wins = 0
    for seed in seeds:
        t0 = time.time()
        seeded = replace(cfg, seed=seed)
        gamma0, gamma1 = train_shape_ablation_pair(seeded, data_a, data_b)
        s0 = evaluate_s_scores(gamma0, test_a, test_b, aux_a, aux_b)
        s1 = evaluate_s_scores(gamma1, test_a, test_b, aux_a, aux_b)
        rep = ambiguity_check(gamma1.gen_ab, gamma1.gen_ba, gamma1.seg_a,
                              gamma1.seg_b, CyclicShift((4, 0, 0)), test_a, test_b)
        wins_ab += s1["s_score_a2b"] > s0["s_score_a2b"]
        wins_ba += s1["s_score_b2a"] > s0["s_score_b2a"]
        shape_wins += rep.shape_wrapped > rep.shape_original
        print(f"seed {seed}: g0 a2b={s0['s_score_a2b']:.3f} b2a={s0['s_score_b2a']:.3f} | "
              f"g1 a2b={s1['s_score_a2b']:.3f} b2a={s1['s_score_b2a']:.3f} | "
              f"shape orig={rep.shape_original:.3f} wrap={rep.shape_wrapped:.3f} | "
              f"cycle gap={abs(rep.cycle_wrapped-rep.cycle_original):.1e} | "
              f"{time.time()-t0:.0f}s", flush=True)
    print(f"wins a2b {wins_ab}/{len(seeds)}  b2a {wins_ba}/{len(seeds)}  "
          f"shape-wrap wins {shape_wins}/{len(seeds)}")


if __name__ == "__main__":
    cfg = TrainConfig(
        base_filters=int(sys.argv[1]) if len(sys.argv) > 1 else 4,
        lr_gan=float(sys.argv[2]) if len(sys.argv) > 2 else 1e-3,
        lr_seg=float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3,
        epochs_pretrain_seg=int(sys.argv[4]) if len(sys.argv) > 4 else 12,
        epochs_pretrain_gan=int(sys.argv[5]) if len(sys.argv) > 5 else 8,
        epochs_joint=int(sys.argv[6]) if len(sys.argv) > 6 else 8,
        epochs_decay=int(sys.argv[7]) if len(sys.argv) > 7 else 4,
    )
    n_seeds = int(sys.argv[8]) if len(sys.argv) > 8 else 2
    print(cfg)
    main(list(range(n_seeds)), cfg)
