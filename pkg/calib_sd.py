"""Calibration: acceptance criterion 5 (SD raises consistency overlap)."""
import sys
import time

import numpy as np

from trinuseg.labels import generate_dataset
from trinuseg.model import ModelConfig
from trinuseg.training import TrainConfig, mean_consistency_fraction, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20

cfg = ModelConfig(input_size=64, embed_dim=48, encoder_depths=(1, 1, 1),
                  decoder_depths=(1, 1, 1), heads_per_stage=(3, 6, 12),
                  window_size=4)
dataset = generate_dataset(5, 64, size=64, n_instances=7,
                           cluster_probability=0.4)

t0 = time.time()
for sd in (True, False):
    fracs = []
    for seed in (0, 1, 2):
        tc = TrainConfig(epochs=epochs, batch_size=4, seed=seed,
                         eval_every=0, sd_enabled=sd)
        outcome = train(cfg, tc, dataset)
        frac = mean_consistency_fraction(outcome.model, outcome.test_samples)
        fracs.append(frac)
        print(f"sd={sd} seed={seed} overlap={frac:.4f} "
              f"({time.time()-t0:.0f}s)", flush=True)
    print(f"sd={sd}: median {np.median(fracs):.4f} over {fracs}", flush=True)
