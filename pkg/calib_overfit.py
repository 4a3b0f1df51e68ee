"""Calibration: acceptance criterion 4 (overfit capacity), run as-is."""
import time

import numpy as np

from trinuseg.labels import generate_dataset
from trinuseg.metrics import pixel_metrics
from trinuseg.model import ModelConfig
from trinuseg.training import TrainConfig, evaluate_model, train

t0 = time.time()
dataset = generate_dataset(0, 8, size=128, n_instances=12,
                           cluster_probability=0.3)


def log(rec):
    if rec["epoch"] % 10 == 9 or rec["epoch"] < 3:
        print(f"epoch {rec['epoch']:>3d} total {rec['total']:.4f} "
              f"l_n {rec['l_n']:.4f} l_e {rec['l_e']:.4f} "
              f"({time.time()-t0:.0f}s)", flush=True)


tc = TrainConfig(epochs=200, batch_size=4, seed=0, eval_every=0)
outcome = train(ModelConfig(), tc, dataset, log=log)

report, rows = evaluate_model(outcome.model, outcome.train_samples)
print("train-set nuclei DSC:", report.dsc)

edge_dscs = []
for s in outcome.train_samples:
    masks = outcome.model.predict(s.image[None]).binary_masks()
    dsc, _, _ = pixel_metrics(masks["edge"][0], s.labels.edge)
    edge_dscs.append(dsc)
print("train-set edge DSC:", np.mean(edge_dscs))
print("total time:", time.time() - t0)
