"""Optimization loop, ablation grid, evaluation orchestration.

Training is deterministic per seed: model init, the 80/20 split and the
per-epoch sample order all derive from ``TrainConfig.seed``, there is no
augmentation, and every step is plain Adam on the multi-task objective.
The self-distillation toggle (``sd_enabled``) zeroes the distillation
weight and keeps the term out of the gradient graph while still recording
its value for monitoring.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch import optim

from .checkpoint import Checkpoint, save_checkpoint
from .labels import Sample
from .losses import LossWeights, gamma_sd_schedule, total_loss
from .metrics import (
    METRIC_NAMES,
    MetricsReport,
    aggregate_reports,
    binary_to_instances,
    consistency_overlap,
    error_count,
    object_f1,
    pixel_metrics,
)
from .model import ModelConfig, TriDecoderNet, build_model

HISTORY_COLUMNS = ("epoch", "l_n", "l_e", "l_c", "l_sd", "gamma_sd", "total",
                   *METRIC_NAMES)


class TrainingDivergedError(RuntimeError):
    """Raised when a loss term becomes non-finite during training."""

    def __init__(self, term: str, epoch: int, value: float):
        super().__init__(
            f"training diverged at epoch {epoch}: loss term {term!r} is "
            f"non-finite ({value})")
        self.term = term
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings, ablation toggles and data orchestration knobs."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0
    sd_enabled: bool = True
    sd_detach_nuclei: bool = False
    train_fraction: float = 0.8
    eval_every: int = 10
    data_root: str = ""

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError(
                f"train_fraction must lie in (0, 1], got {self.train_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainOutcome:
    model: TriDecoderNet
    history: list[dict]
    train_samples: list[Sample]
    test_samples: list[Sample]
    checkpoint: Checkpoint | None = None
    checkpoint_path: str | None = None


def split_dataset(samples: list[Sample], seed: int,
                  train_fraction: float = 0.8) -> tuple[list[Sample], list[Sample]]:
    """Seeded random split; the train side always keeps at least one sample."""
    perm = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_fraction * len(samples)))
    n_train = min(max(n_train, 1), len(samples))
    train = [samples[i] for i in perm[:n_train]]
    test = [samples[i] for i in perm[n_train:]]
    return train, test


def _stack_tensors(samples: list[Sample]):
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    stacks = np.stack([s.labels.stacked() for s in samples])  # N, 3, H, W
    targets = torch.from_numpy(stacks)
    return images, targets[:, 0], targets[:, 1], targets[:, 2]


def _check_finite(breakdown, epoch: int) -> None:
    values = breakdown.as_floats()
    for term in ("l_n", "l_e", "l_c", "l_sd", "total"):
        if not np.isfinite(values[term]):
            raise TrainingDivergedError(term, epoch, values[term])


def train(model_config: ModelConfig, train_config: TrainConfig,
          dataset: list[Sample], out_dir: str | None = None,
          loss_weights: LossWeights = LossWeights(),
          log=None) -> TrainOutcome:
    """Run the full loop; returns the trained model, history and checkpoint.

    When ``out_dir`` is given, writes ``checkpoint.zip`` and ``history.csv``
    there.  Raises TrainingDivergedError naming the first non-finite loss
    term if the optimization blows up.
    """
    model_config.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    torch.manual_seed(train_config.seed)
    model = build_model(model_config, seed=train_config.seed)
    opt = optim.Adam(model.parameters(), lr=train_config.learning_rate,
                     betas=(train_config.beta1, train_config.beta2))
    train_s, test_s = split_dataset(dataset, train_config.seed,
                                    train_config.train_fraction)
    images, t_n, t_e, t_c = _stack_tensors(train_s)
    n = len(train_s)
    order_rng = np.random.default_rng(train_config.seed + 1)

    history: list[dict] = []
    for epoch in range(train_config.epochs):
        model.train()
        perm = order_rng.permutation(n)
        sums = {k: 0.0 for k in ("l_n", "l_e", "l_c", "l_sd", "total")}
        for start in range(0, n, train_config.batch_size):
            idx = torch.from_numpy(perm[start:start + train_config.batch_size])
            pred = model(images[idx])
            breakdown = total_loss(
                pred, (t_n[idx], t_e[idx], t_c[idx]), epoch,
                weights=loss_weights,
                sd_enabled=train_config.sd_enabled,
                detach_nuclei=train_config.sd_detach_nuclei)
            _check_finite(breakdown, epoch)
            opt.zero_grad(set_to_none=True)
            breakdown.total.backward()
            opt.step()
            values = breakdown.as_floats()
            for k in sums:
                sums[k] += values[k] * len(idx)
        record = {"epoch": epoch,
                  **{k: sums[k] / n for k in sums},
                  "gamma_sd": gamma_sd_schedule(epoch)
                  if train_config.sd_enabled else 0.0}
        is_last = epoch == train_config.epochs - 1
        due = train_config.eval_every > 0 \
            and (epoch + 1) % train_config.eval_every == 0
        if test_s and (due or is_last):
            report, _ = evaluate_model(model, test_s)
            record.update(report.as_dict())
            record.pop("n_images", None)
        history.append(record)
        if log is not None:
            log(record)

    outcome = TrainOutcome(model=model, history=history,
                           train_samples=train_s, test_samples=test_s)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.zip")
        save_checkpoint(ckpt_path, model,
                        train_config=train_config.to_dict(),
                        epoch=train_config.epochs, history=history)
        write_history_csv(os.path.join(out_dir, "history.csv"), history)
        outcome.checkpoint_path = ckpt_path
        outcome.checkpoint = Checkpoint(
            model_config=model_config, train_config=train_config.to_dict(),
            epoch=train_config.epochs, history=history, path=ckpt_path)
    return outcome


def write_history_csv(path: str, history: list[dict]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in HISTORY_COLUMNS})


def evaluate_model(model: TriDecoderNet, samples: list[Sample],
                   overlay_dir: str | None = None
                   ) -> tuple[MetricsReport, list[dict]]:
    """Metrics of the nuclei branch per image, averaged; weights untouched.

    With ``overlay_dir``, writes the edge-consistency overlay (edge branch
    green, nuclei contour red, overlap yellow) per image as PNG.
    """
    from PIL import Image

    rows = []
    for sample in samples:
        pred = model.predict(sample.image[None])
        masks = pred.binary_masks()
        nuclei = masks["nuclei"][0]
        edge = masks["edge"][0]
        dsc, iou, acc = pixel_metrics(nuclei, sample.labels.nuclei)
        f1 = object_f1(binary_to_instances(nuclei), sample.instances)
        ercnt = error_count(nuclei, sample.instances)
        rows.append({"id": sample.sample_id, "dsc": dsc, "iou": iou,
                     "acc": acc, "f1": f1, "ercnt": ercnt})
        if overlay_dir is not None:
            os.makedirs(overlay_dir, exist_ok=True)
            overlap = consistency_overlap(nuclei, edge)
            Image.fromarray(overlap.overlay).save(
                os.path.join(overlay_dir, f"{sample.sample_id or 'image'}.png"))
    return aggregate_reports(rows), rows


def mean_consistency_fraction(model: TriDecoderNet,
                              samples: list[Sample]) -> float:
    """Mean overlap fraction between edge predictions and nuclei contours.

    Images where both the contour and the edge prediction are empty carry no
    consistency signal and are skipped; all-degenerate scores 0.
    """
    fractions = []
    for sample in samples:
        masks = model.predict(sample.image[None]).binary_masks()
        overlap = consistency_overlap(masks["nuclei"][0], masks["edge"][0])
        if not overlap.degenerate:
            fractions.append(overlap.frac_overlap)
    return float(np.mean(fractions)) if fractions else 0.0


# ---------------------------------------------------------------------------
# Ablation grid (MLP x AS x SD)
# ---------------------------------------------------------------------------

# All toggle combinations, heaviest off first, full settings last.
ABLATION_GRID = tuple(
    (bool(mlp), bool(sharing), bool(sd))
    for sd in (0, 1) for sharing in (0, 1) for mlp in (0, 1)
)


def run_ablation_grid(model_config: ModelConfig, train_config: TrainConfig,
                      dataset: list[Sample], out_dir: str | None = None,
                      log=None) -> tuple[list[dict], list[dict]]:
    """Train the 8 MLP/AS/SD combinations with shared seeds.

    Returns (results_rows, complexity_rows): per-combination test metrics
    and the params/FLOPs table over the 4 MLP x AS combinations.  Writes
    ``ablation_results.csv`` and ``ablation_complexity.csv`` when ``out_dir``
    is given.
    """
    from .model import complexity_grid

    results = []
    for mlp, sharing, sd in ABLATION_GRID:
        variant = model_config.with_toggles(mlp=mlp, sharing=sharing)
        tc = replace(train_config, sd_enabled=sd)
        outcome = train(variant, tc, dataset)
        eval_samples = outcome.test_samples or outcome.train_samples
        report, _ = evaluate_model(outcome.model, eval_samples)
        row = {"mlp": mlp, "attention_sharing": sharing, "sd": sd,
               **{k: getattr(report, k) for k in METRIC_NAMES}}
        results.append(row)
        if log is not None:
            log(row)

    complexity_rows = complexity_grid(model_config)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation_results.csv"), "w",
                  newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["mlp", "attention_sharing", "sd",
                                *METRIC_NAMES])
            writer.writeheader()
            writer.writerows(results)
        with open(os.path.join(out_dir, "ablation_complexity.csv"), "w",
                  newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["name", "mlp", "attention_sharing",
                                "params", "params_millions", "flops",
                                "flops_giga", "input_size"])
            writer.writeheader()
            writer.writerows(complexity_rows)
    return results, complexity_rows


def format_ablation_table(results: list[dict]) -> str:
    header = (f"{'MLP':<5} {'AS':<5} {'SD':<5} "
              f"{'DSC':>7} {'F1':>7} {'Acc':>7} {'IoU':>7} {'ErCnt':>7}")
    lines = [header, "-" * len(header)]
    for row in results:
        lines.append(
            f"{str(row['mlp']):<5} {str(row['attention_sharing']):<5} "
            f"{str(row['sd']):<5} {row['dsc']:>7.2f} {row['f1']:>7.2f} "
            f"{row['acc']:>7.2f} {row['iou']:>7.2f} {row['ercnt']:>7.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def _parse_flat_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip().strip('"').strip("'")


def load_config_file(path: str) -> tuple[ModelConfig, TrainConfig]:
    """Read a flat key=value or JSON config into the two config objects.

    Keys are the field names of ModelConfig and TrainConfig (disjoint sets);
    unknown keys are rejected.
    """
    with open(path) as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
    else:
        data = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, raw = line.partition("=")
            data[key.strip()] = _parse_flat_value(raw.strip())

    model_fields = set(ModelConfig.__dataclass_fields__)
    train_fields = set(TrainConfig.__dataclass_fields__)
    model_data, train_data = {}, {}
    for key, value in data.items():
        if key in model_fields:
            model_data[key] = value
        elif key in train_fields:
            train_data[key] = value
        else:
            raise ValueError(f"unknown config key {key!r} in {path}")
    return ModelConfig.from_dict(model_data), TrainConfig.from_dict(train_data)
