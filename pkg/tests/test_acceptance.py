"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v``.  Criteria 4 and 5 train
models on the CPU and take tens of minutes; they are marked ``slow`` but run
by default.
"""

import os
import sys
import time

import numpy as np
import pytest
import torch

from conftest import grad_check_config, tiny_config
from trinuseg.checkpoint import load_checkpoint, save_checkpoint
from trinuseg.labels import (
    InstanceMask,
    derive_label_triplet,
    generate_dataset,
    generate_synthetic_sample,
    save_dataset,
)
from trinuseg.labels import _boundary_pixels
from trinuseg.losses import gamma_sd_schedule, total_loss
from trinuseg.metrics import pixel_metrics
from trinuseg.model import (
    ModelConfig,
    build_model,
    complexity_grid,
    count_parameters,
)
from trinuseg.model.network import TriPrediction
from trinuseg.training import (
    TrainConfig,
    evaluate_model,
    mean_consistency_fraction,
    train,
)

# published reference points for the four bottleneck x sharing variants (x1e6)
PARAM_TARGETS = {"full": 17.82, "wo_as": 21.33,
                 "wo_mlp": 30.82, "wo_mlp_wo_as": 34.33}

# epochs for the self-distillation comparison (criterion 5)
SD_EFFECT_EPOCHS = 60


def report(criterion: int, name: str) -> None:
    line = f"ACCEPTANCE {criterion} [{name}]: PASS"
    print(line, file=sys.__stdout__, flush=True)


def test_acceptance_1_parameter_ablation_structure():
    start = time.time()
    rows = complexity_grid(ModelConfig())
    by_name = {r["name"]: r["params"] for r in rows}

    assert by_name["full"] < by_name["wo_as"] \
        < by_name["wo_mlp"] < by_name["wo_mlp_wo_as"]
    assert by_name["wo_mlp_wo_as"] - by_name["wo_mlp"] \
        == by_name["wo_as"] - by_name["full"]
    assert by_name["wo_mlp_wo_as"] - by_name["wo_as"] \
        == by_name["wo_mlp"] - by_name["full"]
    for name, target_millions in PARAM_TARGETS.items():
        actual = by_name[name] / 1e6
        assert abs(actual - target_millions) / target_millions < 0.15, \
            f"{name}: {actual:.2f}M vs {target_millions}M"
    elapsed = time.time() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s, budget 10s"
    report(1, "parameter ablation structure")


def _parameter_classes(model):
    classes = {"shared_heads": [], "private_heads": [], "output_projection": [],
               "bottleneck_mixers": [], "other": []}
    for name, param in model.named_parameters():
        if "shared_qkv" in name or "shared_bias_table" in name:
            classes["shared_heads"].append((name, param))
        elif "private_qkv" in name or "private_bias_tables" in name:
            classes["private_heads"].append((name, param))
        elif "out_proj" in name:
            classes["output_projection"].append((name, param))
        elif name.startswith("bottleneck."):
            classes["bottleneck_mixers"].append((name, param))
        else:
            classes["other"].append((name, param))
    return classes


def test_acceptance_2_gradient_correctness():
    start = time.time()
    cfg = grad_check_config()
    model = build_model(cfg, seed=0, dtype=torch.float64)
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.random((1, 32, 32, 1)))
    targets = tuple(
        torch.from_numpy((rng.random((1, 32, 32)) > 0.5).astype(np.float64))
        for _ in range(3))

    def loss_value() -> float:
        with torch.no_grad():
            return float(total_loss(model(x), targets, epoch=0).total)

    loss = total_loss(model(x), targets, epoch=0).total
    model.zero_grad()
    loss.backward()

    classes = _parameter_classes(model)
    for cls in ("shared_heads", "private_heads", "output_projection",
                "bottleneck_mixers"):
        assert classes[cls], f"no parameters found for class {cls}"

    per_class = {"shared_heads": 12, "private_heads": 12,
                 "output_projection": 10, "bottleneck_mixers": 10,
                 "other": 10}
    h = 1e-5
    checked = 0
    worst = 0.0
    for cls, budget in per_class.items():
        entries = classes[cls]
        for _ in range(budget):
            name, param = entries[int(rng.integers(len(entries)))]
            flat = int(rng.integers(param.numel()))
            idx = np.unravel_index(flat, param.shape)
            analytic = float(param.grad.reshape(-1)[flat])
            with torch.no_grad():
                param[idx] += h
                plus = loss_value()
                param[idx] -= 2 * h
                minus = loss_value()
                param[idx] += h
            numeric = (plus - minus) / (2 * h)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            rel = abs(analytic - numeric) / denom
            # gradients below the central-difference noise floor are
            # compared absolutely; everything else at rel < 1e-4
            if abs(analytic - numeric) >= 1e-9:
                worst = max(worst, rel)
                assert rel < 1e-4, \
                    f"{name}[{idx}] ({cls}): analytic {analytic:.3e} vs " \
                    f"numeric {numeric:.3e}, rel {rel:.2e}"
            checked += 1
    assert checked >= 50
    elapsed = time.time() - start
    assert elapsed < 120.0, f"took {elapsed:.1f}s, budget 2min"
    report(2, f"gradients, {checked} params, worst rel err {worst:.1e}")


def _decoder_private_parameters(model, decoder_id):
    group_param_ids = {id(p) for g in model.shared_attention_groups()
                       for p in g.parameters()}
    params = [p for p in model.decoders[decoder_id].parameters()
              if id(p) not in group_param_ids]
    for group in model.shared_attention_groups():
        if group.private_qkv is not None:
            params.extend(group.private_qkv[decoder_id].parameters())
            params.append(group.private_bias_tables[decoder_id])
        params.extend(group.out_proj[decoder_id].parameters())
    return params


def test_acceptance_3_sharing_semantics():
    start = time.time()
    from trinuseg.losses import branch_loss

    model = build_model(ModelConfig(), seed=0)
    x = torch.rand(1, 128, 128, 1, generator=torch.Generator().manual_seed(1))
    target = (torch.rand(1, 128, 128,
                         generator=torch.Generator().manual_seed(2)) > 0.7) \
        .float()

    groups = model.shared_attention_groups()
    assert groups, "attention sharing must be active"
    shared_before = [{n: p.detach().clone()
                      for n, p in g.named_parameters() if "shared" in n}
                     for g in groups]
    nuclei_private_before = [p.detach().clone()
                            for p in _decoder_private_parameters(model, 0)]
    cluster_private_before = [p.detach().clone()
                              for p in _decoder_private_parameters(model, 2)]
    before = model.predict(x)

    opt = torch.optim.Adam(model.parameters(), lr=1e-4)
    pred = model(x)
    loss = branch_loss(pred.edge_logits, target)  # edge branch only
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()

    # shared q/k/v weights moved in every group
    for group, snapshot in zip(groups, shared_before):
        for n, p in group.named_parameters():
            if "shared" in n:
                assert not torch.equal(p, snapshot[n]), f"{n} did not move"
    # all branches' outputs change (shared trunk + shared heads moved)
    after = model.predict(x)
    assert not torch.allclose(before.nuclei_logits, after.nuclei_logits)
    assert not torch.allclose(before.cluster_logits, after.cluster_logits)
    assert not torch.allclose(before.edge_logits, after.edge_logits)
    # untouched branches' private weights are bit-identical
    for p, snap in zip(_decoder_private_parameters(model, 0),
                       nuclei_private_before):
        assert torch.equal(p, snap)
    for p, snap in zip(_decoder_private_parameters(model, 2),
                       cluster_private_before):
        assert torch.equal(p, snap)
    elapsed = time.time() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s, budget 10s"
    report(3, "sharing semantics after an edge-only step")


@pytest.mark.slow
def test_acceptance_4_overfit_capacity(tmp_path):
    start = time.time()
    dataset = generate_dataset(0, 8, size=128, n_instances=12,
                               cluster_probability=0.3)
    tc = TrainConfig(epochs=200, batch_size=4, seed=0, eval_every=0)
    outcome = train(ModelConfig(), tc, dataset, out_dir=str(tmp_path / "run"))

    report_metrics, _ = evaluate_model(outcome.model, outcome.train_samples)
    edge_dscs = []
    for sample in outcome.train_samples:
        masks = outcome.model.predict(sample.image[None]).binary_masks()
        dsc, _, _ = pixel_metrics(masks["edge"][0], sample.labels.edge)
        edge_dscs.append(dsc)
    edge_dsc = float(np.mean(edge_dscs))

    assert report_metrics.dsc >= 95.0, f"nuclei DSC {report_metrics.dsc:.2f}"
    assert edge_dsc >= 80.0, f"edge DSC {edge_dsc:.2f}"
    # train loss at the final epoch is below the first epoch's
    assert outcome.history[-1]["total"] < outcome.history[0]["total"]

    # the CLI eval path reproduces the overfit DSC from the checkpoint
    from trinuseg.cli import main as cli_main

    data_dir = str(tmp_path / "trainset")
    save_dataset(data_dir, outcome.train_samples)
    out_dir = str(tmp_path / "eval")
    code = cli_main(["eval",
                     "--checkpoint", str(tmp_path / "run" / "checkpoint.zip"),
                     "--data", data_dir, "--out", out_dir])
    assert code == 0
    with open(os.path.join(out_dir, "metrics.csv")) as fh:
        fh.readline()
        row = fh.readline().strip().split(",")
    assert float(row[2]) >= 95.0  # dsc column

    elapsed = time.time() - start
    assert elapsed < 45 * 60, f"took {elapsed / 60:.1f} min, budget 45 min"
    report(4, f"overfit nuclei DSC {report_metrics.dsc:.1f}, "
              f"edge DSC {edge_dsc:.1f}, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_acceptance_5_self_distillation_effect():
    cfg = tiny_config()
    dataset = generate_dataset(5, 64, size=64, n_instances=7,
                               cluster_probability=0.4)
    medians = {}
    details = {}
    for sd_enabled in (True, False):
        fractions = []
        for seed in (0, 1, 2):
            tc = TrainConfig(epochs=SD_EFFECT_EPOCHS, batch_size=4, seed=seed,
                             eval_every=0, sd_enabled=sd_enabled)
            outcome = train(cfg, tc, dataset)
            fractions.append(
                mean_consistency_fraction(outcome.model,
                                          outcome.test_samples))
        medians[sd_enabled] = float(np.median(fractions))
        details[sd_enabled] = fractions
    assert medians[True] > medians[False], \
        f"overlap with SD {details[True]} vs without {details[False]}"
    report(5, f"consistency overlap median {medians[True]:.3f} (SD) > "
              f"{medians[False]:.3f} (no SD)")


def test_acceptance_6_loss_arithmetic_and_schedule():
    g = torch.Generator().manual_seed(0)
    for trial in range(10):
        pred = TriPrediction(*(torch.randn(12, 12, 2, generator=g)
                               for _ in range(3)))
        gt = tuple((torch.rand(12, 12, generator=g) > 0.5).float()
                   for _ in range(3))
        b = total_loss(pred, gt, epoch=trial * 5)
        expected = 0.30 * float(b.l_n) + 0.35 * float(b.l_e) \
            + 0.35 * float(b.l_c) + b.gamma_sd_used * float(b.l_sd)
        assert abs(float(b.total) - expected) < 1e-6
    assert gamma_sd_schedule(0) == 1.0
    assert gamma_sd_schedule(10) == 0.7
    assert gamma_sd_schedule(20) == 0.4
    assert gamma_sd_schedule(1000) == 0.4
    report(6, "loss arithmetic and gamma_sd schedule")


def test_acceptance_7_metrics_oracle():
    def brute_force(pred, gt):
        tp = fp = fn = tn = 0
        for p, g_ in zip(pred.ravel(), gt.ravel()):
            if p and g_:
                tp += 1
            elif p:
                fp += 1
            elif g_:
                fn += 1
            else:
                tn += 1
        if tp + fp + fn == 0:
            return 100.0, 100.0, 100.0
        return (100.0 * 2 * tp / (2 * tp + fp + fn),
                100.0 * tp / (tp + fp + fn),
                100.0 * (tp + tn) / pred.size)

    rng = np.random.default_rng(0)
    for _ in range(1000):
        pred = rng.random((4, 4)) > rng.random()
        gt = rng.random((4, 4)) > rng.random()
        assert pixel_metrics(pred, gt) == brute_force(pred, gt)

    gt = np.zeros((4, 4), bool)
    gt[:2, :] = True
    pred = gt.copy()
    pred[2, :] = True
    dsc, iou, acc = pixel_metrics(pred, gt)
    assert dsc == 80.0
    assert abs(iou - 66.6666666667) < 1e-6
    assert acc == 75.0
    report(7, "pixel metrics vs brute-force tallies, 1000 pairs")


def test_acceptance_8_label_derivation():
    for seed in range(100):
        _, mask = generate_synthetic_sample(seed, size=64, n_instances=6,
                                            cluster_probability=0.5)
        triplet = derive_label_triplet(mask)
        boundary = _boundary_pixels(mask.ids)
        assert not (triplet.edge & triplet.cluster_edge).any()
        assert np.array_equal(triplet.edge | triplet.cluster_edge, boundary)

    # the 8x8 two-instance fixture against per-pixel brute force
    ids = np.zeros((8, 8), dtype=np.int32)
    ids[1:7, 0:4] = 1
    ids[1:7, 4:8] = 2
    triplet = derive_label_triplet(InstanceMask(ids))
    from test_labels import brute_force_triplet

    nuclei, edge, cluster = brute_force_triplet(ids)
    assert np.array_equal(triplet.nuclei, nuclei)
    assert np.array_equal(triplet.edge, edge)
    assert np.array_equal(triplet.cluster_edge, cluster)
    assert triplet.cluster_edge[1:7, 3].all()
    assert triplet.cluster_edge[1:7, 4].all()
    report(8, "label partition over 100 masks and the 8x8 fixture")


def test_acceptance_9_determinism_and_checkpoint(tmp_path, small_dataset):
    cfg = tiny_config()
    tc = TrainConfig(epochs=4, batch_size=4, seed=0, eval_every=0)
    first = train(cfg, tc, small_dataset)
    second = train(cfg, tc, small_dataset)
    for r1, r2 in zip(first.history, second.history):
        for key in ("l_n", "l_e", "l_c", "l_sd", "total"):
            assert abs(r1[key] - r2[key]) < 1e-6

    path = str(tmp_path / "ck.zip")
    save_checkpoint(path, first.model, epoch=4)
    loaded, _ = load_checkpoint(path)
    x = torch.rand(2, 64, 64, 1, generator=torch.Generator().manual_seed(3))
    a = first.model.predict(x)
    b = loaded.predict(x)
    for name in ("nuclei_logits", "edge_logits", "cluster_logits"):
        assert torch.equal(getattr(a, name), getattr(b, name))
    report(9, "same-seed determinism and exact checkpoint round-trip")
