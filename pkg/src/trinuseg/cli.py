"""Command-line entry point.

Subcommands: synth (write a synthetic dataset), train, eval, complexity
(params/FLOPs for the four bottleneck x sharing combinations), ablate (the
full 8-way toggle grid) and overlay (edge-consistency visualization).
Errors exit nonzero with a single ``error: ...`` line on stderr.  The
``TRINUSEG_SEED`` environment variable provides the seed when neither a
flag nor a config file sets one.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np


def _env_seed(default: int = 0) -> int:
    raw = os.environ.get("TRINUSEG_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"TRINUSEG_SEED must be an integer, got {raw!r}")


def _load_configs(path: str):
    from .training import load_config_file

    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    model_config, train_config = load_config_file(path)
    if "seed" not in _config_keys(path):
        env = os.environ.get("TRINUSEG_SEED")
        if env is not None:
            from dataclasses import replace
            train_config = replace(train_config, seed=int(env))
    return model_config, train_config


def _config_keys(path: str) -> set[str]:
    import json

    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        return set(json.loads(text))
    keys = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#") and "=" in line:
            keys.add(line.partition("=")[0].strip())
    return keys


def _load_data(root: str):
    from .labels import load_dataset

    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory not found: {root}")
    return load_dataset(root)


def cmd_synth(args) -> int:
    from .labels import generate_dataset, save_dataset

    samples = generate_dataset(
        seed=args.seed, n_samples=args.n, size=args.size,
        n_instances=args.instances, cluster_probability=args.cluster_prob)
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .training import train

    model_config, train_config = _load_configs(args.config)
    root = args.data or train_config.data_root
    if not root:
        raise ValueError("no dataset: set data_root in the config or pass --data")
    dataset = _load_data(root)
    outcome = train(model_config, train_config, dataset, out_dir=args.out,
                    log=lambda rec: print(
                        f"epoch {rec['epoch']:>4d}  total {rec['total']:.4f}"
                        + (f"  dsc {rec['dsc']:.2f}" if "dsc" in rec else "")))
    print(f"checkpoint: {outcome.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import write_metrics_csv, write_metrics_text
    from .training import evaluate_model

    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model, ckpt = load_checkpoint(args.checkpoint)
    samples = _load_data(args.data)
    overlay_dir = os.path.join(args.out, "overlays") if args.overlays else None
    report, rows = evaluate_model(model, samples, overlay_dir=overlay_dir)
    os.makedirs(args.out, exist_ok=True)
    seed = (ckpt.train_config or {}).get("seed", "")
    write_metrics_csv(
        os.path.join(args.out, "metrics.csv"),
        [{"seed": seed, "split": "eval", **report.as_dict()}])
    write_metrics_text(os.path.join(args.out, "metrics.txt"), report)
    with open(os.path.join(args.out, "per_image.csv"), "w") as fh:
        fh.write("id,dsc,f1,acc,iou,ercnt\n")
        for row in rows:
            fh.write(f"{row['id']},{row['dsc']:.4f},{row['f1']:.4f},"
                     f"{row['acc']:.4f},{row['iou']:.4f},{row['ercnt']:.4f}\n")
    print(f"dsc={report.dsc:.2f} f1={report.f1:.2f} acc={report.acc:.2f} "
          f"iou={report.iou:.2f} ercnt={report.ercnt:.2f} "
          f"n={report.n_images}")
    return 0


def cmd_complexity(args) -> int:
    from .model import ModelConfig, complexity_grid, format_complexity_table

    if args.config:
        model_config, _ = _load_configs(args.config)
    else:
        model_config = ModelConfig()
    rows = complexity_grid(model_config, input_size=args.input_size)
    print(format_complexity_table(rows))
    return 0


def cmd_ablate(args) -> int:
    from .training import format_ablation_table, run_ablation_grid
    from .model import format_complexity_table

    model_config, train_config = _load_configs(args.config)
    root = args.data or train_config.data_root
    if not root:
        raise ValueError("no dataset: set data_root in the config or pass --data")
    dataset = _load_data(root)
    results, complexity_rows = run_ablation_grid(
        model_config, train_config, dataset, out_dir=args.out,
        log=lambda row: print(
            f"MLP={row['mlp']} AS={row['attention_sharing']} SD={row['sd']} "
            f"-> dsc {row['dsc']:.2f}"))
    print(format_ablation_table(results))
    print()
    print(format_complexity_table(complexity_rows))
    return 0


def cmd_overlay(args) -> int:
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .metrics import consistency_overlap

    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    if not os.path.isfile(args.image):
        raise FileNotFoundError(f"image not found: {args.image}")
    model, _ = load_checkpoint(args.checkpoint)
    image = np.asarray(Image.open(args.image)).astype(np.float32) / 255.0
    if image.ndim == 2:
        image = image[:, :, None]
    masks = model.predict(image[None]).binary_masks()
    overlap = consistency_overlap(masks["nuclei"][0], masks["edge"][0])
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    Image.fromarray(overlap.overlay).save(args.out)
    print(f"overlap={overlap.frac_overlap:.3f} "
          f"edge_only={overlap.frac_edge_only:.3f} "
          f"contour_only={overlap.frac_nuclei_contour_only:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trinuseg",
        description="Tri-decoder nuclei/edge/clustered-edge segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=128, help="image side in pixels")
    p.add_argument("--seed", type=int, default=_env_seed(0))
    p.add_argument("--instances", type=int, default=12,
                   help="ellipses per image")
    p.add_argument("--cluster-prob", type=float, default=0.3,
                   help="probability an ellipse is planted touching another")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint/history directory")
    p.add_argument("--data", default="", help="dataset root (overrides config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlays", action="store_true",
                   help="write consistency overlays per image")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("complexity",
                       help="params/FLOPs for the 4 bottleneck x sharing variants")
    p.add_argument("--config", default="", help="optional config file")
    p.add_argument("--input-size", type=int, default=None)
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("ablate", help="train and score all 8 toggle combinations")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default="", help="dataset root (overrides config)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("overlay",
                       help="green/red/yellow edge-consistency overlay for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
