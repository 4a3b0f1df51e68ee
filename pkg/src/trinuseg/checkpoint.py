"""Model checkpointing in a language-neutral archive format.

A checkpoint is a plain zip file containing:

``model_config.json``
    The architecture configuration (JSON object).
``train_config.json``
    Training configuration used to produce the weights (optional).
``meta.json``
    ``{"format": "trinuseg-checkpoint", "version": 1, "epoch": int,
    "history": [...]}``; history rows are flat JSON objects.
``params/<name>.npy``
    One NumPy ``.npy`` (format version 1.0) entry per ``state_dict`` key:
    little-endian 32-bit floats, C order, shape in the npy header.  Keys are
    the hierarchical module paths; weights shared between decoders appear
    under every referencing path with identical content, and sharing is
    re-established structurally when the model is rebuilt from the config.

Weights are stored as float32, so a float32 model round-trips bit-exactly.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import ModelConfig, TriDecoderNet, build_model

FORMAT_NAME = "trinuseg-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Metadata loaded alongside the weights."""

    model_config: ModelConfig
    train_config: dict | None
    epoch: int
    history: list[dict] = field(default_factory=list)
    path: str = ""


def save_checkpoint(path: str, model: TriDecoderNet,
                    train_config: dict | None = None,
                    epoch: int = 0,
                    history: list[dict] | None = None) -> None:
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "epoch": epoch,
        "history": list(history or []),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("model_config.json",
                    json.dumps(model.config.to_dict(), indent=1))
        if train_config is not None:
            zf.writestr("train_config.json", json.dumps(train_config, indent=1))
        zf.writestr("meta.json", json.dumps(meta, indent=1))
        for name, tensor in model.state_dict().items():
            buf = io.BytesIO()
            arr = tensor.detach().cpu().numpy().astype("<f4")
            np.lib.format.write_array(buf, arr, version=(1, 0))
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str) -> tuple[TriDecoderNet, Checkpoint]:
    """Rebuild the model from the stored config and load the weights."""
    with zipfile.ZipFile(path, "r") as zf:
        names = set(zf.namelist())
        if "model_config.json" not in names or "meta.json" not in names:
            raise ValueError(f"{path} is not a {FORMAT_NAME} archive")
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT_NAME:
            raise ValueError(f"unexpected checkpoint format {meta.get('format')!r}")
        config = ModelConfig.from_dict(json.loads(zf.read("model_config.json")))
        train_config = None
        if "train_config.json" in names:
            train_config = json.loads(zf.read("train_config.json"))
        model = build_model(config)
        state = {}
        for entry in names:
            if not entry.startswith("params/") or not entry.endswith(".npy"):
                continue
            key = entry[len("params/"):-len(".npy")]
            arr = np.lib.format.read_array(io.BytesIO(zf.read(entry)))
            state[key] = torch.from_numpy(arr.astype(np.float32))
        missing = set(model.state_dict()) - set(state)
        if missing:
            raise ValueError(f"checkpoint misses parameters: {sorted(missing)[:5]}")
        model.load_state_dict(state)
    model.eval()
    ckpt = Checkpoint(model_config=config, train_config=train_config,
                      epoch=int(meta.get("epoch", 0)),
                      history=list(meta.get("history", [])), path=path)
    return model, ckpt
