"""Checkpoint directories.

Layout::

    <dir>/tensors.npz     one array per parameter/buffer, named "<module>/<state_dict key>",
                          stored in the tensor's native dtype (NumPy .npz, little-endian)
    <dir>/meta.json       model hyper-parameters, seed, config hash, code version, step
    <dir>/train_state.pt  optional optimizer/step state used only for resuming
"""

from __future__ import annotations

import json
import subprocess
from pathlib import Path

import numpy as np
import torch

from . import __version__


def code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        desc = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


def save_checkpoint(directory, modules: dict[str, torch.nn.Module], meta: dict, train_state: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, module in modules.items():
        for key, tensor in module.state_dict().items():
            arrays[f"{name}/{key}"] = tensor.detach().cpu().numpy()
    tmp = directory / "tensors.tmp.npz"
    np.savez(tmp, **arrays)
    tmp.replace(directory / "tensors.npz")
    (directory / "meta.json").write_text(json.dumps({**meta, "code_version": code_version()}, indent=2, default=float))
    if train_state is not None:
        torch.save(train_state, directory / "train_state.pt")
    return directory


def load_tensors(directory) -> dict[str, dict[str, torch.Tensor]]:
    out: dict[str, dict[str, torch.Tensor]] = {}
    with np.load(Path(directory) / "tensors.npz") as f:
        for key in f.files:
            module, _, name = key.partition("/")
            out.setdefault(module, {})[name] = torch.from_numpy(f[key].copy())
    return out


def load_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint metadata at {path}")
    return json.loads(path.read_text())


def load_train_state(directory) -> dict | None:
    path = Path(directory) / "train_state.pt"
    return torch.load(path, weights_only=False) if path.exists() else None
