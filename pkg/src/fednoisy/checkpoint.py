"""Model checkpoints: flat little-endian float64 blobs plus a JSON manifest.

A round directory holds ``global.bin``, one ``client_###.bin`` per client,
and ``manifest.json`` recording layer shapes, activations, and the ground
truth noise rates (so CKA analysis can split noisy/clean groups later).
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import nn
from .errors import DataFormatError

MANIFEST_NAME = "manifest.json"
GLOBAL_NAME = "global.bin"


def params_to_blob(params: nn.ModelParams) -> bytes:
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def params_from_blob(blob: bytes, layer_shapes: list[list[int]],
                     activations: list[str]) -> nn.ModelParams:
    flat = np.frombuffer(blob, dtype="<f8")
    expected = sum(o * i + o for o, i in layer_shapes)
    if flat.size != expected:
        raise DataFormatError(
            f"checkpoint blob holds {flat.size} values, expected {expected}")
    weights, biases, pos = [], [], 0
    for out_dim, in_dim in layer_shapes:
        weights.append(flat[pos:pos + out_dim * in_dim]
                       .reshape(out_dim, in_dim).copy())
        pos += out_dim * in_dim
        biases.append(flat[pos:pos + out_dim].copy())
        pos += out_dim
    return nn.ModelParams(weights, biases, list(activations))


def round_dir(base_dir, round_idx: int) -> str:
    return os.path.join(base_dir, f"round_{round_idx:04d}")


def save_round(base_dir, round_idx: int, global_params: nn.ModelParams,
               client_params: list[nn.ModelParams], noise_rates) -> str:
    path = round_dir(base_dir, round_idx)
    os.makedirs(path, exist_ok=True)
    manifest = {
        "round": round_idx,
        "layer_shapes": [list(w.shape) for w in global_params.weights],
        "activations": list(global_params.activations),
        "num_clients": len(client_params),
        "noise_rates": [float(r) for r in noise_rates],
        "global": GLOBAL_NAME,
        "clients": [f"client_{c:03d}.bin" for c in range(len(client_params))],
    }
    with open(os.path.join(path, GLOBAL_NAME), "wb") as fh:
        fh.write(params_to_blob(global_params))
    for name, params in zip(manifest["clients"], client_params):
        with open(os.path.join(path, name), "wb") as fh:
            fh.write(params_to_blob(params))
    with open(os.path.join(path, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_round(path) -> tuple[nn.ModelParams, list[nn.ModelParams], list[float], int]:
    """Returns (global, clients, noise_rates, round_idx) for a round directory."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(
            f"missing checkpoint manifest: expected {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    shapes = manifest["layer_shapes"]
    acts = manifest["activations"]

    def read(name):
        blob_path = os.path.join(path, name)
        if not os.path.isfile(blob_path):
            raise FileNotFoundError(f"missing checkpoint blob: {blob_path}")
        with open(blob_path, "rb") as fh:
            return params_from_blob(fh.read(), shapes, acts)

    global_params = read(manifest["global"])
    clients = [read(name) for name in manifest["clients"]]
    return global_params, clients, manifest["noise_rates"], manifest["round"]


def available_rounds(base_dir) -> list[int]:
    if not os.path.isdir(base_dir):
        return []
    rounds = []
    for name in os.listdir(base_dir):
        if name.startswith("round_") and name[6:].isdigit():
            rounds.append(int(name[6:]))
    return sorted(rounds)
