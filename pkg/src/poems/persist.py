"""Model directories: one CSV per parameter array plus ``manifest.json``.

Floats are written with 17 significant digits, which round-trips float64
exactly, so a saved and reloaded model is bit-identical.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as M
from .errors import IngestionError
from .numerics import Layer, MlpParams
from .sparsity import FactorLoadings, SSLState

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


def _save_array(arr: np.ndarray, path: Path) -> None:
    a = np.asarray(arr, dtype=np.float64)
    np.savetxt(path, a.reshape(1, -1) if a.ndim == 1 else a, fmt="%.17g", delimiter=",")


def _load_array(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise IngestionError(f"missing array file {path}")
    a = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if a.size != int(np.prod(shape)):
        raise IngestionError(f"{path}: {a.size} values, manifest says shape {tuple(shape)}")
    return a.reshape(shape)


def _mlp_spec(mlp: MlpParams):
    return [l.activation for l in mlp.layers]


def save_model(model: M.ModelParams, out_dir, config: Optional[dict] = None, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = dict(model.named_arrays())
    if model.ssl is not None:
        for v, s in enumerate(model.ssl):
            arrays[f"ssl{v}.gamma"] = s.gamma
            arrays[f"ssl{v}.eta"] = s.eta
    entries = {}
    for name, arr in arrays.items():
        fname = f"{name}.csv"
        _save_array(arr, out / fname)
        entries[name] = {"file": fname, "shape": list(np.shape(arr))}
    manifest = {
        "format_version": FORMAT_VERSION,
        "omics": list(model.omics),
        "feature_dims": model.feature_dims,
        "latent_dim": model.latent_dim,
        "activations": {
            **{f"enc{v}": _mlp_spec(e) for v, e in enumerate(model.encoders)},
            "gate": _mlp_spec(model.gating),
            **{f"dec{v}": _mlp_spec(d.trunk) for v, d in enumerate(model.decoders)},
        },
        "ssl": None if model.ssl is None else [
            {"lambda0": s.lambda0, "lambda1": s.lambda1, "a": s.a, "b": s.b} for s in model.ssl
        ],
        "learned_obs_variance": model.obs_logvar is not None,
        "arrays": entries,
        "config": config or {},
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_manifest(model_dir) -> dict:
    path = Path(model_dir) / MANIFEST
    if not path.exists():
        raise IngestionError(f"no model manifest at {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: malformed manifest ({exc})") from exc


def load_model(model_dir) -> M.ModelParams:
    root = Path(model_dir)
    man = read_manifest(root)
    entries = man["arrays"]

    def arr(name):
        if name not in entries:
            raise IngestionError(f"manifest lists no array {name!r}")
        e = entries[name]
        return _load_array(root / e["file"], e["shape"])

    def mlp(prefix):
        acts = man["activations"][prefix]
        return MlpParams([Layer(arr(f"{prefix}.{i}.weight"), arr(f"{prefix}.{i}.bias"), a)
                          for i, a in enumerate(acts)])

    omics = man["omics"]
    nv = len(omics)
    model = M.ModelParams(
        list(omics),
        [mlp(f"enc{v}") for v in range(nv)],
        mlp("gate"),
        [M.DecoderParams(mlp(f"dec{v}"), arr(f"dec{v}.bias")) for v in range(nv)],
        [FactorLoadings(arr(f"W{v}"), omics[v]) for v in range(nv)],
    )
    if man.get("ssl"):
        model.ssl = [SSLState(arr(f"ssl{v}.gamma"), arr(f"ssl{v}.eta"), h["lambda0"], h["lambda1"], h["a"], h["b"])
                     for v, h in enumerate(man["ssl"])]
    if man.get("learned_obs_variance"):
        model.obs_logvar = [arr(f"obs{v}") for v in range(nv)]
    return model
