"""Versioned binary array container, checkpoints, and CSV helpers.

Container layout: 4 magic bytes, little-endian u32 version, u32 JSON header
length, the JSON header (array names/shapes/dtypes plus free-form metadata),
then the raw array payloads in header order. Checkpoints store every network
weight, the design variables, optimizer moments and RNG states, and write a
sidecar JSON manifest describing the architecture and config hash.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Parameter
from .networks import Adam, GaussianPolicy, ValueFn
from .vehicle import DesignBounds, SuspensionDesign

CHECKPOINT_MAGIC = b"SCCK"
CONTAINER_VERSION = 1


def save_container(path, arrays: dict[str, np.ndarray], meta: dict,
                   magic: bytes = CHECKPOINT_MAGIC) -> None:
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": str(arr.dtype)})
        payload.extend(arr.tobytes())
    header = json.dumps({"arrays": entries, "meta": meta},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", CONTAINER_VERSION, len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_container(path, magic: bytes = CHECKPOINT_MAGIC):
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CONTAINER_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        header = json.loads(fh.read(header_len).decode())
        arrays = {}
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            dtype = np.dtype(entry["dtype"])
            buf = fh.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(
                entry["shape"]).copy()
    return arrays, header["meta"]


def _optimizer_arrays(prefix: str, opt: Adam) -> dict[str, np.ndarray]:
    out = {}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        out[f"{prefix}.m{i}"] = m
        out[f"{prefix}.v{i}"] = v
    return out


def _load_optimizer(prefix: str, opt: Adam, arrays, meta) -> None:
    opt.t = int(meta["optimizer_steps"][prefix])
    for i in range(len(opt.m)):
        opt.m[i][...] = arrays[f"{prefix}.m{i}"]
        opt.v[i][...] = arrays[f"{prefix}.v{i}"]


def save_checkpoint(path, *, policy: GaussianPolicy, value_fn: ValueFn,
                    design_param: Parameter, bounds: DesignBounds,
                    optimizers: dict[str, Adam] | None = None,
                    rng_states: dict[str, dict] | None = None,
                    config_hash: str = "", extra: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    arrays.update(policy.mean_net.state_arrays())
    arrays.update(policy.std_net.state_arrays())
    arrays.update(value_fn.net.state_arrays())
    arrays["design.normalized"] = design_param.value
    optimizers = optimizers or {}
    for name, opt in optimizers.items():
        arrays.update(_optimizer_arrays(f"opt.{name}", opt))
    k_s, c_s = bounds.denormalize(design_param.value[0], design_param.value[1])
    meta = {
        "architecture": {
            "input_dim": policy.input_dim,
            "hidden": list(policy.mean_net.sizes[1:-1]),
            "action_dim": policy.action_dim,
            "action_scale": policy.action_scale,
        },
        "design": {"k_s": float(k_s), "c_s": float(c_s)},
        "bounds": {"k_s_min": bounds.k_s_min, "k_s_max": bounds.k_s_max,
                   "c_s_min": bounds.c_s_min, "c_s_max": bounds.c_s_max},
        "optimizer_steps": {f"opt.{n}": o.t for n, o in optimizers.items()},
        "rng_states": _jsonable(rng_states or {}),
        "config_hash": config_hash,
        "extra": extra or {},
    }
    save_container(path, arrays, meta)
    manifest = Path(str(path) + ".manifest.json")
    manifest.write_text(json.dumps(
        {"architecture": meta["architecture"], "design": meta["design"],
         "config_hash": config_hash}, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Rebuild (policy, value_fn, design_param, bounds, meta, arrays)."""
    arrays, meta = load_container(path)
    arch = meta["architecture"]
    policy = GaussianPolicy(np.random.default_rng(0),
                            input_dim=arch["input_dim"],
                            hidden=tuple(arch["hidden"]),
                            action_dim=arch["action_dim"],
                            action_scale=arch["action_scale"])
    value_fn = ValueFn(np.random.default_rng(0),
                       input_dim=arch["input_dim"],
                       hidden=tuple(arch["hidden"]))
    policy.mean_net.load_state_arrays(arrays)
    policy.std_net.load_state_arrays(arrays)
    value_fn.net.load_state_arrays(arrays)
    design_param = Parameter(arrays["design.normalized"].copy(),
                             name="design.normalized")
    b = meta["bounds"]
    bounds = DesignBounds(k_s_min=b["k_s_min"], k_s_max=b["k_s_max"],
                          c_s_min=b["c_s_min"], c_s_max=b["c_s_max"])
    return policy, value_fn, design_param, bounds, meta, arrays


def restore_optimizers(path, optimizers: dict[str, Adam]) -> None:
    arrays, meta = load_container(path)
    for name, opt in optimizers.items():
        _load_optimizer(f"opt.{name}", opt, arrays, meta)


def design_from_checkpoint(path) -> SuspensionDesign:
    _, meta = load_container(path)
    return SuspensionDesign(k_s=meta["design"]["k_s"],
                            c_s=meta["design"]["c_s"])


def _jsonable(obj):
    """Recursively convert numpy scalars so json.dumps accepts RNG states."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float) or isinstance(v, np.floating):
        return repr(float(v))
    return str(v)


def append_csv_row(path, header: list[str], row) -> None:
    path = Path(path)
    if not path.exists():
        path.write_text(",".join(header) + "\n")
    with open(path, "a") as fh:
        fh.write(",".join(_fmt(v) for v in row) + "\n")
