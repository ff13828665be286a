"""CRDM checkpoint container.

Layout (all little-endian)::

    b"CRDM" | u32 format version | u64 header length | JSON header | f32 blobs

The header maps every tensor name to ``{"shape", "dtype": "f32", "offset"}``
(offset in bytes from the start of the blob section) and carries a ``meta``
object with everything else needed to rebuild a :class:`TrainState`.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from ..errors import CycleRDMError
from ..networks import Denoiser, DenoiserSpec, FeatureGainModule, FgmSpec
from ..pipeline import TrainState, make_optimizer, oracle_state
from ..schedule import NoiseSchedule

MAGIC = b"CRDM"
FORMAT_VERSION = 1


class CheckpointError(CycleRDMError, OSError):
    pass


def write_container(path, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    """Atomically write ``tensors`` (stored as float32) and ``meta`` to ``path``."""
    path = Path(path)
    entries, blobs, offset = {}, [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy()).astype("<f4", copy=False)
        entries[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset}
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_container(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a CRDM checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    base = 16 + hlen
    tensors = {}
    for name, e in header["tensors"].items():
        if e["dtype"] != "f32":
            raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {e['dtype']!r}")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + 4 * count > len(data):
            raise CheckpointError(f"{path}: tensor {name!r} runs past end of file")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(e["shape"])
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, header["meta"]


def _module_specs(state: TrainState) -> dict:
    return {
        "net12": state.net12.spec.to_dict(),
        "net3": state.net3.spec.to_dict(),
        "fgm": state.fgm.spec.to_dict(),
    }


def save_checkpoint(path, state: TrainState, run_config: dict | None = None) -> Path:
    tensors: dict[str, torch.Tensor] = {}
    kind = state.meta.get("kind", "trained")
    if kind == "oracle":
        mods = {"fgm": state.fgm}
        specs = {"fgm": state.fgm.spec.to_dict()}
    else:
        mods = state.modules()
        specs = _module_specs(state)
    for prefix, mod in mods.items():
        for name, p in mod.state_dict().items():
            tensors[f"{prefix}.{name}"] = p
    optim_meta = None
    if state.optimizer is not None and kind != "oracle":
        names = [n for n, _ in state.named_parameters()]
        sd = state.optimizer.state_dict()
        for idx, st in sd["state"].items():
            for key, value in st.items():
                tensors[f"optim.{names[idx]}.{key}"] = torch.as_tensor(value)
        group = {k: v for k, v in sd["param_groups"][0].items() if k != "params"}
        optim_meta = {"type": "adam", "group": group}
    meta = {
        "kind": kind,
        "schedule": state.schedule.to_dict(),
        "modules": specs,
        "optimizer": optim_meta,
        "step": state.step,
        "seed": state.seed,
        "run_config": run_config or state.meta.get("run_config"),
    }
    return write_container(path, tensors, meta)


def _spec(cls, d):
    if "betas" in d:
        raise CheckpointError("module spec unexpectedly holds schedule data")
    return cls(**d)


def load_checkpoint(path) -> TrainState:
    tensors, meta = read_container(path)
    schedule = NoiseSchedule.from_dict(meta["schedule"])
    fgm = FeatureGainModule(_spec(FgmSpec, meta["modules"]["fgm"]))
    if meta["kind"] == "oracle":
        state = oracle_state(schedule=schedule, fgm=fgm)
        mods = {"fgm": fgm}
    else:
        net12 = Denoiser(_spec(DenoiserSpec, meta["modules"]["net12"]), schedule)
        net3 = Denoiser(_spec(DenoiserSpec, meta["modules"]["net3"]), schedule)
        state = TrainState(schedule, net12, net3, fgm, step=int(meta["step"]), seed=int(meta["seed"]))
        mods = state.modules()
    for prefix, mod in mods.items():
        own = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        try:
            mod.load_state_dict(own, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: parameters for {prefix!r} do not match: {exc}") from exc
    state.meta = {"kind": meta["kind"], "run_config": meta.get("run_config")}
    if meta.get("optimizer"):
        group = meta["optimizer"]["group"]
        state.optimizer = make_optimizer(state, group["lr"])
        names = [n for n, _ in state.named_parameters()]
        opt_state = {}
        for idx, name in enumerate(names):
            entry = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                full = f"optim.{name}.{key}"
                if full in tensors:
                    entry[key] = tensors[full].clone()
            if entry:
                opt_state[idx] = entry
        sd = state.optimizer.state_dict()
        sd["state"] = opt_state
        sd["param_groups"][0].update({k: (tuple(v) if isinstance(v, list) else v) for k, v in group.items()})
        state.optimizer.load_state_dict(sd)
    return state
