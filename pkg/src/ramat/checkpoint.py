"""Binary container for checkpoints and datasets.

Layout::

    b"RAMATCK1"                 8-byte magic
    uint64 little-endian        length of the JSON header in bytes
    JSON header (utf-8)         metadata + manifest [{name, shape, offset, nbytes}]
    payload                     little-endian float32 arrays in manifest order
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig, Params, init_params
from .numerics import Tensor
from .pipeline import Scalers
from .reservoir import ReservoirSpec
from .train import OptimState

MAGIC = b"RAMATCK1"
DTYPE = np.dtype("<f4")
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: only float32 arrays are stored, got {arr.dtype}")
        raw = arr.astype(DTYPE, copy=False).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                         "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = dict(meta)
    header["manifest"] = manifest
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode())
    payload = memoryview(data)[16 + n:]
    manifest = header.pop("manifest")
    arrays, expect = {}, 0
    for entry in manifest:
        off, nbytes = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        if off != expect:
            raise CheckpointError(f"{path}: manifest entry {entry['name']} at {off}, expected {expect}")
        if nbytes != DTYPE.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: size of {entry['name']} does not match its shape")
        arr = np.frombuffer(payload[off:off + nbytes], dtype=DTYPE).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float32)
        expect = off + nbytes
    if expect != len(payload):
        raise CheckpointError(f"{path}: manifest covers {expect} of {len(payload)} payload bytes")
    return arrays, header


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclasses.dataclass
class Checkpoint:
    model: ModelConfig
    reservoir: ReservoirSpec
    params: Params
    scalers: Scalers | None = None
    opt: OptimState | None = None
    rng_state: dict | None = None
    config: dict = dataclasses.field(default_factory=dict)
    info: dict = dataclasses.field(default_factory=dict)

    def save(self, path) -> None:
        arrays = {"reservoir.w_in": self.reservoir.w_in, "reservoir.w_res": self.reservoir.w_res}
        for name, t in self.params.items():
            arrays[name] = t.data
        meta = {
            "kind": "checkpoint",
            "format": FORMAT_VERSION,
            "model": dataclasses.asdict(self.model),
            "reservoir": {k: getattr(self.reservoir, k) for k in
                          ("input_dim", "reservoir_size", "spectral_radius", "leak_rate",
                           "input_scale", "seed")},
            "params": list(self.params),
            "scalers": None if self.scalers is None else self.scalers.to_json(),
            "rng": self.rng_state,
            "config": self.config,
            "info": self.info,
        }
        if self.opt is not None:
            meta["optim"] = {**self.opt.hyper(), "names": list(self.opt.m)}
            for name in self.opt.m:
                arrays["optim.m." + name] = self.opt.m[name]
                arrays["optim.v." + name] = self.opt.v[name]
        write_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = read_container(path)
        if meta.get("kind") != "checkpoint":
            raise CheckpointError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
        model = ModelConfig(**meta["model"])
        r = meta["reservoir"]
        spec = ReservoirSpec(w_in=arrays["reservoir.w_in"], w_res=arrays["reservoir.w_res"], **r)
        params = {n: Tensor(arrays[n], True, n, dtype=np.float32) for n in meta["params"]}
        scalers = None if meta.get("scalers") is None else Scalers.from_json(meta["scalers"])
        opt = None
        if "optim" in meta:
            o = meta["optim"]
            opt = OptimState({n: arrays["optim.m." + n] for n in o["names"]},
                             {n: arrays["optim.v." + n] for n in o["names"]},
                             o["step"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"])
        return cls(model, spec, params, scalers, opt, meta.get("rng"), meta.get("config", {}),
                   meta.get("info", {}))


def check_compatible(ckpt: Checkpoint, model: ModelConfig) -> None:
    """Raise naming the first parameter whose stored shape differs from ``model``'s."""
    expected = init_params(model, ckpt.reservoir.reservoir_size, np.random.default_rng(0))
    for name, t in expected.items():
        if name not in ckpt.params:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if ckpt.params[name].shape != t.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {ckpt.params[name].shape} "
                                  f"!= configured {t.shape}")
    extra = set(ckpt.params) - set(expected)
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameters {sorted(extra)}")
    if ckpt.reservoir.input_dim != model.patch_dim:
        raise CheckpointError(f"reservoir input_dim {ckpt.reservoir.input_dim} != "
                              f"patch_length*K {model.patch_dim}")


def save_dataset(path, dataset, meta: Mapping | None = None) -> None:
    arrays = {"X": dataset.X, "y": dataset.y}
    for i, s in enumerate(dataset.series):
        arrays[f"series.{i}"] = np.asarray(s, dtype=np.float32)
    header = {"kind": "dataset", "format": FORMAT_VERSION, "channels": list(dataset.channels),
              "series": len(dataset.series),
              "scalers": None if dataset.scalers is None else dataset.scalers.to_json(),
              **(meta or {})}
    write_container(path, arrays, header)


def load_dataset(path):
    from .pipeline import SequenceDataset

    arrays, meta = read_container(path)
    if meta.get("kind") != "dataset":
        raise CheckpointError(f"{path}: not a dataset (kind={meta.get('kind')!r})")
    scalers = None if meta.get("scalers") is None else Scalers.from_json(meta["scalers"])
    series = [arrays[f"series.{i}"] for i in range(meta["series"])]
    ds = SequenceDataset(arrays["X"], arrays["y"], meta["channels"], scalers, series)
    return ds, meta
