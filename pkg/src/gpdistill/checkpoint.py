"""Checkpoints: every tensor of a run, restored bit-for-bit.

Two files per checkpoint:

* ``<path>`` — binary payload: an 8-byte magic, a version word, then a
  shape table (array name, dtype code, dims) followed by the raw array
  bytes, all little-endian with 64-bit reals.  Numbers round-trip exactly
  because the bytes on disk are the IEEE-754 bits in memory.
* ``<path>.json`` — sidecar holding everything that is not a tensor:
  GP hyperparameters, the layer-by-layer architecture needed to rebuild
  the predictor and mapper objects, the inducing store's bookkeeping,
  the training RNG state, and the iteration counter.

The inducing Gram caches are not stored; they are definitionally U·Uᵀ
per head and are rebuilt on load.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .gpcore import GpHyper, InducingStore
from . import lowrank
from .nets import ConvLayer, DenseLayer, KernelMapper, Predictor

__all__ = [
    "CheckpointData",
    "load_checkpoint",
    "restore_rng",
    "save_checkpoint",
]

MAGIC = b"GPDCKPT1"
VERSION = 1

_DTYPE_F64 = 0
_DTYPE_I64 = 1

_DTYPES = {_DTYPE_F64: np.dtype("<f8"), _DTYPE_I64: np.dtype("<i8")}


@dataclass
class CheckpointData:
    """Everything a checkpoint restores."""

    hyper: GpHyper
    predictor: Predictor
    mapper: KernelMapper
    store: InducingStore
    rng_state: dict | None
    iteration: int


# ------------------------------------------------------------ binary blobs


def _write_arrays(path: Path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    payloads = []
    for name, arr in arrays.items():
        if arr.dtype.kind == "f":
            code, dt = _DTYPE_F64, _DTYPES[_DTYPE_F64]
        elif arr.dtype.kind == "i":
            code, dt = _DTYPE_I64, _DTYPES[_DTYPE_I64]
        else:
            raise ParameterError(f"checkpoint: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BI", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payloads.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    path.write_bytes(b"".join(chunks + payloads))


class _Reader:
    def __init__(self, path: Path, data: bytes):
        self.path = path
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated {what} at byte offset {self.pos} "
                f"(need {n} bytes, {len(self.data) - self.pos} left)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def _read_arrays(path: Path) -> dict[str, np.ndarray]:
    r = _Reader(path, path.read_bytes())
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0 "
                          f"(expected {MAGIC!r})")
    version, count = struct.unpack("<II", r.take(8, "version header"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    table: list[tuple[str, int, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", r.take(4, "name length"))
        name = r.take(name_len, "array name").decode("utf-8")
        code, ndim = struct.unpack("<BI", r.take(5, "array header"))
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, "shape table"))
        table.append((name, code, tuple(int(s) for s in shape)))
    arrays: dict[str, np.ndarray] = {}
    for name, code, shape in table:
        dt = _DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        raw = r.take(n_bytes, f"payload of {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    if r.pos != len(r.data):
        raise FormatError(
            f"{path}: {len(r.data) - r.pos} trailing bytes at offset {r.pos}")
    return arrays


# ------------------------------------------------------- layer (de)serialize


def _layer_meta(layer) -> dict:
    if isinstance(layer, DenseLayer):
        return {"type": "dense", "activation": layer.activation,
                "alpha": layer.alpha}
    return {"type": "conv", "activation": layer.activation,
            "alpha": layer.alpha, "stride": int(layer.stride)}


def _layer_arrays(layer, prefix: str, arrays: dict[str, np.ndarray]) -> None:
    if isinstance(layer, DenseLayer):
        arrays[f"{prefix}/weight"] = layer.weight
        arrays[f"{prefix}/bias"] = layer.bias
    else:
        arrays[f"{prefix}/kernels"] = layer.kernels
        arrays[f"{prefix}/bias"] = layer.bias


def _need(arrays: dict[str, np.ndarray], name: str, path: Path) -> np.ndarray:
    if name not in arrays:
        raise FormatError(f"{path}: sidecar references missing array {name!r}")
    return arrays[name]


def _rebuild_layer(meta: dict, prefix: str, arrays: dict[str, np.ndarray],
                   path: Path):
    if meta["type"] == "dense":
        return DenseLayer(weight=_need(arrays, f"{prefix}/weight", path),
                          bias=_need(arrays, f"{prefix}/bias", path),
                          activation=meta["activation"], alpha=meta["alpha"])
    if meta["type"] == "conv":
        return ConvLayer(kernels=_need(arrays, f"{prefix}/kernels", path),
                         bias=_need(arrays, f"{prefix}/bias", path),
                         stride=meta["stride"], activation=meta["activation"],
                         alpha=meta["alpha"])
    raise FormatError(f"{path}: unknown layer type {meta['type']!r}")


# ---------------------------------------------------------------- save/load


def save_checkpoint(path, hyper: GpHyper, predictor: Predictor,
                    mapper: KernelMapper, store: InducingStore,
                    rng: np.random.Generator | None = None,
                    iteration: int = 0) -> None:
    """Write ``path`` (binary tensors) and ``path.json`` (metadata)."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for i, layer in enumerate(predictor.layers):
        _layer_arrays(layer, f"pred/{i}", arrays)
    for i, layer in enumerate(mapper.backbone):
        _layer_arrays(layer, f"map/bb/{i}", arrays)
    for h, branch in enumerate(mapper.branches):
        for i, layer in enumerate(branch):
            _layer_arrays(layer, f"map/br/{h}/{i}", arrays)
    for h in range(store.n_heads):
        arrays[f"store/u/{h}"] = store.u[h]
        arrays[f"store/v/{h}"] = store.v[h]
    arrays["store/index_map"] = store.index_map

    meta = {
        "schema": 1,
        "iteration": int(iteration),
        "gp": {
            "n_heads": hyper.n_heads,
            "kernel_dim": hyper.kernel_dim,
            "n_inducing": hyper.n_inducing,
            "sigma_gp2": hyper.sigma_gp2,
            "sigma_g2": hyper.sigma_g2,
        },
        "predictor": {
            "n_heads": predictor.n_heads,
            "wide_width": predictor.wide_width,
            "layers": [_layer_meta(l) for l in predictor.layers],
        },
        "mapper": {
            "kernel_dim": mapper.kernel_dim,
            "alpha": mapper.alpha,
            "backbone": [_layer_meta(l) for l in mapper.backbone],
            "branches": [[_layer_meta(l) for l in branch]
                         for branch in mapper.branches],
        },
        "store": {
            "audit": store.gram[0].row_digests is not None,
        },
        "rng_state": _jsonable_rng(rng),
    }
    _write_arrays(path, arrays)
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def _jsonable_rng(rng: np.random.Generator | None):
    if rng is None:
        return None
    state = rng.bit_generator.state
    # the state dict holds plain ints/strings; make a defensive copy
    return json.loads(json.dumps(state))


def load_checkpoint(path) -> CheckpointData:
    """Rebuild all objects from ``path`` + ``path.json``."""
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    if not path.exists():
        raise FormatError(f"{path}: checkpoint file does not exist")
    if not sidecar.exists():
        raise FormatError(f"{sidecar}: checkpoint sidecar does not exist")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{sidecar}: invalid JSON ({err})") from err
    if meta.get("schema") != 1:
        raise FormatError(f"{sidecar}: unsupported schema {meta.get('schema')!r}")
    arrays = _read_arrays(path)

    gp = meta["gp"]
    hyper = GpHyper(n_heads=gp["n_heads"], kernel_dim=gp["kernel_dim"],
                    n_inducing=gp["n_inducing"], sigma_gp2=gp["sigma_gp2"],
                    sigma_g2=gp["sigma_g2"])
    pm = meta["predictor"]
    predictor = Predictor(
        layers=[_rebuild_layer(m, f"pred/{i}", arrays, path)
                for i, m in enumerate(pm["layers"])],
        n_heads=pm["n_heads"], wide_width=pm["wide_width"])
    mm = meta["mapper"]
    mapper = KernelMapper(
        backbone=[_rebuild_layer(m, f"map/bb/{i}", arrays, path)
                  for i, m in enumerate(mm["backbone"])],
        branches=[[_rebuild_layer(m, f"map/br/{h}/{i}", arrays, path)
                   for i, m in enumerate(branch)]
                  for h, branch in enumerate(mm["branches"])],
        kernel_dim=mm["kernel_dim"], alpha=mm["alpha"])

    audit = bool(meta["store"]["audit"])
    u = [_need(arrays, f"store/u/{h}", path) for h in range(hyper.n_heads)]
    v = [_need(arrays, f"store/v/{h}", path) for h in range(hyper.n_heads)]
    index_map = _need(arrays, "store/index_map", path)
    gram = [lowrank.gram_init(uh, with_audit=audit) for uh in u]
    store = InducingStore(u=u, v=v, gram=gram, index_map=index_map)

    return CheckpointData(hyper=hyper, predictor=predictor, mapper=mapper,
                          store=store, rng_state=meta["rng_state"],
                          iteration=int(meta["iteration"]))


def restore_rng(state: dict | None) -> np.random.Generator | None:
    """Generator whose bit-generator state equals the saved one."""
    if state is None:
        return None
    bitgen_name = state.get("bit_generator", "PCG64")
    cls = getattr(np.random, bitgen_name, None)
    if cls is None:
        raise FormatError(f"checkpoint: unknown bit generator {bitgen_name!r}")
    bg = cls()
    bg.state = state
    return np.random.Generator(bg)
