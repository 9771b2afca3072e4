"""Binary checkpoint format for a :class:`~nets.ModelBundle`.

Layout (little endian)::

    b"TSD1"  uint32 version
    repeated until end of file:
        uint16 name length, UTF-8 name, uint8 rank, uint32 dims[rank], float64 values

Everything is stored as a named float array: parameters (``enc_z.0.weight``),
batch-norm running statistics (``adversary.1.running_mean``), the bundle
dimensions (``bundle.dims``), each network's layer table (``<role>.spec``,
one ``kind, width, activation`` row per layer, plus ``<role>.input_width``)
and, when the bundle has one, the input scaler (``scaler.mean``,
``scaler.scale``, ``scaler.var``, ``scaler.n_samples_seen``).
"""
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Optional, Tuple

import numpy as np
from sklearn.preprocessing import StandardScaler

from errors import CheckpointError
from nets import (
    ROLES, BatchNorm, Dense, ModelBundle, ModelDims, Network, NetworkSpec, SoftmaxHead, build,
)

logger = logging.getLogger(__name__)

MAGIC = b"TSD1"
VERSION = 1

_KINDS = {Dense: 0.0, BatchNorm: 1.0, SoftmaxHead: 2.0}
_ACTIVATIONS = {"none": 0.0, "relu": 1.0}


def _spec_table(spec: NetworkSpec) -> np.ndarray:
    rows = []
    for layer in spec.layers:
        width = layer.classes if isinstance(layer, SoftmaxHead) else getattr(layer, "width", 0)
        activation = _ACTIVATIONS[getattr(layer, "activation", "none")]
        rows.append([_KINDS[type(layer)], float(width), activation])
    return np.array(rows, dtype=np.float64)


def _spec_from_table(input_width: int, table: np.ndarray, role: str) -> NetworkSpec:
    if table.ndim != 2 or table.shape[1] != 3:
        raise CheckpointError(f"{role}.spec: expected a layers x 3 table, got shape {table.shape}")
    activations = {v: k for k, v in _ACTIVATIONS.items()}
    layers = []
    for kind, width, activation in table:
        act = activations.get(activation)
        if act is None:
            raise CheckpointError(f"{role}.spec: unknown activation code {activation}")
        if kind == 0.0:
            layers.append(Dense(int(width), act))
        elif kind == 1.0:
            layers.append(BatchNorm(act))
        elif kind == 2.0:
            layers.append(SoftmaxHead(int(width)))
        else:
            raise CheckpointError(f"{role}.spec: unknown layer kind code {kind}")
    return NetworkSpec(input_width, tuple(layers))


def _entries(bundle: ModelBundle) -> Dict[str, np.ndarray]:
    d = bundle.dims
    entries = {"bundle.dims": np.array([d.input_dim, d.s_dim, d.z_dim, d.n_classes], dtype=np.float64)}
    for role, net in bundle.networks().items():
        entries[f"{role}.input_width"] = np.array([net.input_width], dtype=np.float64)
        entries[f"{role}.spec"] = _spec_table(net.spec)
        for name, p in net.parameters().items():
            entries[f"{role}.{name}"] = p.data
        for name, buf in net.buffers().items():
            entries[f"{role}.{name}"] = buf
    if bundle.scaler is not None:
        s = bundle.scaler
        entries.update({"scaler.mean": s.mean_, "scaler.scale": s.scale_, "scaler.var": s.var_,
                        "scaler.n_samples_seen": np.array([float(s.n_samples_seen_)])})
    return entries


def _scaler(entries: Dict[str, np.ndarray], input_dim: int) -> Optional[StandardScaler]:
    if "scaler.mean" not in entries:
        return None
    scaler = StandardScaler()
    scaler.mean_ = _require(entries, "scaler.mean")
    scaler.scale_ = _require(entries, "scaler.scale")
    scaler.var_ = _require(entries, "scaler.var")
    scaler.n_samples_seen_ = int(_require(entries, "scaler.n_samples_seen")[0])
    for name in ("mean_", "scale_", "var_"):
        if getattr(scaler, name).shape != (input_dim,):
            raise CheckpointError(f"scaler.{name.rstrip('_')}: expected {input_dim} values, "
                                  f"got shape {getattr(scaler, name).shape}")
    scaler.n_features_in_ = input_dim
    return scaler


def save_checkpoint(bundle: ModelBundle, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in _entries(bundle).items():
            raw_name = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            f.write(struct.pack("<H", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())
    tmp.replace(path)
    logger.info("Saved checkpoint to %s", path)


def _read(f: BinaryIO, n: int, field: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError(f"checkpoint truncated while reading {field}")
    return raw


def _read_entries(f: BinaryIO) -> Dict[str, np.ndarray]:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, found {magic!r}")
    (version,) = struct.unpack("<I", _read(f, 4, "version"))
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has version {version}, expected {VERSION}")

    entries: Dict[str, np.ndarray] = {}
    index = 0
    while True:
        head = f.read(2)
        if not head:
            return entries
        if len(head) != 2:
            raise CheckpointError(f"checkpoint truncated while reading name length of entry {index}")
        (name_len,) = struct.unpack("<H", head)
        name = _read(f, name_len, f"name of entry {index}").decode("utf-8")
        (rank,) = struct.unpack("<B", _read(f, 1, f"rank of {name}"))
        dims: Tuple[int, ...] = struct.unpack(f"<{rank}I", _read(f, 4 * rank, f"dims of {name}"))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(_read(f, 8 * count, f"values of {name}"), dtype="<f8")
        entries[name] = values.astype(np.float64).reshape(dims)
        index += 1


def _require(entries: Dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in entries:
        raise CheckpointError(f"checkpoint is missing field {name}")
    return entries[name]


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as f:
        entries = _read_entries(f)

    dims_arr = _require(entries, "bundle.dims")
    if dims_arr.shape != (4,):
        raise CheckpointError(f"bundle.dims: expected 4 values, got shape {dims_arr.shape}")
    dims = ModelDims(*(int(v) for v in dims_arr))

    nets: Dict[str, Network] = {}
    for role in ROLES:
        if f"{role}.spec" not in entries and role == "s_classifier":
            nets[role] = None
            continue
        input_width = int(_require(entries, f"{role}.input_width")[0])
        spec = _spec_from_table(input_width, _require(entries, f"{role}.spec"), role)
        net = build(spec, 0, name=role)
        for name, p in net.parameters().items():
            stored = _require(entries, f"{role}.{name}")
            if stored.shape != p.shape:
                raise CheckpointError(f"{role}.{name}: stored shape {stored.shape}, network expects {p.shape}")
            p.assign(stored)
        net.load_buffers({name: _require(entries, f"{role}.{name}") for name in net.buffers()})
        nets[role] = net

    bundle = ModelBundle(dims=dims, scaler=_scaler(entries, dims.input_dim), **nets)
    try:
        bundle.validate()
    except ValueError as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from exc
    return bundle
