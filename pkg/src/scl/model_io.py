"""Sparse model files, dense checkpoints and CSV/JSON reports.

``.sclz`` layout, all integers little-endian::

    0   4 bytes   magic b"SCLZ"
    4   u16       format version (1)
    6   u16       reserved, zero
    8   u32       header length H
    12  H bytes   UTF-8 JSON header (arch, hyperparameters, seed, lambdas,
                  sparsity, layer and norm counts, BN epsilon)
    then, per masked layer:
        u32 ndim, u32 × ndim shape, u64 count,
        u64 × count row-major indices (strictly ascending),
        f32 × count surviving weight values
    then, per batch-norm layer:
        u32 features, f32 × features for gamma, beta, running mean, running var

The file must end exactly after the last record.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .layers import Network, build_network
from .masking import SparseRecord, extract_sparse

MAGIC = b"SCLZ"
VERSION = 1
BN_FIELDS = ("gamma", "beta", "running_mean", "running_var")


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def global_sparsity(records) -> float:
    kept = sum(len(r.indices) for r in records)
    total = sum(r.size for r in records)
    return 1.0 - kept / total


def encode_sparse(network: Network, seed=None, lambda1=None, lambda2=None) -> bytes:
    records = [extract_sparse(p) for p in network.params]
    header = {
        "arch": network.arch,
        "hyperparameters": network.hyperparameters(),
        "seed": seed,
        "lambda1": lambda1,
        "lambda2": lambda2,
        "sparsity": global_sparsity(records),
        "layers": len(records),
        "norms": len(network.norms),
        "bn_eps": network.norms[0].eps if network.norms else None,
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<HHI", VERSION, 0, len(head)) + head)
    for r in records:
        buf.write(struct.pack(f"<I{len(r.shape)}I", len(r.shape), *r.shape))
        buf.write(struct.pack("<Q", len(r.indices)))
        buf.write(r.indices.astype("<u8").tobytes())
        buf.write(r.values.astype("<f4").tobytes())
    for bn in network.norms:
        buf.write(struct.pack("<I", bn.features))
        for key in BN_FIELDS:
            buf.write(getattr(bn, key).astype("<f4").tobytes())
    return buf.getvalue()


def save_sparse(network: Network, path, seed=None, lambda1=None, lambda2=None) -> Path:
    atomic_write(path, encode_sparse(network, seed, lambda1, lambda2))
    return Path(path)


@dataclass
class SparseModel:
    header: dict
    records: list
    norms: list
    network: Network

    @property
    def sparsity(self):
        return global_sparsity(self.records)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_sparse(raw: bytes) -> SparseModel:
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a sparse model file (bad magic)", offset=0)
    version, _, head_len = r.unpack("<HHI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}, expected {VERSION}", offset=4)
    head_at = r.pos
    try:
        header = json.loads(r.take(head_len, "JSON header").decode())
        n_layers, n_norms = int(header["layers"]), int(header["norms"])
        arch, hyper = header["arch"], header["hyperparameters"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt header: {exc}", offset=head_at) from None

    records = []
    for i in range(n_layers):
        at = r.pos
        (ndim,) = r.unpack("<I", f"layer {i} rank")
        shape = r.unpack(f"<{ndim}I", f"layer {i} shape")
        (count,) = r.unpack("<Q", f"layer {i} count")
        idx_at = r.pos
        indices = np.frombuffer(r.take(8 * count, f"layer {i} indices"), dtype="<u8").astype(np.int64)
        values = np.frombuffer(r.take(4 * count, f"layer {i} values"), dtype="<f4").astype(np.float32)
        size = int(np.prod(shape))
        if count > size:
            raise FormatError(f"layer {i} stores {count} entries but has only {size} weights", offset=at)
        if count and np.any(np.diff(indices) <= 0):
            raise FormatError(f"layer {i} indices are not strictly ascending", offset=idx_at)
        if count and indices[-1] >= size:
            raise FormatError(f"layer {i} index {indices[-1]} outside shape {shape}", offset=idx_at)
        records.append(SparseRecord(tuple(shape), indices, values))

    norms = []
    for i in range(n_norms):
        (f,) = r.unpack("<I", f"norm {i} size")
        norms.append({
            key: np.frombuffer(r.take(4 * f, f"norm {i} {key}"), dtype="<f4").astype(np.float32)
            for key in BN_FIELDS
        })
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} unexpected trailing bytes", offset=r.pos)
    if header.get("sparsity") != global_sparsity(records):
        raise FormatError("header sparsity does not match stored indices", offset=head_at)

    network = build_network(arch, **hyper)
    if len(network.params) != n_layers or len(network.norms) != n_norms:
        raise FormatError(f"layer counts do not match architecture {arch!r}", offset=head_at)
    for layer, rec in zip(network.masked, records):
        if layer.param.shape != rec.shape:
            raise FormatError(f"{layer.name}: stored shape {rec.shape} != {layer.param.shape}", offset=head_at)
        layer.param.weight = rec.densify()
        mask = np.full(rec.size, -1.0, dtype=np.float32)
        mask[rec.indices] = 1.0
        layer.param.mask = mask.reshape(rec.shape)
    for bn, state in zip(network.norms, norms):
        if state["gamma"].shape[0] != bn.features:
            raise FormatError(f"{bn.name}: stored {state['gamma'].shape[0]} features, expected {bn.features}")
        for key in BN_FIELDS:
            setattr(bn, key, state[key])
        if header.get("bn_eps") is not None:
            bn.eps = header["bn_eps"]
    return SparseModel(header, records, norms, network)


def load_sparse(path) -> SparseModel:
    return decode_sparse(Path(path).read_bytes())


# checkpoints ------------------------------------------------------------------

def save_checkpoint(path, network: Network, config: dict | None = None):
    """Dense weights, mask variables and BN state as an ``.npz`` with fixed timestamps."""
    meta = {"arch": network.arch, "hyperparameters": network.hyperparameters(), "config": config or {}}
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    arrays.update(network.state_dict())
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    atomic_write(path, buf.getvalue())


def load_checkpoint(path):
    """Returns ``(network, config_dict)``."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        state = {k: z[k] for k in z.files if k != "__meta__"}
    network = build_network(meta["arch"], **meta["hyperparameters"])
    network.load_state_dict(state)
    return network, meta["config"]


# reports ----------------------------------------------------------------------

def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def csv_bytes(columns, rows) -> bytes:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return out.getvalue().encode()


def history_csv(history) -> bytes:
    cols = history.COLUMNS
    return csv_bytes(cols, ([getattr(r, c) for c in cols] for r in history.records))


def round6(v):
    if isinstance(v, dict):
        return {k: round6(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [round6(x) for x in v]
    if isinstance(v, (float, np.floating)):
        return float(f"{float(v):.6g}")
    if isinstance(v, np.integer):
        return int(v)
    return v


def json_bytes(obj) -> bytes:
    return (json.dumps(round6(obj), indent=2, sort_keys=True) + "\n").encode()


SWEEP_COLUMNS = ("lambda1", "seed", "params", "sparsity", "accuracy")


def export_report(history, path_csv, summary: dict | None = None, path_json=None):
    """Write one run's history CSV and, if given, its JSON summary."""
    atomic_write(path_csv, history_csv(history))
    if summary is not None and path_json is not None:
        atomic_write(path_json, json_bytes(summary))


def export_sweep(rows, path_csv, path_json=None):
    """``rows`` are dicts with the sweep columns (a Table-I-style summary)."""
    atomic_write(path_csv, csv_bytes(SWEEP_COLUMNS, ([r[c] for c in SWEEP_COLUMNS] for r in rows)))
    if path_json is not None:
        atomic_write(path_json, json_bytes({"runs": list(rows)}))
