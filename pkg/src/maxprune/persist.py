"""Checkpoint files (dense and CSR) and experiment reports.

Checkpoint layout, all integers little-endian::

    b"MXPN" | u32 version | u32 header length | header (UTF-8 JSON) | payload

The header lists every tensor in payload order with its storage kind.
Dense tensors are raw float32; CSR tensors are ``row_ptr`` (u32, rows+1),
``col_idx`` (u32, nnz) and ``values`` (float32, nnz). Prune masks travel
in the header as base64 packed bits, so a dense payload is exactly
4 bytes per parameter element.
"""

from __future__ import annotations

import base64
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
from scipy import sparse

from .errors import FormatError, MaxPruneError, StructureError
from .network import MaxoutState, Network, NetworkSpec

logger = logging.getLogger("maxprune.persist")

MAGIC = b"MXPN"
VERSION = 1
SPARSE_MIN_ZERO_FRACTION = 0.5
_PREFIX = struct.Struct("<4sII")

REPORT_HEADER = (
    "stage",
    "k",
    "iteration",
    "accuracy",
    "orig_weights",
    "remaining_weights",
    "masked_weights",
    "pw_percent",
    "combined_percent",
    "dead_fraction",
    "seconds",
)


@dataclass
class ExperimentRecord:
    """One row of a reproduction report."""

    stage: str
    k: int
    iteration: int
    accuracy: float
    orig_weights: int
    remaining_weights: int
    masked_weights: int
    pw_percent: float
    combined_percent: float
    dead_fraction: float
    seconds: float = 0.0

    @classmethod
    def from_account(
        cls,
        stage: str,
        k: int,
        iteration: int,
        accuracy: float,
        account: Any,
        dead_fraction: float,
        seconds: float = 0.0,
    ) -> "ExperimentRecord":
        """Build a record from a :class:`~maxprune.pruning.ParamAccount`."""

        return cls(
            stage=stage,
            k=k,
            iteration=iteration,
            accuracy=accuracy,
            orig_weights=account.original_total,
            remaining_weights=account.remaining_total,
            masked_weights=account.masked_total,
            pw_percent=account.pw_percent,
            combined_percent=account.combined_percent,
            dead_fraction=dead_fraction,
            seconds=seconds,
        )


# --- CSR -----------------------------------------------------------------


def encode_csr(matrix: np.ndarray) -> Tuple[bytes, int]:
    """Return the CSR blob of a 2-D float32 matrix and its nnz."""

    csr = sparse.csr_matrix(matrix)
    csr.sort_indices()
    blob = (
        csr.indptr.astype("<u4").tobytes()
        + csr.indices.astype("<u4").tobytes()
        + csr.data.astype("<f4").tobytes()
    )
    return blob, int(csr.nnz)


def decode_csr(blob: bytes, rows: int, cols: int, nnz: int, offset: int = 0) -> np.ndarray:
    """Rebuild the dense float32 matrix from a CSR blob, validating invariants."""

    expected = 4 * (rows + 1) + 8 * nnz
    if len(blob) != expected:
        raise FormatError(f"CSR blob has {len(blob)} bytes, expected {expected}", offset=offset)
    raw = np.frombuffer(blob, dtype=np.uint8)
    split = 4 * (rows + 1)
    row_ptr = raw[:split].view("<u4").astype(np.int64)
    col_idx = raw[split : split + 4 * nnz].view("<u4").astype(np.int64)
    values = raw[split + 4 * nnz :].view("<f4")

    if row_ptr[0] != 0 or np.any(np.diff(row_ptr) < 0):
        bad = int(np.argmax(np.diff(row_ptr) < 0)) + 1 if row_ptr[0] == 0 else 0
        raise FormatError("CSR row_ptr must start at 0 and never decrease", offset=offset + 4 * bad)
    if row_ptr[-1] != nnz:
        raise FormatError(
            f"CSR row_ptr ends at {row_ptr[-1]}, expected nnz={nnz}", offset=offset + 4 * rows
        )
    col_base = offset + 4 * (rows + 1)
    if nnz and (col_idx.max() >= cols):
        bad = int(np.argmax(col_idx >= cols))
        raise FormatError(f"CSR column index out of range (cols={cols})", offset=col_base + 4 * bad)
    if nnz > 1:
        same_row = np.ones(nnz - 1, dtype=bool)
        starts = row_ptr[1:-1]
        starts = starts[(starts > 0) & (starts < nnz)]
        same_row[starts - 1] = False
        broken = same_row & (np.diff(col_idx) <= 0)
        if broken.any():
            bad = int(np.argmax(broken)) + 1
            raise FormatError(
                "CSR column indices must strictly increase within a row",
                offset=col_base + 4 * bad,
            )
    dense = sparse.csr_matrix((values, col_idx, row_ptr), shape=(rows, cols)).toarray()
    return dense.astype(np.float32)


def _use_csr(array: np.ndarray) -> bool:
    if array.ndim not in (2, 4) or array.size == 0:
        return False
    zeros = array == 0
    if np.any(zeros & np.signbit(array)):
        # CSR drops explicit zeros and with them the sign of -0.0.
        return False
    return zeros.mean() >= SPARSE_MIN_ZERO_FRACTION


# --- checkpoints ---------------------------------------------------------


def _tensor_order(net: Network) -> List[str]:
    names: List[str] = []
    for layer in net.spec.param_layers:
        names += [f"{layer.name}.weight", f"{layer.name}.bias"]
    return names


def save_checkpoint(net: Network, path: str | Path, sparse_storage: bool = False) -> None:
    """Write ``net`` to ``path``; weights mostly zero go to CSR when asked."""

    entries: List[Dict[str, Any]] = []
    blobs: List[bytes] = []
    offset = 0
    for name in _tensor_order(net):
        array = np.ascontiguousarray(net.params[name], dtype="<f4")
        entry: Dict[str, Any] = {"name": name, "shape": list(array.shape)}
        if sparse_storage and name.endswith(".weight") and _use_csr(array):
            rows = array.shape[0]
            blob, nnz = encode_csr(array.reshape(rows, -1))
            entry.update(storage="csr", rows=rows, cols=array.size // rows, nnz=nnz)
        else:
            blob = array.tobytes()
            entry["storage"] = "dense"
        entry.update(offset=offset, nbytes=len(blob))
        offset += len(blob)
        entries.append(entry)
        blobs.append(blob)

    maxout = None
    if net.maxout is not None:
        maxout = {
            "layer": net.maxout.layer,
            "source": net.maxout.source,
            "k_original": net.maxout.k_original,
            "k_current": net.maxout.k_current,
            "survivors": net.maxout.survivors.tolist(),
        }
    masks = {
        name: {
            "shape": list(mask.shape),
            "bits": base64.b64encode(np.packbits(mask.ravel())).decode("ascii"),
        }
        for name, mask in sorted(net.masks.items())
    }
    header = json.dumps(
        {"spec": net.spec.to_dict(), "maxout": maxout, "tensors": entries, "masks": masks},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    try:
        with open(path, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)
    except OSError as exc:
        raise MaxPruneError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info(f"Saved checkpoint {path} ({offset} payload bytes)")


_HEADER_ERRORS = (KeyError, TypeError, ValueError, StructureError)


def _read_tensor(entry: Dict[str, Any], blob: bytes, where: int, path: str | Path) -> np.ndarray:
    name, shape, storage = entry["name"], tuple(int(d) for d in entry["shape"]), entry["storage"]
    if any(d < 0 for d in shape):
        raise FormatError(f"{path}: tensor {name} has negative shape {shape}", offset=where)
    if storage == "dense":
        if len(blob) != 4 * math.prod(shape):
            raise FormatError(f"{path}: tensor {name} has wrong byte size", offset=where)
        return np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(shape)
    if storage == "csr":
        rows, cols, nnz = int(entry["rows"]), int(entry["cols"]), int(entry["nnz"])
        if min(rows, cols, nnz) < 0 or rows * cols != math.prod(shape):
            raise FormatError(
                f"{path}: CSR tensor {name} is {rows}x{cols}, shape is {shape}", offset=where
            )
        return decode_csr(blob, rows, cols, nnz, where).reshape(shape)
    raise FormatError(f"{path}: unknown storage {storage!r} for {name}", offset=where)


def _read_maxout(m: Dict[str, Any]) -> MaxoutState:
    k_current = int(m["k_current"])
    survivors = np.asarray(m["survivors"], dtype=np.int64)
    if k_current < 1 or survivors.ndim != 2 or survivors.shape[1] != k_current:
        raise ValueError(f"survivors of shape {survivors.shape} do not match k={k_current}")
    return MaxoutState(
        layer=str(m["layer"]),
        source=str(m["source"]),
        k_original=int(m["k_original"]),
        k_current=k_current,
        survivors=survivors,
        win_counts=np.zeros(survivors.shape, dtype=np.uint64),
    )


def _read_mask(item: Dict[str, Any]) -> np.ndarray:
    shape = tuple(int(d) for d in item["shape"])
    bits = np.frombuffer(base64.b64decode(item["bits"], validate=True), dtype=np.uint8)
    count = math.prod(shape)
    if any(d < 0 for d in shape) or bits.size != (count + 7) // 8:
        raise ValueError(f"mask bits do not cover shape {shape}")
    return np.unpackbits(bits, count=count).astype(bool).reshape(shape)


def load_checkpoint(path: str | Path) -> Network:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Any malformed part raises :class:`FormatError` with the byte offset of
    the header or tensor it was found in.
    """

    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated prefix", offset=len(raw))
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    start = _PREFIX.size
    if len(raw) < start + header_len:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
        spec = NetworkSpec.from_dict(header["spec"])
        entries = list(header["tensors"])
        sizes = [(int(e["offset"]), int(e["nbytes"])) for e in entries]
        maxout = _read_maxout(header["maxout"]) if header.get("maxout") is not None else None
        masks = {str(name): _read_mask(item) for name, item in header.get("masks", {}).items()}
    except _HEADER_ERRORS as exc:
        raise FormatError(f"{path}: invalid header: {exc}", offset=start) from exc

    payload_start = start + header_len
    payload = raw[payload_start:]
    expected_len = sum(nbytes for _, nbytes in sizes)
    if len(payload) != expected_len or any(nbytes < 0 for _, nbytes in sizes):
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, header describes {expected_len}",
            offset=payload_start + min(len(payload), expected_len),
        )

    params: Dict[str, np.ndarray] = {}
    cursor = 0
    for entry, (offset, nbytes) in zip(entries, sizes):
        where = payload_start + cursor
        if offset != cursor:
            raise FormatError(f"{path}: tensor {entry.get('name')} out of order", offset=where)
        try:
            params[str(entry["name"])] = _read_tensor(entry, payload[cursor : cursor + nbytes], where, path)
        except _HEADER_ERRORS as exc:
            raise FormatError(f"{path}: malformed tensor entry: {exc}", offset=where) from exc
        cursor += nbytes

    net = Network(spec=spec, params=params, maxout=maxout, masks=masks)
    try:
        net.validate()
    except (StructureError, KeyError) as exc:
        raise FormatError(f"{path}: inconsistent network: {exc}", offset=start) from exc
    return net


# --- reports -------------------------------------------------------------


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_report(records: List[ExperimentRecord], path: str | Path) -> None:
    """CSV with the fixed report header; floats to 6 significant digits."""

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for record in records:
            row = asdict(record)
            writer.writerow([_format_value(row[key]) for key in REPORT_HEADER])


def read_report(path: str | Path) -> List[ExperimentRecord]:
    """Parse a report written by :func:`write_report`."""

    types = {f.name: f.type for f in fields(ExperimentRecord)}
    records: List[ExperimentRecord] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != REPORT_HEADER:
            raise FormatError(f"{path}: unexpected report header {reader.fieldnames}", offset=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                values = {
                    key: (row[key] if types[key] == "str" else int(row[key]) if types[key] == "int" else float(row[key]))
                    for key in REPORT_HEADER
                }
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}", offset=lineno) from exc
            records.append(ExperimentRecord(**values))
    return records


def write_history(history: Any, path: str | Path) -> None:
    """Training history as CSV: iteration, loss, lr, accuracy."""

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("iteration", "loss", "lr", "accuracy"))
        for entry in history.entries:
            accuracy = "" if entry.accuracy is None else _format_value(entry.accuracy)
            writer.writerow((entry.iteration, _format_value(entry.loss), _format_value(entry.lr), accuracy))
