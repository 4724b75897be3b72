"""
Output files: RFC-4180 CSV (f64 with 17 significant digits), JSON summaries and
the FIMCOV01 binary tensor dump. Every write goes to a temp file in the target
directory and is moved into place with os.replace.

FIMCOV01 layout (little-endian):
  8 bytes   magic b"FIMCOV01"
  u64       P_s
  u64       N
  i64 x P_s subset (flat parameter indices)
  f64 x P_s^4 values, C order over (i, j, k, l)
"""

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable, List, Sequence, Tuple, Union

import numpy as np

from fimlab.errors import InputRejected, NumericalFailure
from fimlab.variance import CovTensor

MAGIC = b"FIMCOV01"

PathLike = Union[str, Path]


def fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return "" if v is None else str(v)


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.remove(tmp)
        except OSError:
            pass
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    return atomic_write_text(path, csv_text(header, rows))


def read_csv(path: PathLike) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalFailure("non_finite", f"{what} has non-finite entries", {"output": what})


def matrix_rows(values: np.ndarray, subset: Sequence[int]) -> List[Tuple[int, int, float]]:
    subset = [int(s) for s in subset]
    return [(subset[a], subset[b], float(values[a, b])) for a in range(len(subset)) for b in range(len(subset))]


def write_matrix_csv(path: PathLike, values: np.ndarray, subset: Sequence[int]) -> Path:
    _check_finite(values, Path(path).name)
    return write_csv(path, ["i", "j", "value"], matrix_rows(values, subset))


def read_matrix_csv(path: PathLike) -> Tuple[np.ndarray, List[int]]:
    _, rows = read_csv(path)
    subset = list(dict.fromkeys(int(r[0]) for r in rows))
    pos = {s: k for k, s in enumerate(subset)}
    out = np.zeros((len(subset), len(subset)))
    for i, j, v in rows:
        out[pos[int(i)], pos[int(j)]] = float(v)
    return out, subset


def write_tensor_csv(path: PathLike, cov: CovTensor) -> Path:
    _check_finite(cov.values, Path(path).name)
    sub = [int(s) for s in cov.subset]
    n = len(sub)

    def rows():
        for idx in np.ndindex(n, n, n, n):
            yield (sub[idx[0]], sub[idx[1]], sub[idx[2]], sub[idx[3]], float(cov.values[idx]))

    return write_csv(path, ["i", "j", "k", "l", "value"], rows())


def cov_to_bytes(cov: CovTensor) -> bytes:
    _check_finite(cov.values, "covariance tensor")
    n = int(cov.values.shape[0])
    head = MAGIC + struct.pack("<QQ", n, int(cov.N))
    sub = np.asarray(cov.subset, dtype="<i8").tobytes()
    vals = np.ascontiguousarray(cov.values, dtype="<f8").tobytes()
    return head + sub + vals


def write_cov_binary(path: PathLike, cov: CovTensor) -> Path:
    return atomic_write_bytes(path, cov_to_bytes(cov))


def read_cov_binary(path: PathLike) -> Tuple[np.ndarray, np.ndarray, int]:
    """Returns (values, subset, N)."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise InputRejected("invalid_config", "not a FIMCOV01 file", {"path": str(path)})
    n, N = struct.unpack("<QQ", data[8:24])
    off = 24
    subset = np.frombuffer(data[off:off + 8 * n], dtype="<i8").astype(int)
    off += 8 * n
    values = np.frombuffer(data[off:off + 8 * n**4], dtype="<f8").reshape((n,) * 4).copy()
    return values, subset, int(N)


def write_json(path: PathLike, obj: Any) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o: Any) -> Any:
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
