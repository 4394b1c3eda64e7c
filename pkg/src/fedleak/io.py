"""On-disk format for federated runs.

A run directory holds

* ``run.json``: config, fold, client table, SER dims and per-round metrics;
* ``updates.bin``: one record per logged update, a little-endian header
  ``round:u32 client_index:u32 gender:u8 kind:u8 n_k:u32 T:u32`` followed by
  ``dW_1, db_1, dW_2, ...`` as little-endian f64, row-major;
* ``params.bin``: global snapshots, each ``round:u32`` followed by the
  parameter arrays in the same layer order.

Shapes are not repeated per record; they come from ``ser_dims`` in
``run.json``. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .fl import Algorithm, FLConfig, LogEntry, TrainedRun, UpdateLog
from .nn.mlp import MlpParams, ModelUpdate, UpdateKind

RUN_FORMAT_VERSION = 1
_HEADER = struct.Struct("<IIBBII")
_ROUND = struct.Struct("<I")
_F8 = np.dtype("<f8")


def dump_json(obj, path: Path):
    """Deterministic JSON: sorted keys, fixed indent, trailing newline."""
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n", encoding="utf-8")


def _layer_shapes(dims) -> list[tuple[tuple[int, int], tuple[int]]]:
    return [((int(a), int(b)), (int(b),)) for a, b in zip(dims[:-1], dims[1:])]


def _write_arrays(fh, arrays):
    for a in arrays:
        fh.write(np.ascontiguousarray(a, dtype=_F8).tobytes())


def _read_arrays(buf: memoryview, pos: int, shapes):
    out = []
    for ws, bs in shapes:
        for shape in (ws, bs):
            n = int(np.prod(shape))
            end = pos + 8 * n
            if end > len(buf):
                raise ConfigError("truncated payload")
            out.append(np.frombuffer(buf[pos:end], dtype=_F8).astype(np.float64).reshape(shape))
            pos = end
    return out, pos


def save_run(run: TrainedRun, path, extra: dict | None = None) -> Path:
    """Write ``run`` into directory ``path`` (created if needed)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dims = run.params.dims
    shapes = _layer_shapes(dims)
    log = run.log
    meta = {
        "format_version": RUN_FORMAT_VERSION,
        "config": run.config.to_dict(),
        "fold": run.fold,
        "ser_dims": list(dims),
        "algorithm": log.algorithm.value,
        "lr": log.lr,
        "client_ids": list(log.client_ids),
        "n_updates": len(log.entries),
        "snapshot_rounds": sorted(log.snapshots),
        "history": run.history,
        "test_metrics": None if run.test_metrics is None else run.test_metrics.to_dict(),
    }
    if extra:
        meta.update(extra)
    with open(path / "updates.bin", "wb") as fh:
        for e in log.entries:
            if e.update.shapes != shapes:
                raise ConfigError("update shapes disagree with the run's model")
            fh.write(_HEADER.pack(e.round, e.client_index, e.gender, e.update.kind.code, e.n_k, e.T))
            _write_arrays(fh, e.update.arrays())
    with open(path / "params.bin", "wb") as fh:
        for t in sorted(log.snapshots):
            fh.write(_ROUND.pack(t))
            _write_arrays(fh, log.snapshots[t].arrays())
    dump_json(meta, path / "run.json")
    return path


def load_run_meta(path) -> dict:
    path = Path(path)
    run_json = path / "run.json"
    if not run_json.is_file():
        raise ConfigError(f"missing run artifacts: {run_json}")
    try:
        meta = json.loads(run_json.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed {run_json}: {exc}") from exc
    if meta.get("format_version") != RUN_FORMAT_VERSION:
        raise ConfigError(f"unsupported run format_version {meta.get('format_version')!r}")
    return meta


def load_log(path) -> tuple[UpdateLog, dict]:
    """Read the update log (with snapshots) of a saved run."""
    path = Path(path)
    meta = load_run_meta(path)
    shapes = _layer_shapes(meta["ser_dims"])
    log = UpdateLog(Algorithm(meta["algorithm"]), float(meta["lr"]), list(meta["client_ids"]))
    for name in ("updates.bin", "params.bin"):
        if not (path / name).is_file():
            raise ConfigError(f"missing run artifacts: {path / name}")
    buf = memoryview((path / "updates.bin").read_bytes())
    pos = 0
    while pos < len(buf):
        if pos + _HEADER.size > len(buf):
            raise ConfigError("truncated update header")
        rnd, ci, gender, kind, n_k, T = _HEADER.unpack_from(buf, pos)
        pos += _HEADER.size
        arrays, pos = _read_arrays(buf, pos, shapes)
        if ci >= len(log.client_ids):
            raise ConfigError(f"client index {ci} out of range")
        upd = ModelUpdate([(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)],
                          rnd, log.client_ids[ci], UpdateKind.from_code(kind))
        log.append(LogEntry(upd, ci, gender, n_k, T))
    if len(log.entries) != meta["n_updates"]:
        raise ConfigError(f"updates.bin holds {len(log.entries)} records, run.json says {meta['n_updates']}")
    buf = memoryview((path / "params.bin").read_bytes())
    pos = 0
    while pos < len(buf):
        (rnd,) = _ROUND.unpack_from(buf, pos)
        pos += _ROUND.size
        arrays, pos = _read_arrays(buf, pos, shapes)
        log.snapshots[rnd] = MlpParams.from_arrays(arrays)
    return log, meta


def load_run(path) -> TrainedRun:
    log, meta = load_log(path)
    final = max(log.snapshots) if log.snapshots else None
    if final is None:
        raise ConfigError("run has no parameter snapshots")
    return TrainedRun(log.snapshots[final], FLConfig.from_dict(meta["config"]), log, meta["history"], meta["fold"])
