"""On-disk formats.

* Scenario documents: JSON, ``format_version`` 1, keys sorted.  Feature grids and
  ground-truth grids are not stored; they are re-derived from the layout on load.
* Grid dumps (``RMM1``): magic, then little-endian uint32 ``H, W, T, kind``,
  then ``T x H x W`` float32 values.
* Named tensors (``RMMT``): magic, uint32 count, then per tensor a uint16 name
  length, UTF-8 name, uint8 rank, uint32 dims and float32 values, sorted by name.
* Tables: tab-separated text with a header line.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .grid import GridSpec, RiskMap, Scenario, VehicleRecord
from .planner import PlannedTrajectory
from .sim import DemonstrationSet, build_scenario

FORMAT_VERSION = 1
GRID_MAGIC = b"RMM1"
TENSOR_MAGIC = b"RMMT"
KIND_OCCUPANCY, KIND_RISK, KIND_FEATURES = 0, 1, 2


def _json_line(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(", ", ": "), allow_nan=False)


def dumps_document(doc: Mapping) -> str:
    """One top-level key per line, values compact; stable across runs."""
    body = ",\n".join(f"  {json.dumps(k)}: {_json_line(doc[k])}" for k in sorted(doc))
    return "{\n" + body + "\n}\n"


def write_json(path, doc: Mapping) -> None:
    Path(path).write_text(dumps_document(doc), encoding="utf-8")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _trajectories_doc(trajs: Sequence[PlannedTrajectory]) -> list:
    return [{"vehicle_id": int(t.vehicle_id), "poses": np.asarray(t.poses).tolist()} for t in trajs]


def _trajectories(doc: list) -> tuple:
    return tuple(PlannedTrajectory(np.array(d["poses"], dtype=np.float64), int(d["vehicle_id"])) for d in doc)


def scenario_document(scenario: Scenario, demos: DemonstrationSet | None = None,
                      planned: Sequence[PlannedTrajectory] | None = None, extra: Mapping | None = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "seed": scenario.seed,
        "grid": scenario.grid.to_dict(),
        "dt": scenario.dt,
        "history_dt": scenario.history_dt,
        "horizon": scenario.horizon,
        "history_length": scenario.history_length,
        "vehicles": [v.to_dict() for v in scenario.vehicles],
        "history": scenario.history.tolist(),
        "future": scenario.future.tolist(),
        "meta": dict(scenario.meta),
    }
    if demos is not None:
        doc["demonstrations"] = {
            "archetypes": list(demos.archetypes),
            "weights": np.asarray(demos.weights).tolist(),
            "trajectories": _trajectories_doc(demos.trajectories),
        }
    if planned is not None:
        doc["planned"] = _trajectories_doc(planned)
    if extra:
        doc.update(extra)
    return doc


@dataclass(frozen=True, eq=False)
class ScenarioFile:
    scenario: Scenario
    demonstrations: DemonstrationSet | None
    planned: tuple | None
    document: dict


def save_scenario(path, scenario: Scenario, demos: DemonstrationSet | None = None,
                  planned: Sequence[PlannedTrajectory] | None = None, extra: Mapping | None = None) -> None:
    write_json(path, scenario_document(scenario, demos, planned, extra))


def load_scenario(path) -> ScenarioFile:
    doc = read_json(path)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported scenario format_version {version!r}")
    try:
        vehicles = [VehicleRecord.from_dict(v) for v in doc["vehicles"]]
        n = len(vehicles)
        horizon = int(doc["horizon"])
        history = np.array(doc["history"], dtype=np.float64).reshape(n, int(doc["history_length"]), 4)
        future = np.array(doc["future"], dtype=np.float64).reshape(n, horizon - 1, 4)
        sc = build_scenario(GridSpec.from_dict(doc["grid"]), vehicles, history, future, dt=float(doc["dt"]),
                            history_dt=float(doc["history_dt"]), seed=doc.get("seed"), meta=doc.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed scenario document ({exc})") from exc
    demos = None
    if "demonstrations" in doc:
        d = doc["demonstrations"]
        w = np.array(d["weights"], dtype=np.float64).reshape(n, horizon, -1)
        demos = DemonstrationSet(_trajectories(d["trajectories"]), tuple(d["archetypes"]), w)
    planned = _trajectories(doc["planned"]) if "planned" in doc else None
    return ScenarioFile(sc, demos, planned, doc)


# --- binary grids --------------------------------------------------------------------

def write_grid(path, values: np.ndarray, kind: int) -> None:
    """``values`` is ``T x H x W`` (or ``H x W`` for a single slice)."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ShapeError(f"grid dump needs T x H x W values, got shape {a.shape}")
    t, h, w = a.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC + struct.pack("<4I", h, w, t, kind))
        f.write(a.astype("<f4").tobytes(order="C"))


def read_grid(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != GRID_MAGIC:
        raise ConfigError(f"{path}: not a grid dump")
    h, w, t, kind = struct.unpack("<4I", data[4:20])
    payload = np.frombuffer(data, dtype="<f4", offset=20)
    if payload.size != t * h * w:
        raise ConfigError(f"{path}: truncated grid payload")
    return payload.reshape(t, h, w).astype(np.float64), kind


def write_risk_map(path, risk: RiskMap) -> None:
    h, w = risk.grid_shape
    write_grid(path, risk.weights.reshape(-1, h, w), KIND_RISK)


def read_risk_map(path) -> RiskMap:
    values, kind = read_grid(path)
    if kind != KIND_RISK:
        raise ConfigError(f"{path}: grid dump kind {kind} is not a risk map")
    n, h, w = values.shape
    flat = values.reshape(n, h * w)
    # float32 storage: renormalize so rows sum to 1 again in double precision
    return RiskMap(flat / flat.sum(axis=1, keepdims=True), (h, w))


# --- named tensors ----------------------------------------------------------------------

def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [TENSOR_MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        a = np.asarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise ConfigError(f"{path}: not a named-tensor file")
    try:
        (count,) = struct.unpack_from("<I", data, 4)
        pos = 8
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise ConfigError(f"{path}: truncated named-tensor file") from exc
    return out


# --- tables -------------------------------------------------------------------------------

def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_table(path, columns: Sequence[str], rows) -> None:
    lines = ["\t".join(columns)]
    for r in rows:
        if len(r) != len(columns):
            raise ShapeError(f"row has {len(r)} cells, header has {len(columns)}")
        lines.append("\t".join(format_cell(v) for v in r))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_table(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:] if ln]
