"""Random problem instances, datasets, and their on-disk formats.

Every instance of a dataset draws from its own Philox stream, keyed by
``SeedSequence(seed, spawn_key=(index,))``. Instances therefore do not depend
on generation order and can be produced in parallel.

Binary layout (all little-endian)::

    b"POMODS1"            magic, format version 1
    u8  kind              0=tsp 1=cvrp 2=kp
    u64 count
    u64 seed
    count x (u32 length, payload)

Payloads:

* tsp:  u32 m, m*2 f64 coords
* cvrp: u32 m, f64 capacity, f64 demand_scale, 2 f64 depot, m*2 f64 customers,
  m f64 demands
* kp:   u32 m, f64 capacity, m*2 f64 (weight, value)

The JSON-lines mirror has a header object on the first line followed by one
instance object per line.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from pomo.errors import DatasetFormatError, DatasetSchemaError

MAGIC = b"POMODS1"
KINDS = ("tsp", "cvrp", "kp")

CVRP_DEMAND_SCALE = {20: 30.0, 50: 40.0, 100: 50.0}
KP_CAPACITY = {50: 12.5, 100: 25.0, 200: 25.0}


def _arrays_equal(a, b) -> bool:
    return np.array_equal(np.asarray(a), np.asarray(b))


@dataclass(eq=False)
class TspInstance:
    coords: np.ndarray  # (m, 2)

    kind = "tsp"

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (m, 2), got {self.coords.shape}")
        if self.coords.shape[0] < 2:
            raise ValueError("a TSP instance needs at least 2 nodes")

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other):
        return isinstance(other, TspInstance) and _arrays_equal(self.coords, other.coords)


@dataclass(eq=False)
class CvrpInstance:
    depot: np.ndarray  # (2,)
    customers: np.ndarray  # (m, 2)
    demands: np.ndarray  # (m,), already divided by demand_scale
    capacity: float = 1.0
    demand_scale: float = 30.0

    kind = "cvrp"

    def __post_init__(self):
        self.depot = np.ascontiguousarray(self.depot, dtype=np.float64).reshape(2)
        self.customers = np.ascontiguousarray(self.customers, dtype=np.float64)
        self.demands = np.ascontiguousarray(self.demands, dtype=np.float64)
        self.capacity = float(self.capacity)
        self.demand_scale = float(self.demand_scale)
        if self.customers.ndim != 2 or self.customers.shape[1] != 2:
            raise ValueError(f"customers must have shape (m, 2), got {self.customers.shape}")
        if self.demands.shape != (self.customers.shape[0],):
            raise ValueError("need exactly one demand per customer")
        if self.customers.shape[0] < 1:
            raise ValueError("a CVRP instance needs at least 1 customer")
        if np.any(self.demands > self.capacity):
            raise ValueError("a customer demand exceeds the vehicle capacity")

    @property
    def size(self) -> int:
        return self.customers.shape[0]

    @property
    def locations(self) -> np.ndarray:
        """Depot at row 0 followed by the customers; the node indexing used by ``env``."""
        return np.vstack([self.depot[None, :], self.customers])

    def __eq__(self, other):
        return (
            isinstance(other, CvrpInstance)
            and _arrays_equal(self.depot, other.depot)
            and _arrays_equal(self.customers, other.customers)
            and _arrays_equal(self.demands, other.demands)
            and self.capacity == other.capacity
            and self.demand_scale == other.demand_scale
        )


@dataclass(eq=False)
class KpInstance:
    items: np.ndarray  # (m, 2) columns: weight, value
    capacity: float

    kind = "kp"

    def __post_init__(self):
        self.items = np.ascontiguousarray(self.items, dtype=np.float64)
        self.capacity = float(self.capacity)
        if self.items.ndim != 2 or self.items.shape[1] != 2:
            raise ValueError(f"items must have shape (m, 2), got {self.items.shape}")
        if self.items.shape[0] < 1:
            raise ValueError("a KP instance needs at least 1 item")
        if not self.capacity > 0:
            raise ValueError("knapsack capacity must be positive")

    @property
    def size(self) -> int:
        return self.items.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return self.items[:, 0]

    @property
    def values(self) -> np.ndarray:
        return self.items[:, 1]

    def __eq__(self, other):
        return (
            isinstance(other, KpInstance)
            and _arrays_equal(self.items, other.items)
            and self.capacity == other.capacity
        )


ProblemInstance = Union[TspInstance, CvrpInstance, KpInstance]


@dataclass(eq=False)
class Dataset:
    kind: str
    seed: int
    instances: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        for inst in self.instances:
            if inst.kind != self.kind:
                raise DatasetSchemaError(f"{inst.kind} instance in a {self.kind} dataset")

    @property
    def size(self) -> int:
        return len(self.instances)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.kind == other.kind
            and self.seed == other.seed
            and len(self.instances) == len(other.instances)
            and all(a == b for a, b in zip(self.instances, other.instances))
        )


# --------------------------------------------------------------------------
# generation

def instance_rng(seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for instance ``index`` of a dataset seeded by ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def default_demand_scale(m: int) -> float:
    if m in CVRP_DEMAND_SCALE:
        return CVRP_DEMAND_SCALE[m]
    return float(min(50, max(30, math.ceil(30 + 20 * (m - 20) / 80))))


def default_kp_capacity(m: int) -> float:
    if m in KP_CAPACITY:
        return KP_CAPACITY[m]
    return min(m / 4.0, 25.0)


def _open_unit(rng: np.random.Generator, shape) -> np.ndarray:
    # strictly inside (0, 1)
    x = rng.random(shape)
    return np.clip(x, np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0))


def generate_tsp(m: int, rng: np.random.Generator) -> TspInstance:
    if m < 2:
        raise ValueError(f"TSP needs m >= 2 nodes, got {m}")
    return TspInstance(rng.random((m, 2)))


def generate_cvrp(m: int, rng: np.random.Generator, demand_scale: float | None = None) -> CvrpInstance:
    if m < 1:
        raise ValueError(f"CVRP needs m >= 1 customers, got {m}")
    scale = default_demand_scale(m) if demand_scale is None else float(demand_scale)
    if scale < 9:
        raise ValueError("demand_scale below 9 lets a single demand exceed capacity")
    depot = rng.random(2)
    customers = rng.random((m, 2))
    raw = rng.integers(1, 10, size=m)
    return CvrpInstance(depot, customers, raw / scale, capacity=1.0, demand_scale=scale)


def generate_kp(m: int, rng: np.random.Generator, capacity: float | None = None) -> KpInstance:
    if m < 1:
        raise ValueError(f"KP needs m >= 1 items, got {m}")
    cap = default_kp_capacity(m) if capacity is None else float(capacity)
    return KpInstance(_open_unit(rng, (m, 2)), cap)


GENERATORS = {"tsp": generate_tsp, "cvrp": generate_cvrp, "kp": generate_kp}


def generate(kind: str, m: int, rng: np.random.Generator, **overrides) -> ProblemInstance:
    try:
        gen = GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown problem kind {kind!r}") from None
    return gen(m, rng, **overrides)


def make_dataset(kind: str, m: int, count: int, seed: int, **overrides) -> Dataset:
    if count < 0:
        raise ValueError("count must be non-negative")
    instances = [generate(kind, m, instance_rng(seed, i), **overrides) for i in range(count)]
    return Dataset(kind, int(seed), instances)


# --------------------------------------------------------------------------
# binary format

_HEADER = struct.Struct("<7sBQQ")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}


def _encode_instance(inst: ProblemInstance) -> bytes:
    m = inst.size
    head = struct.pack("<I", m)
    if inst.kind == "tsp":
        body = inst.coords.astype("<f8").tobytes()
    elif inst.kind == "cvrp":
        body = (
            struct.pack("<dd", inst.capacity, inst.demand_scale)
            + inst.depot.astype("<f8").tobytes()
            + inst.customers.astype("<f8").tobytes()
            + inst.demands.astype("<f8").tobytes()
        )
    else:
        body = struct.pack("<d", inst.capacity) + inst.items.astype("<f8").tobytes()
    return head + body


def _record_length(kind: str, m: int) -> int:
    if kind == "tsp":
        return 4 + 16 * m
    if kind == "cvrp":
        return 4 + 16 + 16 + 24 * m
    return 4 + 8 + 16 * m


def _decode_instance(kind: str, payload: bytes, offset: int) -> ProblemInstance:
    if len(payload) < 4:
        raise DatasetFormatError("record too short for its size field", offset)
    (m,) = struct.unpack_from("<I", payload)
    if len(payload) != _record_length(kind, m):
        raise DatasetFormatError(
            f"{kind} record of size {m} should be {_record_length(kind, m)} bytes, got {len(payload)}",
            offset,
        )
    floats = np.frombuffer(payload, dtype="<f8", offset=4).astype(np.float64)
    try:
        if kind == "tsp":
            return TspInstance(floats.reshape(m, 2))
        if kind == "cvrp":
            cap, scale = floats[0], floats[1]
            depot = floats[2:4]
            customers = floats[4 : 4 + 2 * m].reshape(m, 2)
            demands = floats[4 + 2 * m :]
            return CvrpInstance(depot, customers, demands, capacity=cap, demand_scale=scale)
        return KpInstance(floats[1:].reshape(m, 2), floats[0])
    except ValueError as exc:
        raise DatasetSchemaError(f"invalid {kind} record: {exc}", offset) from None


def dataset_to_bytes(ds: Dataset) -> bytes:
    parts = [_HEADER.pack(MAGIC, _KIND_CODE[ds.kind], len(ds.instances), ds.seed)]
    for inst in ds.instances:
        rec = _encode_instance(inst)
        parts.append(struct.pack("<I", len(rec)))
        parts.append(rec)
    return b"".join(parts)


def dataset_from_bytes(data: bytes, expected_kind: str | None = None) -> Dataset:
    if len(data) < _HEADER.size:
        raise DatasetFormatError("file shorter than the dataset header", len(data))
    magic, code, count, seed = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if code >= len(KINDS):
        raise DatasetFormatError(f"unknown kind code {code}", 7)
    kind = KINDS[code]
    if expected_kind is not None and kind != expected_kind:
        raise DatasetSchemaError(f"expected a {expected_kind} dataset, file holds {kind}")
    pos = _HEADER.size
    instances = []
    for _ in range(count):
        if pos + 4 > len(data):
            raise DatasetFormatError("truncated record length", pos)
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + length > len(data):
            raise DatasetFormatError(f"truncated record: need {length} bytes", pos)
        instances.append(_decode_instance(kind, data[pos : pos + length], pos))
        pos += length
    if pos != len(data):
        raise DatasetFormatError(f"{len(data) - pos} trailing bytes after {count} records", pos)
    return Dataset(kind, int(seed), instances)


# --------------------------------------------------------------------------
# JSON-lines mirror

def instance_to_dict(inst: ProblemInstance) -> dict:
    if inst.kind == "tsp":
        return {"coords": inst.coords.tolist()}
    if inst.kind == "cvrp":
        return {
            "depot": inst.depot.tolist(),
            "customers": inst.customers.tolist(),
            "demands": inst.demands.tolist(),
            "capacity": inst.capacity,
            "demand_scale": inst.demand_scale,
        }
    return {"items": inst.items.tolist(), "capacity": inst.capacity}


def instance_from_dict(kind: str, obj: dict) -> ProblemInstance:
    if kind == "tsp":
        return TspInstance(np.array(obj["coords"], dtype=np.float64))
    if kind == "cvrp":
        return CvrpInstance(
            np.array(obj["depot"]),
            np.array(obj["customers"]).reshape(-1, 2),
            np.array(obj["demands"]),
            capacity=obj["capacity"],
            demand_scale=obj["demand_scale"],
        )
    return KpInstance(np.array(obj["items"]).reshape(-1, 2), obj["capacity"])


def dataset_to_jsonl(ds: Dataset) -> str:
    lines = [json.dumps({"format": MAGIC.decode(), "kind": ds.kind, "count": len(ds), "seed": ds.seed})]
    lines += [json.dumps(instance_to_dict(inst)) for inst in ds.instances]
    return "\n".join(lines) + "\n"


def dataset_from_jsonl(text: str, expected_kind: str | None = None) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty JSON-lines file", 0)
    try:
        header = json.loads(lines[0])
        kind, count, seed = header["kind"], int(header["count"]), int(header["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"bad header line: {exc}", 0) from None
    if header.get("format") != MAGIC.decode() or kind not in KINDS:
        raise DatasetFormatError("header is not a dataset header", 0)
    if expected_kind is not None and kind != expected_kind:
        raise DatasetSchemaError(f"expected a {expected_kind} dataset, file holds {kind}")
    body = lines[1:]
    if len(body) != count:
        raise DatasetFormatError(f"header announces {count} instances, found {len(body)}", len(lines))
    instances = []
    for lineno, line in enumerate(body, start=1):
        try:
            instances.append(instance_from_dict(kind, json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"bad instance line: {exc}", lineno) from None
    return Dataset(kind, seed, instances)


# --------------------------------------------------------------------------
# files

def _is_jsonl(path: Path) -> bool:
    return path.suffix in (".jsonl", ".json")


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    if _is_jsonl(path):
        path.write_text(dataset_to_jsonl(ds))
    else:
        path.write_bytes(dataset_to_bytes(ds))


def load_dataset(path, expected_kind: str | None = None) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(MAGIC):
        return dataset_from_bytes(data, expected_kind)
    if data.lstrip().startswith(b"{"):
        return dataset_from_jsonl(data.decode("utf-8", errors="replace"), expected_kind)
    if _is_jsonl(path):
        return dataset_from_jsonl(data.decode("utf-8", errors="replace"), expected_kind)
    return dataset_from_bytes(data, expected_kind)

