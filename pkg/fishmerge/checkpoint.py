"""
Parameter sets and their on-disk checkpoint format.

File layout: magic ``FMRG``, little-endian uint32 format version, uint64
header length, canonical UTF-8 JSON header, then a contiguous payload of
little-endian float64 tensor data. Fisher diagonals use the same layout with
``"fisher": true`` in the header.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .config import FORMAT_VERSION
from .errors import (
    CheckpointFormatError,
    CompatibilityError,
    ConfigError,
    DataFormatError,
    NumericalError,
)

logger = logging.getLogger(__name__)

MAGIC = b"FMRG"
PREAMBLE = struct.Struct("<4sIQ")
ROLE_BODY = "body"
ROLE_HEAD = "head"
VALID_ROLES = (ROLE_BODY, ROLE_HEAD)
PAYLOAD_DTYPE = np.dtype("<f8")

PathLike = Union[str, Path]


def _frozen_array(value: Any) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True, order="C")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Ordered name -> tensor map sharing one initialization lineage.

    Tensors are copied to read-only float64 arrays on construction, so a
    ParameterSet can be shared freely between threads.
    """

    entries: Mapping[str, np.ndarray]
    lineage_id: str
    roles: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        entries: Dict[str, np.ndarray] = {}
        for name, value in self.entries.items():
            if not isinstance(name, str) or not name:
                raise DataFormatError("tensor names must be nonempty strings")
            entries[name] = _frozen_array(value)
        roles = {name: self.roles.get(name, ROLE_BODY) for name in entries}
        for name, role in roles.items():
            if role not in VALID_ROLES:
                raise ConfigError(f"unknown role {role!r} for tensor {name!r}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "roles", roles)
        object.__setattr__(self, "lineage_id", str(self.lineage_id))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: object) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> List[str]:
        return list(self.entries)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self.entries.items()}

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.entries.values()))

    def check_finite(self) -> None:
        for name, tensor in self.entries.items():
            if not np.all(np.isfinite(tensor)):
                raise NumericalError(f"non-finite element in tensor {name!r}")

    def replace(
        self,
        entries: Optional[Mapping[str, Any]] = None,
        roles: Optional[Mapping[str, str]] = None,
        lineage_id: Optional[str] = None,
    ) -> "ParameterSet":
        """Copy with some fields swapped; roles of kept names carry over."""
        new_entries = self.entries if entries is None else entries
        new_roles = dict(self.roles)
        if roles is not None:
            new_roles.update(roles)
        return ParameterSet(
            new_entries,
            self.lineage_id if lineage_id is None else lineage_id,
            {n: new_roles.get(n, ROLE_BODY) for n in new_entries},
        )

    def with_roles(self, roles: Mapping[str, str]) -> "ParameterSet":
        return self.replace(roles=roles)


@dataclass(frozen=True)
class TensorFile:
    header: Dict[str, Any]
    entries: Dict[str, np.ndarray]
    roles: Dict[str, str]

    @property
    def lineage_id(self) -> str:
        return self.header["lineage_id"]

    @property
    def is_fisher(self) -> bool:
        return bool(self.header.get("fisher", False))

    @property
    def metadata(self) -> Dict[str, Any]:
        return self.header.get("metadata", {})


@dataclass(frozen=True)
class MergePartition:
    mergeable: Tuple[str, ...]
    private: Tuple[Tuple[str, ...], ...]


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode(
        "utf8"
    )


def write_tensor_file(
    path: PathLike,
    entries: Mapping[str, np.ndarray],
    lineage_id: str,
    roles: Mapping[str, str],
    *,
    fisher: bool = False,
    metadata: Optional[Mapping[str, Any]] = None,
) -> None:
    """Write tensors in the checkpoint layout. Shared by checkpoints and Fisher files."""
    if not entries:
        raise DataFormatError("empty parameter set")

    table = []
    chunks: List[bytes] = []
    offset = 0
    for name, tensor in entries.items():
        if name not in roles:
            raise ConfigError(f"tensor {name!r} has no role tag")
        if roles[name] not in VALID_ROLES:
            raise ConfigError(f"unknown role {roles[name]!r} for tensor {name!r}")
        arr = np.asarray(tensor, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite element in tensor {name!r}")
        raw = np.ascontiguousarray(arr).astype(PAYLOAD_DTYPE, copy=False).tobytes()
        table.append(
            {
                "name": name,
                "shape": [int(d) for d in arr.shape],
                "byte_offset": offset,
                "role": roles[name],
            }
        )
        chunks.append(raw)
        offset += len(raw)

    header = {
        "format_version": FORMAT_VERSION,
        "lineage_id": str(lineage_id),
        "fisher": bool(fisher),
        "tensors": table,
        "metadata": dict(metadata or {}),
    }
    header_bytes = _canonical_json(header)
    blob = PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes

    path = Path(path)
    try:
        with path.open("wb") as fh:
            fh.write(blob)
            for raw in chunks:
                fh.write(raw)
    except OSError as exc:
        raise DataFormatError(f"cannot write {path}: {exc}") from exc
    logger.debug("wrote %d tensors (%d payload bytes) to %s", len(table), offset, path)


def _parse_table(header: Dict[str, Any]) -> List[Dict[str, Any]]:
    tensors = header.get("tensors")
    if not isinstance(tensors, list):
        raise CheckpointFormatError("malformed header: missing tensor table")
    seen = set()
    parsed = []
    for item in tensors:
        if not isinstance(item, dict):
            raise CheckpointFormatError("malformed header: tensor entry is not an object")
        name = item.get("name")
        shape = item.get("shape")
        offset = item.get("byte_offset")
        role = item.get("role", ROLE_BODY)
        if not isinstance(name, str) or not name or name in seen:
            raise CheckpointFormatError(f"malformed header: bad tensor name {name!r}")
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape
        ):
            raise CheckpointFormatError(f"malformed header: bad shape for {name!r}")
        if not isinstance(offset, int) or isinstance(offset, bool) or offset < 0:
            raise CheckpointFormatError(f"malformed header: bad offset for {name!r}")
        if role not in VALID_ROLES:
            raise CheckpointFormatError(f"malformed header: bad role for {name!r}")
        seen.add(name)
        parsed.append({"name": name, "shape": shape, "byte_offset": offset, "role": role})
    return parsed


def read_tensor_file(path: PathLike) -> TensorFile:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc

    if len(blob) < PREAMBLE.size:
        raise CheckpointFormatError(f"truncated file {path}")
    magic, version, header_len = PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic in {path}")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version} in {path}")
    header_end = PREAMBLE.size + header_len
    if header_end > len(blob):
        raise CheckpointFormatError(f"truncated header in {path}")
    try:
        header = json.loads(blob[PREAMBLE.size : header_end].decode("utf8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"malformed header in {path}: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(header.get("lineage_id"), str):
        raise CheckpointFormatError(f"malformed header in {path}")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported version {header.get('format_version')} in {path}"
        )

    table = _parse_table(header)
    if not table:
        raise CheckpointFormatError(f"malformed header in {path}: empty parameter set")
    payload = memoryview(blob)[header_end:]

    entries: Dict[str, np.ndarray] = {}
    roles: Dict[str, str] = {}
    prev_end = 0
    for item in table:
        count = int(np.prod(item["shape"], dtype=np.int64))
        start = item["byte_offset"]
        end = start + count * PAYLOAD_DTYPE.itemsize
        if start != prev_end:
            raise CheckpointFormatError(
                f"shape/offset mismatch at tensor {item['name']!r} in {path}"
            )
        if end > len(payload):
            raise CheckpointFormatError(
                f"truncated payload in {path}: tensor {item['name']!r} needs {end} bytes, "
                f"have {len(payload)}"
            )
        data = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count, offset=start)
        arr = data.astype(np.float64).reshape(item["shape"])
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite element in tensor {item['name']!r} in {path}")
        entries[item["name"]] = arr
        roles[item["name"]] = item["role"]
        prev_end = end
    if prev_end != len(payload):
        raise CheckpointFormatError(
            f"shape/offset mismatch in {path}: {len(payload) - prev_end} unclaimed payload bytes"
        )
    return TensorFile(header=header, entries=entries, roles=roles)


def save_checkpoint(
    params: ParameterSet,
    role_tags: Optional[Mapping[str, str]],
    path: PathLike,
    *,
    metadata: Optional[Mapping[str, Any]] = None,
) -> None:
    """Persist ``params``; ``role_tags`` defaults to the roles the set carries."""
    if len(params) == 0:
        raise DataFormatError("empty parameter set")
    params.check_finite()
    roles = dict(params.roles if role_tags is None else role_tags)
    missing = [n for n in params.names() if n not in roles]
    if missing:
        raise ConfigError(f"tensors without role tag: {', '.join(missing)}")
    write_tensor_file(path, params.entries, params.lineage_id, roles, metadata=metadata)


def load_checkpoint(path: PathLike) -> Tuple[ParameterSet, Dict[str, str]]:
    tf = read_tensor_file(path)
    if tf.is_fisher:
        raise CheckpointFormatError(f"{path} holds a Fisher diagonal, not a checkpoint")
    params = ParameterSet(tf.entries, tf.lineage_id, tf.roles)
    return params, dict(tf.roles)


def check_merge_compatibility(sets: Sequence[ParameterSet]) -> MergePartition:
    """Split tensor names into the shared mergeable body and per-set private names.

    Mergeable names are tagged ``body`` in every set with identical shapes.
    The result does not depend on the order of ``sets``.
    """
    if not sets:
        raise ConfigError("no parameter sets to check")
    lineages = sorted({p.lineage_id for p in sets})
    if len(lineages) > 1:
        raise CompatibilityError(f"lineage mismatch: {', '.join(lineages)}")

    body_everywhere = set.intersection(
        *({n for n, role in p.roles.items() if role == ROLE_BODY} for p in sets)
    )
    for name in sorted(body_everywhere):
        shapes = sorted({p[name].shape for p in sets})
        if len(shapes) > 1:
            raise CompatibilityError(f"shape conflict on {name!r}: {shapes}")

    mergeable = tuple(sorted(body_everywhere))
    private = tuple(
        tuple(sorted(n for n in p.names() if n not in body_everywhere)) for p in sets
    )
    return MergePartition(mergeable=mergeable, private=private)
