"""Domain types and bit-exact file I/O for the pipeline artifacts.

Binary formats (all little-endian):
  LTFM feature file:    magic "LTFM", u32 version=1, u64 rows, u64 cols,
                        rows*cols f32 row-major
  LTSP superpoint file: magic "LTSP", u32 version=1, u64 n_points, n_points u32
  LTLB label file:      magic "LTLB", u32 version=1, u64 n, n i32 (-1 = ignore)
  mask file (per scene): u32 version=1, u64 n_entities, then per entity
                        u64 entity_id, u64 count, count u64 point indices

On-disk reals are f32; in-memory computation uses f64 accumulation.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DataError,
    FormatError,
    IoError,
    ShapeError,
    TruncationError,
)

FEATURE_MAGIC = b"LTFM"
SUPERPOINT_MAGIC = b"LTSP"
LABEL_MAGIC = b"LTLB"
FORMAT_VERSION = 1


@dataclass
class EntityRecord:
    """One named entity: its text, a 512-dim text embedding, and per-scene masks.

    Masks are stored as sorted unique point-index arrays so that fixture
    hashing is deterministic.
    """

    entity_id: int
    text: str
    text_embedding: np.ndarray
    masks: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.text_embedding = np.asarray(self.text_embedding, dtype=np.float64)
        if float(np.linalg.norm(self.text_embedding)) <= 0.0:
            raise DataError(f"entity {self.entity_id}: text embedding has zero norm")
        self.masks = [
            (sid, np.unique(np.asarray(idx, dtype=np.int64))) for sid, idx in self.masks
        ]
        for sid, idx in self.masks:
            if idx.size == 0:
                raise DataError(f"entity {self.entity_id}: empty mask for scene {sid}")
            if np.any(idx < 0):
                raise DataError(f"entity {self.entity_id}: negative point index in scene {sid}")


@dataclass
class SceneBundle:
    """All per-scene inputs: raw points, superpoints, optional distill targets and labels."""

    scene_id: str
    points: np.ndarray
    superpoints: np.ndarray
    distill_targets: np.ndarray | None = None
    gt_labels: np.ndarray | None = None

    def __post_init__(self):
        n = self.points.shape[0]
        if self.superpoints.shape[0] != n:
            raise ShapeError(
                f"scene {self.scene_id}: {n} points but {self.superpoints.shape[0]} superpoint ids"
            )
        if self.distill_targets is not None and self.distill_targets.shape[0] != n:
            raise ShapeError(f"scene {self.scene_id}: distill target row count mismatch")
        if self.gt_labels is not None and self.gt_labels.shape[0] != n:
            raise ShapeError(f"scene {self.scene_id}: label count mismatch")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_superpoints(self) -> int:
        return int(self.superpoints.max()) + 1


def _validate_matrix(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"feature matrix must be 2-D and non-empty, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DataError("feature matrix contains non-finite values")
    return m


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncationError(f"unexpected end of file while reading {what}")
    return buf


def _read_header(f, magic: bytes, path) -> None:
    got = _read_exact(f, 4, "magic")
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")


def read_feature_matrix(path) -> np.ndarray:
    """Read an LTFM file into a float32 (rows, cols) array."""
    try:
        with open(path, "rb") as f:
            _read_header(f, FEATURE_MAGIC, path)
            rows, cols = struct.unpack("<QQ", _read_exact(f, 16, "dims"))
            if rows < 1 or cols < 1:
                raise FormatError(f"{path}: degenerate dims {rows}x{cols}")
            payload = _read_exact(f, rows * cols * 4, "payload")
            if f.read(1):
                raise FormatError(f"{path}: trailing bytes after payload")
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    m = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    if not np.all(np.isfinite(m)):
        raise DataError(f"{path}: non-finite value in payload")
    return m.astype(np.float32)


def write_feature_matrix(path, m: np.ndarray) -> None:
    """Write a matrix as LTFM; round-trips bit-exactly through read_feature_matrix."""
    m = _validate_matrix(m)
    data = np.ascontiguousarray(m, dtype="<f4")
    try:
        with open(path, "wb") as f:
            f.write(FEATURE_MAGIC)
            f.write(struct.pack("<IQQ", FORMAT_VERSION, m.shape[0], m.shape[1]))
            f.write(data.tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_superpoints(path) -> np.ndarray:
    """Read an LTSP file into an int64 assignment vector with dense ids.

    Sparse ids are re-densified in order of first numeric id; the original
    ids are not preserved.
    """
    try:
        with open(path, "rb") as f:
            _read_header(f, SUPERPOINT_MAGIC, path)
            (n,) = struct.unpack("<Q", _read_exact(f, 8, "n_points"))
            payload = _read_exact(f, n * 4, "ids")
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    ids = np.frombuffer(payload, dtype="<u4").astype(np.int64)
    return densify_ids(ids)


def write_superpoints(path, assignment: np.ndarray) -> None:
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.ndim != 1 or assignment.size == 0:
        raise ShapeError("superpoint assignment must be a non-empty vector")
    if assignment.min() < 0:
        raise DataError("superpoint ids must be non-negative")
    try:
        with open(path, "wb") as f:
            f.write(SUPERPOINT_MAGIC)
            f.write(struct.pack("<IQ", FORMAT_VERSION, assignment.size))
            f.write(assignment.astype("<u4").tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_labels(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            _read_header(f, LABEL_MAGIC, path)
            (n,) = struct.unpack("<Q", _read_exact(f, 8, "n"))
            payload = _read_exact(f, n * 4, "labels")
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    labels = np.frombuffer(payload, dtype="<i4").astype(np.int64)
    if labels.size and labels.min() < -1:
        raise DataError(f"{path}: label below -1")
    return labels


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ShapeError("label vector must be 1-D")
    if labels.size and labels.min() < -1:
        raise DataError("labels must be >= -1")
    try:
        with open(path, "wb") as f:
            f.write(LABEL_MAGIC)
            f.write(struct.pack("<IQ", FORMAT_VERSION, labels.size))
            f.write(labels.astype("<i4").tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def densify_ids(ids: np.ndarray) -> np.ndarray:
    """Map arbitrary non-negative ids onto dense [0, n_unique) keeping numeric order."""
    uniq, dense = np.unique(ids, return_inverse=True)
    if uniq.size and uniq[0] == 0 and uniq[-1] == uniq.size - 1:
        return ids.astype(np.int64)
    return dense.astype(np.int64)


def pool_by_superpoint(points: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Mean-pool point features per superpoint; row s is the mean of group s.

    Accumulates in float64 so large superpoints do not drift.
    """
    points = _validate_matrix(points)
    assignment = np.asarray(assignment, dtype=np.int64)
    if points.shape[0] != assignment.shape[0]:
        raise ShapeError(
            f"{points.shape[0]} feature rows but {assignment.shape[0]} superpoint ids"
        )
    n_sp = int(assignment.max()) + 1
    sums = np.zeros((n_sp, points.shape[1]), dtype=np.float64)
    np.add.at(sums, assignment, points.astype(np.float64))
    counts = np.bincount(assignment, minlength=n_sp).astype(np.float64)
    if np.any(counts == 0):
        raise DataError("superpoint ids are not dense: empty group encountered")
    return sums / counts[:, None]


# ---------------------------------------------------------------------------
# Entity bank directory


def write_entity_masks(path, scene_id: str, entities: list[EntityRecord]) -> None:
    """Write masks/<scene_id>.bin for the entities present in one scene."""
    present = [(e.entity_id, idx) for e in entities for sid, idx in e.masks if sid == scene_id]
    try:
        with open(path, "wb") as f:
            f.write(struct.pack("<IQ", FORMAT_VERSION, len(present)))
            for eid, idx in present:
                f.write(struct.pack("<QQ", eid, idx.size))
                f.write(idx.astype("<u8").tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_entity_masks(path) -> list[tuple[int, np.ndarray]]:
    """Read one scene's mask file into (entity_id, indices) pairs."""
    try:
        with open(path, "rb") as f:
            (version, n) = struct.unpack("<IQ", _read_exact(f, 12, "mask header"))
            if version != FORMAT_VERSION:
                raise FormatError(f"{path}: unsupported mask version {version}")
            out = []
            for _ in range(n):
                eid, count = struct.unpack("<QQ", _read_exact(f, 16, "mask entry header"))
                idx = np.frombuffer(
                    _read_exact(f, count * 8, "mask indices"), dtype="<u8"
                ).astype(np.int64)
                out.append((int(eid), idx))
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    return out


def write_entity_bank(bank_dir, entities: list[EntityRecord]) -> None:
    """Persist the raw bank inputs: entities.tsv, embeddings.ltfm, masks/."""
    os.makedirs(os.path.join(bank_dir, "masks"), exist_ok=True)
    entities = sorted(entities, key=lambda e: e.entity_id)
    try:
        with open(os.path.join(bank_dir, "entities.tsv"), "w") as f:
            for e in entities:
                f.write(f"{e.entity_id}\t{e.text}\t{len(e.masks)}\n")
    except OSError as e:
        raise IoError(f"cannot write entities.tsv: {e}") from e
    emb = np.stack([e.text_embedding for e in entities]).astype(np.float32)
    write_feature_matrix(os.path.join(bank_dir, "embeddings.ltfm"), emb)
    scene_ids = sorted({sid for e in entities for sid, _ in e.masks})
    for sid in scene_ids:
        write_entity_masks(os.path.join(bank_dir, "masks", f"{sid}.bin"), sid, entities)


def read_entity_bank(bank_dir) -> list[EntityRecord]:
    """Load a bank directory back into EntityRecord order of entities.tsv."""
    try:
        with open(os.path.join(bank_dir, "entities.tsv")) as f:
            rows = [line.rstrip("\n").split("\t") for line in f if line.strip()]
    except OSError as e:
        raise IoError(f"cannot read entities.tsv: {e}") from e
    emb = read_feature_matrix(os.path.join(bank_dir, "embeddings.ltfm"))
    if emb.shape[0] != len(rows):
        raise DataError(
            f"bank mismatch: {len(rows)} entities in tsv but {emb.shape[0]} embeddings"
        )
    records = {}
    order = []
    for (eid_s, text, _count), vec in zip(rows, emb):
        eid = int(eid_s)
        records[eid] = EntityRecord(entity_id=eid, text=text, text_embedding=vec)
        order.append(eid)
    masks_dir = os.path.join(bank_dir, "masks")
    if os.path.isdir(masks_dir):
        for fname in sorted(os.listdir(masks_dir)):
            if not fname.endswith(".bin"):
                continue
            sid = fname[: -len(".bin")]
            for eid, idx in read_entity_masks(os.path.join(masks_dir, fname)):
                if eid not in records:
                    raise DataError(f"mask references unknown entity {eid}")
                records[eid].masks.append((sid, idx))
    return [records[eid] for eid in order]
