"""Binary multi-view embedding datasets (the "EMB1" file format).

An EMB1 file holds, for each item, one canonical unit embedding plus pools of
global-view and local-view unit embeddings, and optionally integer class
labels. Layout (little-endian):

    magic "EMB1" (4 bytes)
    version   u32
    n_items   u32
    dim       u32
    n_global  u32
    n_local   u32
    n_classes u32
    has_labels u8, 3 pad bytes
    labels    i32 * n_items            (only if has_labels)
    canonical float32 * n_items*dim
    global    float32 * n_items*n_global*dim
    local     float32 * n_items*n_local*dim

Float blocks are item-major, view-major, component-minor. Rows are
re-normalized on load when float drift pushes them off the unit sphere.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .validation import UNIT_NORM_ATOL, check_index_bounds

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIB3x")


@dataclass
class EmbeddingDataset:
    """In-memory view of an EMB1 file.

    ``canonical`` is (n, d), ``global_views`` is (n, G, d), ``local_views`` is
    (n, L, d) with L possibly 0. ``labels`` is (n,) int32 or None; when labels
    are present ``n_classes`` gives the class count.
    """

    canonical: np.ndarray
    global_views: np.ndarray
    local_views: np.ndarray
    labels: np.ndarray | None = None
    n_classes: int = 0

    @property
    def n_items(self) -> int:
        return self.canonical.shape[0]

    @property
    def dim(self) -> int:
        return self.canonical.shape[1]

    @property
    def n_global(self) -> int:
        return self.global_views.shape[1]

    @property
    def n_local(self) -> int:
        return self.local_views.shape[1]

    def validate(self) -> "EmbeddingDataset":
        n, d = self.canonical.shape
        if d < 2:
            raise FormatError(f"dim must be >= 2, got {d}")
        if self.global_views.shape != (n, self.n_global, d) or self.n_global < 1:
            raise FormatError(f"global_views shape {self.global_views.shape} inconsistent with n_items={n}, dim={d}")
        if self.local_views.shape != (n, self.n_local, d):
            raise FormatError(f"local_views shape {self.local_views.shape} inconsistent with n_items={n}, dim={d}")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise FormatError(f"labels length {self.labels.shape} does not match n_items={n}")
            if self.n_classes < 1:
                raise FormatError("n_classes must be >= 1 when labels are present")
            if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                bad = int(self.labels[(self.labels < 0) | (self.labels >= self.n_classes)][0])
                raise FormatError(f"labels contains {bad}, outside [0, {self.n_classes})")
        for name, block in (("canonical", self.canonical),
                            ("global", self.global_views.reshape(-1, d)),
                            ("local", self.local_views.reshape(-1, d))):
            if block.size == 0:
                continue
            if not np.all(np.isfinite(block)):
                raise FormatError(f"{name} block contains non-finite values")
            norms = np.linalg.norm(block.astype(np.float64), axis=1)
            if np.max(np.abs(norms - 1.0)) > UNIT_NORM_ATOL:
                raise FormatError(f"{name} block has rows off the unit sphere")
        return self

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingDataset):
            return NotImplemented
        same_labels = (self.labels is None) == (other.labels is None) and (
            self.labels is None or np.array_equal(self.labels, other.labels)
        )
        return (
            same_labels
            and self.n_classes == other.n_classes
            and np.array_equal(self.canonical, other.canonical)
            and np.array_equal(self.global_views, other.global_views)
            and np.array_equal(self.local_views, other.local_views)
        )


@dataclass
class ViewBatch:
    """Views drawn from a dataset for one mini-batch.

    ``global_views`` is (b, 2, d): two sampled global views per item (the same
    view twice when the pool has a single slot). ``local_views`` is (b, m, d).
    """

    item_indices: np.ndarray
    global_views: np.ndarray
    local_views: np.ndarray


def _renormalize_block(block: np.ndarray, name: str) -> np.ndarray:
    """Re-normalize rows whose norm drifted beyond the unit-sphere tolerance."""
    if block.size == 0:
        return block
    flat = block.reshape(-1, block.shape[-1])
    if not np.all(np.isfinite(flat)):
        raise FormatError(f"{name} block contains non-finite values")
    norms = np.linalg.norm(flat.astype(np.float64), axis=1)
    if np.any(norms < 1e-12):
        raise FormatError(f"{name} block contains a zero row")
    off = np.abs(norms - 1.0) > UNIT_NORM_ATOL
    if np.any(off):
        fixed = flat[off].astype(np.float64) / norms[off, None]
        flat = flat.copy()
        flat[off] = fixed.astype(np.float32)
        return flat.reshape(block.shape)
    return block


def load_dataset(path) -> EmbeddingDataset:
    """Read an EMB1 file, re-normalizing any row that drifted off the unit sphere."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated file: header incomplete")
    magic, version, n_items, dim, n_global, n_local, n_classes, has_labels = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dim < 2:
        raise FormatError(f"dim must be >= 2, got {dim}")
    if n_global < 1:
        raise FormatError(f"n_global must be >= 1, got {n_global}")
    if has_labels not in (0, 1):
        raise FormatError(f"has_labels must be 0 or 1, got {has_labels}")

    offset = _HEADER.size
    labels = None
    if has_labels:
        end = offset + 4 * n_items
        if len(raw) < end:
            raise FormatError("truncated file: labels block incomplete")
        labels = np.frombuffer(raw[offset:end], dtype="<i4").copy()
        offset = end

    blocks = {}
    for name, count in (("canonical", n_items * dim),
                        ("global", n_items * n_global * dim),
                        ("local", n_items * n_local * dim)):
        end = offset + 4 * count
        if len(raw) < end:
            raise FormatError(f"truncated file: {name} block incomplete")
        blocks[name] = np.frombuffer(raw[offset:end], dtype="<f4").copy()
        offset = end
    if offset != len(raw):
        raise FormatError(f"trailing bytes after local block ({len(raw) - offset} extra)")

    canonical = _renormalize_block(blocks["canonical"].reshape(n_items, dim), "canonical")
    global_views = _renormalize_block(blocks["global"].reshape(n_items, n_global, dim), "global")
    local_views = _renormalize_block(blocks["local"].reshape(n_items, n_local, dim), "local")
    ds = EmbeddingDataset(canonical, global_views, local_views, labels, int(n_classes))
    return ds.validate()


def save_dataset(ds: EmbeddingDataset, path) -> None:
    """Write an EMB1 file; ``load_dataset`` inverts this bit-for-bit."""
    ds.validate()
    has_labels = ds.labels is not None
    header = _HEADER.pack(MAGIC, VERSION, ds.n_items, ds.dim, ds.n_global,
                          ds.n_local, ds.n_classes, int(has_labels))
    parts = [header]
    if has_labels:
        parts.append(ds.labels.astype("<i4").tobytes())
    parts.append(ds.canonical.astype("<f4").tobytes())
    parts.append(ds.global_views.astype("<f4").tobytes())
    parts.append(ds.local_views.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def save_manifest(path, class_names=None, source: str = "") -> None:
    """Write the optional JSON sidecar next to an EMB1 file."""
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps({"class_names": list(class_names or []), "source": source}))


def load_manifest(path) -> dict | None:
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        return None
    return json.loads(sidecar.read_text())


def subset_dataset(ds: EmbeddingDataset, indices) -> EmbeddingDataset:
    """New dataset restricted to ``indices`` (labels and views carried along)."""
    idx = check_index_bounds(indices, ds.n_items)
    labels = None if ds.labels is None else ds.labels[idx]
    return EmbeddingDataset(ds.canonical[idx], ds.global_views[idx],
                            ds.local_views[idx], labels, ds.n_classes)


def sample_view_batch(ds: EmbeddingDataset, indices, n_local: int,
                      rng: np.random.Generator) -> ViewBatch:
    """Draw two global views and ``n_local`` local views for each item.

    The two global slots are distinct when the pool has two or more; a
    single-slot pool is duplicated. Draws are deterministic given the
    generator state.
    """
    idx = check_index_bounds(indices, ds.n_items, "indices")
    if n_local > ds.n_local:
        raise ContractError(f"n_local={n_local} exceeds pool size {ds.n_local}")
    b = idx.size
    if ds.n_global >= 2:
        order = np.argsort(rng.random((b, ds.n_global)), axis=1)
        slots = order[:, :2]
    else:
        slots = np.zeros((b, 2), dtype=np.int64)
    global_views = ds.global_views[idx[:, None], slots]
    if n_local > 0:
        order = np.argsort(rng.random((b, ds.n_local)), axis=1)
        local_slots = order[:, :n_local]
        local_views = ds.local_views[idx[:, None], local_slots]
    else:
        local_views = np.zeros((b, 0, ds.dim), dtype=ds.local_views.dtype)
    return ViewBatch(idx, global_views, local_views)
