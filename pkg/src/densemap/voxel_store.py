"""Hashing voxel grid: sparse storage of 8x8x8 TSDF voxel blocks.

Blocks live in a growable pool of flat arrays (one row of 512 voxels per
block, local index ``x + 8*y + 64*z``).  Block coordinates are mapped to pool
slots through a chained hash table keyed by the classic spatial hash.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, Optional, Tuple, Union

import numpy as np

BLOCK_SIZE = 8
BLOCK_VOXELS = BLOCK_SIZE ** 3

HASH_PRIMES = (73856093, 19349669, 83492791)

SNAPSHOT_MAGIC = b"HVG1"
SNAPSHOT_HEADER = struct.Struct("<4sdddd Q")
VOXEL_RECORD = np.dtype([("f", "<f4"), ("w", "<f4"), ("flags", "u1"), ("rgb", "u1", (3,))])
BLOCK_RECORD = np.dtype([("coords", "<i4", (3,)), ("voxels", VOXEL_RECORD, (BLOCK_VOXELS,))])

FLAG_OBSERVED = 1
FLAG_HAS_COLOR = 2

Coords = Tuple[int, int, int]


class AllocationError(RuntimeError):
    """Raised when new blocks would exceed the configured memory budget."""

    def __init__(self, dropped: int, budget: int):
        super().__init__(f"memory budget of {budget} bytes exceeded; {dropped} block allocation(s) dropped")
        self.dropped = dropped
        self.budget = budget


def block_hash(block_coords, table_size: int) -> int:
    """Bucket index of a block: ``(x*p1 ^ y*p2 ^ z*p3) mod table_size``."""
    if table_size <= 0:
        raise ValueError("table_size must be positive")
    x, y, z = (int(c) for c in block_coords)
    h = (x * HASH_PRIMES[0]) ^ (y * HASH_PRIMES[1]) ^ (z * HASH_PRIMES[2])
    return h % table_size


def block_hash_array(block_coords: np.ndarray, table_size: int) -> np.ndarray:
    """Vectorized :func:`block_hash` over an ``(n, 3)`` integer array."""
    c = np.asarray(block_coords, dtype=np.int64)
    h = (c[:, 0] * HASH_PRIMES[0]) ^ (c[:, 1] * HASH_PRIMES[1]) ^ (c[:, 2] * HASH_PRIMES[2])
    return np.mod(h, table_size)


def local_index(x, y, z):
    return x + BLOCK_SIZE * y + BLOCK_SIZE * BLOCK_SIZE * z


# local voxel offsets in pool order, shape (512, 3)
_idx = np.arange(BLOCK_VOXELS)
LOCAL_OFFSETS = np.stack([_idx % BLOCK_SIZE, (_idx // BLOCK_SIZE) % BLOCK_SIZE, _idx // BLOCK_SIZE ** 2], axis=1)
del _idx


@dataclass
class Voxel:
    """Plain copy of one voxel's state."""

    f: float = 0.0
    w: float = 0.0
    observed: bool = False
    color: Optional[Tuple[int, int, int]] = None


class VoxelRef:
    """Live handle on one voxel inside a :class:`BlockMap` pool."""

    __slots__ = ("_map", "slot", "index")

    def __init__(self, block_map: "BlockMap", slot: int, index: int):
        self._map = block_map
        self.slot = slot
        self.index = index

    @property
    def f(self) -> float:
        return float(self._map.f[self.slot, self.index])

    @f.setter
    def f(self, value: float) -> None:
        self._map.f[self.slot, self.index] = value

    @property
    def w(self) -> float:
        return float(self._map.w[self.slot, self.index])

    @w.setter
    def w(self, value: float) -> None:
        self._map.w[self.slot, self.index] = value
        self._map.observed[self.slot, self.index] = value > 0

    @property
    def observed(self) -> bool:
        return bool(self._map.observed[self.slot, self.index])

    @property
    def color(self) -> Optional[Tuple[int, int, int]]:
        if not self._map.has_color[self.slot, self.index]:
            return None
        return tuple(int(c) for c in self._map.rgb[self.slot, self.index])

    def snapshot(self) -> Voxel:
        return Voxel(self.f, self.w, self.observed, self.color)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, VoxelRef)
            and other._map is self._map
            and other.slot == self.slot
            and other.index == self.index
        )

    def __repr__(self) -> str:
        return f"VoxelRef(slot={self.slot}, index={self.index}, f={self.f:.4f}, w={self.w:g})"


class BlockMap:
    """Sparse TSDF volume over an unbounded integer voxel lattice.

    Args:
        voxel_size: edge length of one voxel in meters.
        origin: world position of the corner of voxel (0, 0, 0).
        table_size: number of hash buckets; collisions are chained.
        max_bytes: optional memory budget in bytes (snapshot-format bytes per block).
    """

    def __init__(
        self,
        voxel_size: float,
        origin=(0.0, 0.0, 0.0),
        table_size: int = 1 << 16,
        max_bytes: Optional[int] = None,
    ):
        if not voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if table_size <= 0:
            raise ValueError("table_size must be positive")
        self.voxel_size = float(voxel_size)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.table_size = int(table_size)
        self.max_bytes = max_bytes
        self._buckets: list[list[tuple[Coords, int]]] = [[] for _ in range(self.table_size)]
        self._alloc_lock = threading.Lock()
        self._count = 0
        self._reserve(64)

    # -- pool -------------------------------------------------------------

    def _reserve(self, capacity: int) -> None:
        old = self._count
        f = np.zeros((capacity, BLOCK_VOXELS), np.float64)
        w = np.zeros((capacity, BLOCK_VOXELS), np.float64)
        observed = np.zeros((capacity, BLOCK_VOXELS), bool)
        has_color = np.zeros((capacity, BLOCK_VOXELS), bool)
        rgb = np.zeros((capacity, BLOCK_VOXELS, 3), np.uint8)
        coords = np.zeros((capacity, 3), np.int64)
        if old:
            f[:old] = self.f
            w[:old] = self.w
            observed[:old] = self.observed
            has_color[:old] = self.has_color
            rgb[:old] = self.rgb
            coords[:old] = self.block_coords
        self._f, self._w, self._observed = f, w, observed
        self._has_color, self._rgb, self._coords = has_color, rgb, coords

    # views trimmed to the allocated blocks
    @property
    def f(self) -> np.ndarray:
        return self._f[: self._count]

    @property
    def w(self) -> np.ndarray:
        return self._w[: self._count]

    @property
    def observed(self) -> np.ndarray:
        return self._observed[: self._count]

    @property
    def has_color(self) -> np.ndarray:
        return self._has_color[: self._count]

    @property
    def rgb(self) -> np.ndarray:
        return self._rgb[: self._count]

    @property
    def block_coords(self) -> np.ndarray:
        return self._coords[: self._count]

    @property
    def block_count(self) -> int:
        return self._count

    @property
    def voxel_count(self) -> int:
        return BLOCK_VOXELS * self._count

    def __len__(self) -> int:
        return self._count

    # -- hash table -------------------------------------------------------

    def find_block(self, block_coords) -> Optional[int]:
        """Pool slot of a block, or None when it is not allocated."""
        key = tuple(int(c) for c in block_coords)
        for stored, slot in self._buckets[block_hash(key, self.table_size)]:
            if stored == key:
                return slot
        return None

    def allocate_block(self, block_coords) -> int:
        """Slot of the block, creating a zero-initialized one if needed."""
        key = tuple(int(c) for c in block_coords)
        bucket = self._buckets[block_hash(key, self.table_size)]
        for stored, slot in bucket:
            if stored == key:
                return slot
        with self._alloc_lock:
            for stored, slot in bucket:
                if stored == key:
                    return slot
            if self.max_bytes is not None and snapshot_size(self._count + 1) > self.max_bytes:
                raise AllocationError(1, self.max_bytes)
            if self._count == self._f.shape[0]:
                self._reserve(2 * self._count)
            slot = self._count
            self._coords[slot] = key
            self._count += 1
            bucket.append((key, slot))
            return slot

    def allocate_blocks(self, block_coords: np.ndarray) -> int:
        """Allocate every listed block; returns how many were new.

        When the memory budget runs out the remaining requests are counted and
        reported through :class:`AllocationError` after the loop.
        """
        created = 0
        dropped = 0
        for key in np.asarray(block_coords, dtype=np.int64).reshape(-1, 3):
            if self.find_block(key) is not None:
                continue
            if dropped:
                dropped += 1
                continue
            try:
                self.allocate_block(key)
                created += 1
            except AllocationError:
                dropped += 1
        if dropped:
            raise AllocationError(dropped, self.max_bytes)
        return created

    def slots_for(self, block_coords: np.ndarray) -> np.ndarray:
        """Slots for an ``(n, 3)`` array of block coordinates (-1 when absent)."""
        keys = np.asarray(block_coords, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(keys), -1, dtype=np.int64)
        for i, key in enumerate(keys):
            slot = self.find_block(key)
            if slot is not None:
                out[i] = slot
        return out

    def iter_blocks(self) -> Iterator[Tuple[Coords, int]]:
        for slot in range(self._count):
            yield tuple(int(c) for c in self._coords[slot]), slot

    # -- coordinates ------------------------------------------------------

    def world_to_voxel(self, point) -> np.ndarray:
        return world_to_voxel(point, self)

    def voxel_to_world(self, voxel) -> np.ndarray:
        return voxel_to_world(voxel, self)

    def locate(self, voxel_coords, allocate: bool = False) -> Optional[VoxelRef]:
        """Access one voxel; allocates its block on demand when asked to."""
        v = np.asarray(voxel_coords, dtype=np.int64).reshape(3)
        block = np.floor_divide(v, BLOCK_SIZE)
        local = v - block * BLOCK_SIZE
        slot = self.allocate_block(block) if allocate else self.find_block(block)
        if slot is None:
            return None
        return VoxelRef(self, slot, int(local_index(*local)))

    def block_voxel_coords(self, slot: int) -> np.ndarray:
        """Global voxel coordinates of the 512 voxels of one block, pool order."""
        return self._coords[slot] * BLOCK_SIZE + LOCAL_OFFSETS

    def block_array(self, slot: int, field: str = "f") -> np.ndarray:
        """Copy of one block field as an ``[x, y, z]``-indexed 8x8x8 array."""
        data = getattr(self, field)[slot]
        return data.reshape(BLOCK_SIZE, BLOCK_SIZE, BLOCK_SIZE).transpose(2, 1, 0).copy()

    def bounding_box(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """Inclusive min/max block coordinates of the allocated blocks."""
        if self._count == 0:
            return None
        c = self.block_coords
        return c.min(axis=0), c.max(axis=0)

    def to_dense(self, lo=None, hi=None):
        """Scatter into dense ``[x, y, z]`` arrays ``(f, w, observed)``.

        ``lo``/``hi`` are inclusive voxel bounds; defaults cover all blocks.
        """
        if lo is None or hi is None:
            box = self.bounding_box()
            if box is None:
                raise ValueError("empty map has no extent")
            lo = box[0] * BLOCK_SIZE
            hi = (box[1] + 1) * BLOCK_SIZE - 1
        lo = np.asarray(lo, np.int64)
        hi = np.asarray(hi, np.int64)
        shape = tuple(hi - lo + 1)
        f = np.zeros(shape)
        w = np.zeros(shape)
        obs = np.zeros(shape, bool)
        for slot in range(self._count):
            g = self.block_voxel_coords(slot) - lo
            keep = np.all((g >= 0) & (g < np.asarray(shape)), axis=1)
            gx, gy, gz = g[keep].T
            f[gx, gy, gz] = self.f[slot][keep]
            w[gx, gy, gz] = self.w[slot][keep]
            obs[gx, gy, gz] = self.observed[slot][keep]
        return f, w, obs

    # -- persistence ------------------------------------------------------

    def save(self, destination: Union[str, Path, BinaryIO]) -> int:
        return save_snapshot(self, destination)

    @classmethod
    def load(cls, source: Union[str, Path, BinaryIO], **kwargs) -> "BlockMap":
        return load_snapshot(source, **kwargs)


def world_to_voxel(point, block_map: BlockMap) -> np.ndarray:
    """Integer voxel containing ``point``; works on ``(3,)`` or ``(n, 3)``."""
    p = np.asarray(point, dtype=np.float64)
    return np.floor((p - block_map.origin) / block_map.voxel_size).astype(np.int64)


def voxel_to_world(voxel, block_map: BlockMap) -> np.ndarray:
    """World position of a voxel center."""
    v = np.asarray(voxel, dtype=np.float64)
    return (v + 0.5) * block_map.voxel_size + block_map.origin


def snapshot_size(block_count: int) -> int:
    return SNAPSHOT_HEADER.size + block_count * BLOCK_RECORD.itemsize


def save_snapshot(block_map: BlockMap, destination) -> int:
    """Write the little-endian HVG1 snapshot; returns the byte count."""
    n = block_map.block_count
    records = np.zeros(n, dtype=BLOCK_RECORD)
    records["coords"] = block_map.block_coords
    vox = records["voxels"]
    vox["f"] = block_map.f
    vox["w"] = block_map.w
    flags = block_map.observed.astype(np.uint8) * FLAG_OBSERVED
    flags |= block_map.has_color.astype(np.uint8) * FLAG_HAS_COLOR
    vox["flags"] = flags
    vox["rgb"] = block_map.rgb
    header = SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, block_map.voxel_size, *block_map.origin, n)
    payload = header + records.tobytes()
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        Path(destination).write_bytes(payload)
    return len(payload)


def load_snapshot(source, table_size: int = 1 << 16, max_bytes: Optional[int] = None) -> BlockMap:
    if hasattr(source, "read"):
        data = source.read()
    else:
        data = Path(source).read_bytes()
    if len(data) < SNAPSHOT_HEADER.size:
        raise ValueError("truncated snapshot header")
    magic, voxel_size, ox, oy, oz, n = SNAPSHOT_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"bad snapshot magic {magic!r}")
    expected = snapshot_size(n)
    if len(data) != expected:
        raise ValueError(f"snapshot size {len(data)} does not match {n} blocks ({expected} bytes)")
    records = np.frombuffer(data, dtype=BLOCK_RECORD, count=n, offset=SNAPSHOT_HEADER.size)
    block_map = BlockMap(voxel_size, (ox, oy, oz), table_size=table_size, max_bytes=max_bytes)
    block_map.allocate_blocks(records["coords"])
    vox = records["voxels"]
    block_map.f[:] = vox["f"]
    block_map.w[:] = vox["w"]
    block_map.observed[:] = (vox["flags"] & FLAG_OBSERVED) != 0
    block_map.has_color[:] = (vox["flags"] & FLAG_HAS_COLOR) != 0
    block_map.rgb[:] = vox["rgb"]
    return block_map
