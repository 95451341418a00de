import io as _io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densemap.voxel_store import (
    BLOCK_VOXELS,
    AllocationError,
    BlockMap,
    block_hash,
    block_hash_array,
    load_snapshot,
    save_snapshot,
    snapshot_size,
    voxel_to_world,
    world_to_voxel,
)


def _hand_hash(x, y, z, n):
    # arbitrary-precision integers: the reference for the 64-bit vectorized path
    return ((x * 73856093) ^ (y * 19349669) ^ (z * 83492791)) % n


class TestBlockHash:
    def test_origin_hashes_to_zero(self):
        assert block_hash((0, 0, 0), 1024) == 0

    def test_unit_x(self):
        # 73856093 = 72125 * 1024 + 93
        assert 73856093 - 72125 * 1024 == 93
        assert block_hash((1, 0, 0), 1024) == 93

    def test_unit_diagonal(self):
        assert block_hash((1, 1, 1), 1024) == (73856093 ^ 19349669 ^ 83492791) % 1024 == 847

    def test_rejects_empty_table(self):
        with pytest.raises(ValueError):
            block_hash((0, 0, 0), 0)

    @given(st.lists(st.tuples(*[st.integers(-(2 ** 20), 2 ** 20 - 1)] * 3), min_size=1, max_size=50),
           st.integers(1, 1 << 20))
    def test_vectorized_matches_scalar(self, coords, n):
        arr = np.array(coords)
        expect = [_hand_hash(*c, n) for c in coords]
        assert block_hash_array(arr, n).tolist() == expect
        assert [block_hash(c, n) for c in coords] == expect
        assert all(0 <= h < n for h in expect)


class TestCoordinates:
    def test_floor_mapping(self):
        bm = BlockMap(0.1)
        assert world_to_voxel((0.25, 0.0, -0.31), bm).tolist() == [2, 0, -4]

    @pytest.mark.parametrize("vs", [0.05, 0.1, 0.37])
    def test_origin_point(self, vs):
        assert world_to_voxel((0.0, 0.0, 0.0), BlockMap(vs)).tolist() == [0, 0, 0]

    @given(st.tuples(*[st.integers(-10 ** 5, 10 ** 5)] * 3), st.floats(0.01, 2.0),
           st.tuples(*[st.floats(-100, 100)] * 3))
    def test_center_round_trip(self, v, vs, origin):
        bm = BlockMap(vs, origin)
        center = voxel_to_world(v, bm)
        assert world_to_voxel(center, bm).tolist() == list(v)
        np.testing.assert_allclose(voxel_to_world(world_to_voxel(center, bm), bm), center)


class TestLocate:
    def test_absent_without_allocation(self):
        bm = BlockMap(0.1)
        assert bm.locate((5, -3, 2), allocate=False) is None
        assert bm.block_count == 0

    def test_allocation_zero_initializes(self):
        bm = BlockMap(0.1)
        ref = bm.locate((3, 3, 3), allocate=True)
        assert bm.block_coords.tolist() == [[0, 0, 0]]
        assert (ref.f, ref.w, ref.observed, ref.color) == (0.0, 0.0, False, None)
        assert not bm.observed.any() and not bm.w.any() and not bm.f.any()

    def test_lookup_is_idempotent(self):
        bm = BlockMap(0.1)
        a = bm.locate((3, 3, 3), allocate=True)
        a.w = 2.0
        a.f = -0.25
        b = bm.locate((3, 3, 3), allocate=False)
        assert a == b
        assert (b.f, b.w, b.observed) == (-0.25, 2.0, True)
        assert bm.block_count == 1

    def test_negative_coordinates_use_floor_division(self):
        bm = BlockMap(0.1)
        bm.locate((-1, -8, -9), allocate=True)
        assert bm.block_coords.tolist() == [[-1, -1, -2]]
        ref = bm.locate((-1, -8, -9))
        # local (7, 0, 7) in x-fastest order
        assert ref.index == 7 + 64 * 7

    def test_observed_follows_weight(self):
        bm = BlockMap(0.1)
        ref = bm.locate((0, 0, 0), allocate=True)
        ref.w = 1.0
        assert ref.observed
        ref.w = 0.0
        assert not ref.observed


def test_insert_then_lookup_under_collisions():
    rng = np.random.default_rng(7)
    coords = np.unique(rng.integers(-(2 ** 20), 2 ** 20, size=(10_000, 3)), axis=0)
    bm = BlockMap(0.1, table_size=97)  # tiny table: long chains everywhere
    bm.allocate_blocks(coords)
    assert bm.block_count == len(coords)
    slots = bm.slots_for(coords)
    assert (slots >= 0).all()
    assert np.array_equal(bm.block_coords[slots], coords)
    assert len(np.unique(slots)) == len(coords)
    assert bm.voxel_count == BLOCK_VOXELS * bm.block_count
    missing = coords[:20] + np.array([0, 0, 2 ** 21])
    assert (bm.slots_for(missing) == -1).all()


def test_duplicate_allocation_keeps_one_block():
    bm = BlockMap(0.1)
    assert bm.allocate_blocks(np.array([[1, 2, 3], [1, 2, 3], [4, 5, 6]])) == 2
    assert bm.allocate_block((1, 2, 3)) == 0
    assert bm.block_count == 2


def test_memory_cap_reports_dropped_allocations():
    bm = BlockMap(0.1, max_bytes=snapshot_size(3))
    with pytest.raises(AllocationError) as err:
        bm.allocate_blocks(np.arange(15).reshape(5, 3))
    assert err.value.dropped == 2
    assert bm.block_count == 3


class TestSnapshot:
    def test_empty_map_is_header_only(self):
        buf = _io.BytesIO()
        assert save_snapshot(BlockMap(0.2, (1.0, 2.0, 3.0)), buf) == 44
        magic, vs, ox, oy, oz, n = struct.unpack("<4sdddd Q", buf.getvalue())
        assert (magic, vs, (ox, oy, oz), n) == (b"HVG1", 0.2, (1.0, 2.0, 3.0), 0)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        bm = BlockMap(0.1, (0.5, -1.0, 2.0))
        bm.allocate_blocks(rng.integers(-50, 50, size=(20, 3)))
        n = bm.block_count
        bm.w[:] = rng.integers(0, 5, size=(n, BLOCK_VOXELS))
        bm.observed[:] = bm.w > 0
        bm.f[:] = np.where(bm.observed, rng.uniform(-1, 1, size=(n, BLOCK_VOXELS)), 0.0).astype(np.float32)
        bm.has_color[:5] = True
        bm.rgb[:5] = rng.integers(0, 256, size=(5, BLOCK_VOXELS, 3))
        buf = _io.BytesIO()
        size = save_snapshot(bm, buf)
        assert size == 44 + n * (12 + 512 * 12) == snapshot_size(n)
        back = load_snapshot(_io.BytesIO(buf.getvalue()))
        assert back.voxel_size == 0.1 and back.origin.tolist() == [0.5, -1.0, 2.0]
        for name in ("block_coords", "f", "w", "observed", "has_color", "rgb"):
            assert np.array_equal(getattr(back, name), getattr(bm, name)), name
        assert back.locate(bm.block_coords[3] * 8).slot == 3

    def test_rejects_bad_magic_and_truncation(self):
        buf = _io.BytesIO()
        bm = BlockMap(0.1)
        bm.allocate_block((0, 0, 0))
        save_snapshot(bm, buf)
        data = buf.getvalue()
        with pytest.raises(ValueError, match="magic"):
            load_snapshot(_io.BytesIO(b"XXXX" + data[4:]))
        with pytest.raises(ValueError, match="size"):
            load_snapshot(_io.BytesIO(data[:-1]))

    def test_load_respects_memory_cap(self):
        bm = BlockMap(0.1)
        bm.allocate_blocks(np.arange(30).reshape(10, 3))
        buf = _io.BytesIO()
        save_snapshot(bm, buf)
        with pytest.raises(AllocationError):
            load_snapshot(_io.BytesIO(buf.getvalue()), max_bytes=snapshot_size(4))


@settings(max_examples=30)
@given(st.lists(st.tuples(*[st.integers(-40, 40)] * 3), max_size=40))
def test_unallocated_space_is_unobserved(voxels):
    bm = BlockMap(0.1)
    for v in voxels:
        bm.locate(v, allocate=True).w = 1.0
    f, w, obs = bm.to_dense((-48, -48, -48), (47, 47, 47)) if voxels else (None, None, None)
    if voxels:
        idx = np.array(voxels) + 48
        expect = np.zeros(obs.shape, bool)
        expect[tuple(idx.T)] = True
        assert np.array_equal(obs, expect)
        assert np.array_equal(w > 0, obs)
