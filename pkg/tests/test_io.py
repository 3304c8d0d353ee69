"""File format round trips, header layout, and pooling."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langtail import data_model as dm
from langtail.errors import DataError, FormatError, ShapeError, TruncationError


def test_feature_matrix_round_trip(tmp_path):
    m = np.arange(12, dtype=np.float32).reshape(3, 4) / 7.0
    p = tmp_path / "m.ltfm"
    dm.write_feature_matrix(p, m)
    back = dm.read_feature_matrix(p)
    assert back.dtype == np.float32
    assert np.array_equal(back, m)


def test_feature_matrix_header_layout(tmp_path):
    # 1x1 matrix: 4 magic + 4 version + 8 rows + 8 cols + 4 payload = 28 bytes
    p = tmp_path / "one.ltfm"
    dm.write_feature_matrix(p, np.array([[1.5]], dtype=np.float32))
    raw = p.read_bytes()
    assert len(raw) == 28
    assert raw[:4] == b"LTFM"
    version, rows, cols = struct.unpack("<IQQ", raw[4:24])
    assert (version, rows, cols) == (1, 1, 1)
    assert struct.unpack("<f", raw[24:])[0] == 1.5


def test_feature_matrix_bad_magic(tmp_path):
    p = tmp_path / "bad.ltfm"
    p.write_bytes(b"XXXX" + b"\x00" * 24)
    with pytest.raises(FormatError):
        dm.read_feature_matrix(p)


def test_feature_matrix_truncated(tmp_path):
    p = tmp_path / "t.ltfm"
    dm.write_feature_matrix(p, np.ones((2, 3), dtype=np.float32))
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(TruncationError):
        dm.read_feature_matrix(p)


def test_feature_matrix_trailing_bytes(tmp_path):
    p = tmp_path / "t.ltfm"
    dm.write_feature_matrix(p, np.ones((2, 2), dtype=np.float32))
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        dm.read_feature_matrix(p)


def test_feature_matrix_rejects_non_finite(tmp_path):
    with pytest.raises(DataError):
        dm.write_feature_matrix(tmp_path / "nan.ltfm", np.array([[np.nan]]))
    # and on read, when the payload was forged
    p = tmp_path / "forged.ltfm"
    payload = struct.pack("<f", np.inf)
    p.write_bytes(b"LTFM" + struct.pack("<IQQ", 1, 1, 1) + payload)
    with pytest.raises(DataError):
        dm.read_feature_matrix(p)


def test_feature_matrix_rejects_empty():
    with pytest.raises(ShapeError):
        dm.write_feature_matrix("/dev/null", np.empty((0, 3)))


def test_superpoints_round_trip_and_densify(tmp_path):
    p = tmp_path / "sp.ltsp"
    dm.write_superpoints(p, np.array([0, 2, 2, 5, 0]))
    assert np.array_equal(dm.read_superpoints(p), [0, 1, 1, 2, 0])
    dm.write_superpoints(p, np.array([1, 0, 2]))
    assert np.array_equal(dm.read_superpoints(p), [1, 0, 2])


def test_superpoints_reject_negative(tmp_path):
    with pytest.raises(DataError):
        dm.write_superpoints(tmp_path / "sp.ltsp", np.array([0, -1]))


def test_labels_round_trip(tmp_path):
    p = tmp_path / "l.ltlb"
    labels = np.array([0, 3, -1, 2])
    dm.write_labels(p, labels)
    assert np.array_equal(dm.read_labels(p), labels)


def test_labels_reject_below_ignore(tmp_path):
    with pytest.raises(DataError):
        dm.write_labels(tmp_path / "l.ltlb", np.array([0, -2]))


def test_pool_by_superpoint_hand_case():
    pts = np.array([[1.0, 0.0], [3.0, 2.0], [0.0, 10.0]])
    pooled = dm.pool_by_superpoint(pts, np.array([0, 0, 1]))
    assert np.allclose(pooled, [[2.0, 1.0], [0.0, 10.0]])


def test_pool_by_superpoint_rejects_gaps():
    with pytest.raises(DataError):
        dm.pool_by_superpoint(np.ones((2, 2)), np.array([0, 2]))


def test_pool_by_superpoint_shape_mismatch():
    with pytest.raises(ShapeError):
        dm.pool_by_superpoint(np.ones((3, 2)), np.array([0, 1]))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_pool_permutation_invariant(n, d, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, d))
    assign = rng.integers(0, max(1, n // 2), size=n)
    assign[: assign.max() + 1] = np.arange(assign.max() + 1)  # keep ids dense
    perm = rng.permutation(n)
    a = dm.pool_by_superpoint(pts, assign)
    b = dm.pool_by_superpoint(pts[perm], assign[perm])
    assert np.allclose(a, b, atol=1e-12)


def test_entity_record_normalizes_masks():
    e = dm.EntityRecord(1, "chair", np.ones(4), masks=[("s", np.array([3, 1, 3]))])
    assert np.array_equal(e.masks[0][1], [1, 3])


def test_entity_record_rejections():
    with pytest.raises(DataError):
        dm.EntityRecord(1, "x", np.zeros(4))
    with pytest.raises(DataError):
        dm.EntityRecord(1, "x", np.ones(4), masks=[("s", np.array([], dtype=np.int64))])
    with pytest.raises(DataError):
        dm.EntityRecord(1, "x", np.ones(4), masks=[("s", np.array([-1]))])


def test_scene_bundle_shape_checks():
    with pytest.raises(ShapeError):
        dm.SceneBundle("s", np.ones((3, 2)), np.zeros(2, dtype=np.int64))
    b = dm.SceneBundle("s", np.ones((3, 2)), np.array([0, 1, 1]))
    assert b.n_points == 3
    assert b.n_superpoints == 2


def test_entity_bank_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ents = [
        dm.EntityRecord(7, "lamp", rng.normal(size=8),
                        masks=[("a", np.array([0, 2])), ("b", np.array([1]))]),
        dm.EntityRecord(3, "desk", rng.normal(size=8),
                        masks=[("a", np.array([5]))]),
    ]
    dm.write_entity_bank(tmp_path / "bank", ents)
    back = dm.read_entity_bank(tmp_path / "bank")
    # entities come back in entities.tsv (sorted id) order
    assert [e.entity_id for e in back] == [3, 7]
    by_id = {e.entity_id: e for e in back}
    for e in ents:
        r = by_id[e.entity_id]
        assert r.text == e.text
        assert np.allclose(r.text_embedding, e.text_embedding, atol=1e-6)
        assert [(sid, idx.tolist()) for sid, idx in sorted(r.masks)] == [
            (sid, idx.tolist()) for sid, idx in sorted(e.masks)
        ]


def test_entity_masks_round_trip(tmp_path):
    ents = [dm.EntityRecord(4, "x", np.ones(4), masks=[("s0", np.array([1, 5]))])]
    p = tmp_path / "s0.bin"
    dm.write_entity_masks(p, "s0", ents)
    got = dm.read_entity_masks(p)
    assert got[0][0] == 4
    assert np.array_equal(got[0][1], [1, 5])
