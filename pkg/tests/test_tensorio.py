import json

import numpy as np
import pytest

from scenealign.errors import FormatError, InvariantError
from scenealign.tensorio import (
    Box,
    DetectionRecord,
    SequenceBundle,
    TensorContainer,
    load_bundle,
    read_detections,
    read_tensor,
    save_bundle,
    write_detections,
    write_tensor,
)


def test_round_trip_zeros(tmp_path):
    c = TensorContainer.from_array("z", np.zeros((2, 3), dtype=np.float32))
    path = tmp_path / "z.tc"
    write_tensor(c, path)
    raw = path.read_bytes()
    header_len = int.from_bytes(raw[8:12], "little")
    assert len(raw) == 8 + 4 + header_len + 24
    assert read_tensor(path) == c


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_random(tmp_path, seed):
    rng = np.random.default_rng(seed)
    arrays = [
        rng.standard_normal((3, 4, 2)).astype(np.float32),
        (rng.random((6,)) > 0.5).astype(np.uint8),
        rng.integers(-5, 5, size=(2, 2, 2, 2, 2)).astype(np.int64),
        np.float32(rng.standard_normal()).reshape(()),
    ]
    for i, arr in enumerate(arrays):
        c = TensorContainer.from_array(f"a{i}", arr)
        path = tmp_path / f"a{i}.tc"
        write_tensor(c, path)
        back = read_tensor(path)
        assert back == c
        np.testing.assert_array_equal(back.to_array(), arr)


def test_size_mismatch_rejected():
    with pytest.raises(InvariantError):
        TensorContainer("bad", "float32", (2, 3), np.zeros(5, dtype=np.float32))


def test_rank_and_dtype_limits():
    with pytest.raises(InvariantError):
        TensorContainer("r", "float32", (1,) * 6, np.zeros(1, dtype=np.float32))
    with pytest.raises(InvariantError):
        TensorContainer("d", "float64", (1,), np.zeros(1))


def test_payload_bytes_by_hand(tmp_path):
    # IEEE-754 little-endian float32 of 1.0 is 00 00 80 3F
    c = TensorContainer.from_array("one", np.array([1.0], dtype=np.float32))
    path = tmp_path / "one.tc"
    write_tensor(c, path)
    raw = path.read_bytes()
    assert raw[-4:] == bytes([0x00, 0x00, 0x80, 0x3F])


def test_header_parseable_standalone(tmp_path):
    c = TensorContainer.from_array("hdr", np.arange(4, dtype=np.int64))
    path = tmp_path / "h.tc"
    write_tensor(c, path)
    raw = path.read_bytes()
    header_len = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    assert header == {"name": "hdr", "dtype": "int64", "shape": [4]}


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.tc"
    path.write_bytes(b"XXXXXXXX" + b"\x00" * 16)
    with pytest.raises(FormatError, match="magic"):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    c = TensorContainer.from_array("t", np.zeros(8, dtype=np.float32))
    path = tmp_path / "t.tc"
    write_tensor(c, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        read_tensor(path)


def test_unknown_dtype(tmp_path):
    header = json.dumps({"name": "x", "dtype": "float16", "shape": [1]}).encode()
    path = tmp_path / "u.tc"
    path.write_bytes(b"UNISHTC1" + len(header).to_bytes(4, "little") + header + b"\x00\x00")
    with pytest.raises(FormatError, match="dtype"):
        read_tensor(path)


def _det(frame, boxes, size=(640, 480), cut=0.0):
    return DetectionRecord(frame, boxes, size, cut)


def test_detections_round_trip(tmp_path):
    recs = [
        _det(0, [Box("person", 10, 20, 110, 220, 0.9)]),
        _det(1, [Box("person", 12, 21, 111, 221, 0.8), Box("dog", 0, 0, 5, 5, 0.5)], cut=0.3),
    ]
    path = tmp_path / "det.jsonl"
    write_detections(recs, path)
    back = read_detections(path)
    assert len(back) == 2
    assert [r.frame_index for r in back] == [0, 1]
    assert back[1].boxes[1].label == "dog"
    assert back[1].content_change_score == 0.3


def test_detections_sorted_and_duplicates(tmp_path):
    path = tmp_path / "det.jsonl"
    write_detections([_det(3, []), _det(1, [])], path)
    back = read_detections(path)
    assert [r.frame_index for r in back] == [1, 3]
    write_detections([_det(1, []), _det(1, [])], path)
    with pytest.raises(FormatError, match="duplicate"):
        read_detections(path)


def test_detections_inverted_box_names_frame(tmp_path):
    path = tmp_path / "det.jsonl"
    path.write_text(
        '{"frame":7,"boxes":[{"cls":"person","x0":50,"y0":0,"x1":10,"y1":10,"score":0.9}],'
        '"size":[64,48],"cut_score":0}\n'
    )
    with pytest.raises(InvariantError, match="frame 7"):
        read_detections(path)


def test_detections_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert read_detections(path) == []


def test_detections_malformed_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json}\n")
    with pytest.raises(FormatError, match="malformed"):
        read_detections(path)


def test_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    bundle = SequenceBundle(
        frames=2,
        fps=24.0,
        scalars={"scale_pred": 1.5},
        pointmaps=rng.standard_normal((2, 4, 5, 3)).astype(np.float32),
        confidence=rng.random((2, 4, 5)).astype(np.float32),
        masks=(rng.random((2, 4, 5)) > 0.5),
        hmr_tokens=rng.standard_normal((2, 8)).astype(np.float32),
    )
    save_bundle(bundle, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    assert back.frames == 2
    assert back.fps == 24.0
    assert back.scalars["scale_pred"] == 1.5
    np.testing.assert_array_equal(back.pointmaps, bundle.pointmaps)
    np.testing.assert_array_equal(back.masks, bundle.masks)
    assert back.masks.dtype == np.bool_
    assert back.pseudo_depth is None


def test_bundle_mask_nonzero_is_true():
    masks = np.array([[[0, 2], [255, 0]]], dtype=np.uint8)
    b = SequenceBundle(frames=1, masks=masks)
    np.testing.assert_array_equal(b.masks, [[[False, True], [True, False]]])


def test_bundle_shape_mismatch():
    with pytest.raises(InvariantError, match="raster size"):
        SequenceBundle(
            frames=1,
            pointmaps=np.zeros((1, 4, 5, 3), dtype=np.float32),
            confidence=np.zeros((1, 3, 5), dtype=np.float32),
        )
