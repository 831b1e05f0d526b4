import json
import struct

import numpy as np
import pytest

from dsalab import checkpoint, formats, vit
from dsalab import data as D
from dsalab.formats import BadMagicError, FormatError, TruncatedPayloadError, VersionMismatchError


def _hand_dsad() -> bytes:
    # one 1x2x1 example, built byte by byte from the documented layout
    head = b"DSAD" + struct.pack("<HHHHI", 1, 1, 2, 1, 1)
    rec = struct.pack("<BB", 1, 0) + struct.pack("<BH", 1, 0) + struct.pack("<BHH", 2, 1, 3)
    return head + rec + struct.pack("<2f", 0.25, 0.5)


def test_decode_hand_built_dataset():
    images, y, s, sp, rl = formats.decode_dataset(_hand_dsad())
    assert images.shape == (1, 1, 1, 2)
    np.testing.assert_array_equal(images[0, 0, 0], [0.25, 0.5])
    assert (y[0], s[0], sp[0], rl[0]) == (1, 0, (0,), (1, 3))
    assert formats.encode_dataset(images, y, s, sp, rl) == _hand_dsad()


def test_dataset_round_trip(tmp_path, small_data):
    tr, _ = small_data
    D.write_dataset(tmp_path / "t.dsad", tr)
    assert D.read_dataset(tmp_path / "t.dsad") == tr


def test_empty_dataset_round_trip(tmp_path):
    empty = D.Dataset.empty()
    D.write_dataset(tmp_path / "e.dsad", empty)
    back = D.read_dataset(tmp_path / "e.dsad")
    assert len(back) == 0 and back.image_hw == (32, 32)


def test_distinct_error_codes():
    buf = _hand_dsad()
    errors = []
    for bad in (b"XXXX" + buf[4:], buf[:4] + struct.pack("<H", 2) + buf[6:], buf[:-3]):
        with pytest.raises(FormatError) as info:
            formats.decode_dataset(bad)
        errors.append(type(info.value))
    assert errors == [BadMagicError, VersionMismatchError, TruncatedPayloadError]
    assert len({e.code for e in errors}) == 3


def test_truncated_mid_record(small_data):
    tr, _ = small_data
    buf = formats.encode_dataset(tr.images, tr.y, tr.s, tr.spurious, tr.real)
    with pytest.raises(TruncatedPayloadError):
        formats.decode_dataset(buf[:len(buf) // 2])


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError):
        formats.decode_dataset(_hand_dsad() + b"\0")


def test_short_file_is_bad_magic():
    with pytest.raises(BadMagicError):
        formats.decode_dataset(b"DS")


def test_checkpoint_layout_by_hand():
    buf = formats.encode_checkpoint({"w": np.array([[1.0, 2.0]])}, {"a": 1})
    assert buf[:4] == b"DSAV"
    version, count = struct.unpack("<HI", buf[4:10])
    assert (version, count) == (1, 2)
    pos = 10
    (nlen,) = struct.unpack("<H", buf[pos:pos + 2])
    assert buf[pos + 2:pos + 2 + nlen] == b"__config"
    pos += 2 + nlen
    rank, size = struct.unpack("<BI", buf[pos:pos + 5])
    assert rank == 1
    assert json.loads(buf[pos + 5:pos + 5 + size]) == {"a": 1}
    pos += 5 + size
    (nlen,) = struct.unpack("<H", buf[pos:pos + 2])
    assert buf[pos + 2:pos + 2 + nlen] == b"w"
    pos += 2 + nlen
    assert struct.unpack("<BII", buf[pos:pos + 9]) == (2, 1, 2)
    assert struct.unpack("<2f", buf[pos + 9:]) == (1.0, 2.0)


def test_model_round_trip(tmp_path, micro_cfg, micro_params):
    checkpoint.save_model(tmp_path / "m.dsav", micro_params, micro_cfg, {"kind": "test"})
    params, cfg, meta = checkpoint.load_model(tmp_path / "m.dsav")
    assert cfg == micro_cfg and meta == {"kind": "test"}
    rounded = checkpoint.round_to_f32(micro_params)
    for k in micro_params:
        assert np.array_equal(params[k].data, rounded[k].data)
        assert params[k].requires_grad


def test_model_rejects_mismatched_tensors(micro_cfg, micro_params):
    buf = checkpoint.encode_model(micro_params, micro_cfg)
    tensors, config = formats.decode_checkpoint(buf)
    del tensors["cls_token"]
    with pytest.raises(FormatError, match="cls_token"):
        checkpoint.decode_model(formats.encode_checkpoint(tensors, config))
    tensors, config = formats.decode_checkpoint(buf)
    tensors["cls_token"] = np.zeros((2, micro_cfg.embed_dim))
    with pytest.raises(FormatError, match="shape"):
        checkpoint.decode_model(formats.encode_checkpoint(tensors, config))


def test_checkpoint_needs_config():
    with pytest.raises(FormatError):
        checkpoint.decode_model(formats.encode_checkpoint({}, {"meta": {}}))


def test_write_is_atomic_and_leaves_no_temp(tmp_path):
    formats.write_bytes(tmp_path / "x.bin", b"abc")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["x.bin"]
