import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstc.errors import DimensionError, FormatError
from lstc.feature_bank import BankRecord, FeatureBank, WindowSpec


def random_bank(rng, dim=None, videos=None):
    dim = dim or int(rng.integers(1, 6))
    bank = FeatureBank(dim)
    for v in range(videos if videos is not None else int(rng.integers(0, 4))):
        for t in rng.choice(40, size=int(rng.integers(1, 6)), replace=False):
            n = int(rng.integers(0, 4))
            bank.insert(BankRecord(f"v{v}", int(t) - 10, rng.normal(size=(n, dim))))
    return bank


def test_insert_keeps_timestamps_sorted_and_replaces_duplicates():
    bank = FeatureBank(2)
    for t in (5, 1, 3):
        bank.insert(BankRecord("a", t, np.full((1, 2), float(t))))
    assert bank.timeline("a") == [1, 3, 5]
    bank.insert(BankRecord("a", 3, np.zeros((2, 2))))
    assert bank.timeline("a") == [1, 3, 5] and len(bank) == 3
    assert [r.feats.shape[0] for r in bank.records("a")] == [1, 2, 1]


def test_insert_rejects_wrong_dim():
    with pytest.raises(DimensionError):
        FeatureBank(3).insert(BankRecord("a", 0, np.zeros((1, 2))))


def test_window_bounds_and_center():
    bank = FeatureBank(1)
    for t in range(0, 20, 2):
        bank.insert(BankRecord("a", t, np.full((1, 1), float(t))))
    w = bank.query_window("a", 10, WindowSpec(4, False))
    assert w.source_timestamps == (6, 8, 12, 14)
    assert w.ctx[:, 0].tolist() == [6.0, 8.0, 12.0, 14.0]
    w = bank.query_window("a", 10, WindowSpec(4, True))
    assert w.source_timestamps == (6, 8, 10, 12, 14)
    assert bank.query_window("b", 10).length == 0
    assert bank.query_window("a", 100).ctx.shape == (0, 1)


def test_window_returns_a_copy():
    bank = FeatureBank(1).insert(BankRecord("a", 0, np.ones((1, 1))))
    w = bank.query_window("a", 1)
    w.ctx[...] = 5.0
    assert bank.query_window("a", 1).ctx[0, 0] == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_roundtrip_is_bitwise(seed):
    bank = random_bank(np.random.default_rng(seed))
    raw = bank.to_bytes()
    back = FeatureBank.from_bytes(raw)
    assert back == bank
    assert back.to_bytes() == raw


def test_save_load(tmp_path):
    bank = random_bank(np.random.default_rng(0), dim=3, videos=2)
    bank.save(tmp_path / "b.lfb")
    assert FeatureBank.load(tmp_path / "b.lfb", expected_dim=3) == bank
    with pytest.raises(FormatError, match="offset 8"):
        FeatureBank.load(tmp_path / "b.lfb", expected_dim=4)


def test_every_truncation_reports_an_offset():
    raw = random_bank(np.random.default_rng(1), dim=2, videos=2).to_bytes()
    for cut in range(len(raw)):
        with pytest.raises(FormatError) as exc:
            FeatureBank.from_bytes(raw[:cut])
        assert exc.value.offset is not None and 0 <= exc.value.offset <= cut
        assert "byte offset" in str(exc.value)


def test_corruptions():
    bank = FeatureBank(1).insert(BankRecord("a", 0, np.ones((1, 1))))
    bank.insert(BankRecord("a", 1, np.ones((1, 1))))
    raw = bytearray(bank.to_bytes())
    with pytest.raises(FormatError, match="offset 0"):
        FeatureBank.from_bytes(b"XXXX" + bytes(raw[4:]))
    bad = bytearray(raw)
    bad[4:8] = struct.pack("<I", 9)
    with pytest.raises(FormatError, match="version"):
        FeatureBank.from_bytes(bytes(bad))
    with pytest.raises(FormatError, match="trailing"):
        FeatureBank.from_bytes(bytes(raw) + b"\0")
    # second record's timestamp sits after header(16) + name(4+1) + count(4) + record(12+8)
    second = 16 + 5 + 4 + 20
    bad = bytearray(raw)
    bad[second:second + 8] = struct.pack("<q", -1)
    with pytest.raises(FormatError, match=f"offset {second}"):
        FeatureBank.from_bytes(bytes(bad))
    bad = bytearray(raw)
    bad[second + 12:second + 20] = struct.pack("<d", float("nan"))
    with pytest.raises(FormatError, match="non-finite"):
        FeatureBank.from_bytes(bytes(bad))


def test_ndjson_and_summary():
    bank = FeatureBank(2).insert(BankRecord("a", 3, np.eye(2)))
    rows = [json.loads(line) for line in bank.iter_ndjson()]
    assert rows == [{"video_id": "a", "timestamp_s": 3, "rows": 2, "feats": [[1.0, 0.0], [0.0, 1.0]]}]
    assert list(bank.summary_rows()) == [("a", 1, 2, 3, 3)]
