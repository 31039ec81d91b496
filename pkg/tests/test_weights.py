import struct

import numpy as np
import pytest

from flexmore.errors import (
    BadMagicError,
    InvariantError,
    NonFiniteError,
    TruncatedFileError,
    VersionMismatchError,
)
from flexmore.linalg import frobenius_norm
from flexmore.synth import SplitMix64, random_matrix
from flexmore.weights import (
    AdapterEntry,
    ExpertBundle,
    LowRankAdapter,
    decode_adapter,
    decode_bundle,
    encode_adapter,
    encode_bundle,
    load_adapter,
    load_bundle,
    save_adapter,
    save_bundle,
)

from conftest import seeded_bundle


def test_empty_bundle_rejected_at_save(tmp_path):
    with pytest.raises(InvariantError):
        save_bundle(ExpertBundle("empty", {}), tmp_path / "e.fmw")


def test_negative_zero_round_trips(tmp_path):
    p = tmp_path / "z.fmw"
    save_bundle(ExpertBundle("z", {"w": np.array([[-0.0]])}), p)
    got = load_bundle(p)["w"][0, 0]
    assert got == 0.0 and np.signbit(got)


def test_seeded_bundle_round_trip(tmp_path):
    b = seeded_bundle(3, "seeded")
    p = tmp_path / "b.fmw"
    save_bundle(b, p)
    back = load_bundle(p)
    assert back == b
    for t in b.targets:
        assert frobenius_norm(back[t] - b[t]) == 0.0
    assert back.dims_signature == [(6, 4), (4, 6)]


def test_bundle_layout_is_exact():
    data = encode_bundle(ExpertBundle("ab", {"w": np.array([[1.5, -2.0]])}))
    expected = (
        b"FMW1"
        + struct.pack("<I", 1)
        + struct.pack("<I", 2) + b"ab"
        + struct.pack("<I", 1)
        + struct.pack("<I", 1) + b"w"
        + struct.pack("<QQB", 1, 2, 0)
        + struct.pack("<2d", 1.5, -2.0)
    )
    assert data == expected


def test_bad_magic():
    data = bytearray(encode_bundle(seeded_bundle(1)))
    data[0:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        decode_bundle(bytes(data))


def test_version_mismatch():
    data = bytearray(encode_bundle(seeded_bundle(1)))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        decode_bundle(bytes(data))


@pytest.mark.parametrize("cut", [3, 10, 40, -1])
def test_truncated(cut):
    data = encode_bundle(seeded_bundle(1))
    with pytest.raises((TruncatedFileError, BadMagicError)):
        decode_bundle(data[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(TruncatedFileError):
        decode_bundle(encode_bundle(seeded_bundle(1)) + b"\0")


def test_non_finite_rejected_both_ways():
    with pytest.raises(NonFiniteError):
        encode_bundle(ExpertBundle("n", {"w": np.array([[np.nan]])}))
    good = encode_bundle(ExpertBundle("n", {"w": np.array([[1.0]])}))
    bad = good[:-8] + struct.pack("<d", float("inf"))
    with pytest.raises(NonFiniteError):
        decode_bundle(bad)


def test_composability():
    a = seeded_bundle(1, "a")
    b = seeded_bundle(2, "b")
    c = seeded_bundle(3, "c", shapes=(("w1", 6, 4),))
    assert a.composable_with(b)
    assert not a.composable_with(c)


def _adapter(seed, rank=1, name="ad"):
    rng = SplitMix64(seed)
    return LowRankAdapter(
        name,
        "base",
        [
            AdapterEntry("w1", rank, random_matrix(rng, 6, rank), random_matrix(rng, rank, 4)),
            AdapterEntry("w2", rank, random_matrix(rng, 4, rank), random_matrix(rng, rank, 6)),
        ],
    )


def test_rank1_adapter_round_trip(tmp_path):
    a = _adapter(1, rank=1)
    p = tmp_path / "a.fma"
    save_adapter(a, p)
    back = load_adapter(p)
    assert back == a
    assert back.ranks == {"w1": 1, "w2": 1}
    assert back.base_name == "base"


def test_seeded_adapter_round_trip_zero_difference(tmp_path):
    a = _adapter(9, rank=3)
    p = tmp_path / "a.fma"
    save_adapter(a, p)
    back = load_adapter(p)
    for x, y in zip(a, back):
        assert frobenius_norm(x.b - y.b) == 0.0 and frobenius_norm(x.a - y.a) == 0.0
        assert x.rank == y.rank == 3


def test_adapter_with_mismatched_factors_rejected_at_load():
    # hand-built FMA1 with B 4x2 but A 1x3 and rank 2
    def mat(m):
        return struct.pack("<QQB", *m.shape, 0) + m.astype("<f8").tobytes()

    data = (
        b"FMA1" + struct.pack("<I", 1)
        + struct.pack("<I", 1) + b"a"
        + struct.pack("<I", 1) + b"b"
        + struct.pack("<I", 1)
        + struct.pack("<I", 1) + b"w"
        + struct.pack("<Q", 2)
        + mat(np.ones((4, 2)))
        + mat(np.ones((1, 3)))
    )
    with pytest.raises(InvariantError):
        decode_adapter(data)


def test_adapter_rank_above_min_dim_rejected():
    with pytest.raises(InvariantError):
        AdapterEntry("w", 3, np.ones((2, 3)), np.ones((3, 5)))


def test_duplicate_targets_rejected():
    e = AdapterEntry("w", 1, np.ones((2, 1)), np.ones((1, 2)))
    with pytest.raises(InvariantError):
        LowRankAdapter("a", "b", [e, e])


def test_adapter_magic_distinct_from_bundle():
    with pytest.raises(BadMagicError):
        decode_adapter(encode_bundle(seeded_bundle(1)))
    assert encode_adapter(_adapter(2))[:4] == b"FMA1"
