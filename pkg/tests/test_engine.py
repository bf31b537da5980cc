import struct

import numpy as np
import pytest

from ocpw import (
    DecodeError,
    ErrorBoundConfig,
    ExtraSpacePolicy,
    FieldSpec,
    InvalidInput,
    decompress,
    read_and_verify,
    run_method,
)
from ocpw.container import FLAG_OFFSET, METADATA_OFFSET_AT
from ocpw.engine import Dataset, reference_blocks
from ocpw.planner import encode_metadata

BOUNDS = (1e-2, 1e-5, 3e-3, 3e-5, 1e-3, 1e-4)


def make_dataset(g=96, ranks=8):
    specs = [FieldSpec(f"f{i}", (g, g, g), decay=1.0 + 0.5 * i, seed=i) for i in range(6)]
    return Dataset.synthetic(specs, [ErrorBoundConfig("rel", b) for b in BOUNDS], ranks)


@pytest.fixture(scope="module")
def ds():
    return make_dataset()


@pytest.fixture(scope="module")
def refs(ds):
    return reference_blocks(ds)


def test_dataset_validation(ds):
    with pytest.raises(InvalidInput):
        Dataset(["a"], [], [[None]])
    with pytest.raises(InvalidInput):
        Dataset.from_globals({"a": np.zeros((4, 4)), "b": np.zeros((4, 5))}, [ErrorBoundConfig()] * 2, 2)
    assert ds.ranks == 8 and ds.fields == 6
    assert ds.raw_bytes == 6 * 96**3 * 4
    assert np.array_equal(ds.assemble(2), make_dataset().assemble(2))


def test_constant_data_never_overflows(tmp_path):
    arrays = {"c": np.full((32, 32, 32), 2.5, np.float32)}
    d = Dataset.from_globals(arrays, [ErrorBoundConfig("absolute", 1e-3)], 4)
    rep = run_method(d, 4, tmp_path / "c.ocpw")
    assert rep.overflow_fraction == 0
    assert rep.overflows == []
    res = read_and_verify(tmp_path / "c.ocpw", d)
    assert res.verification.ok


def test_overflowing_run_matches_reference(ds, refs, tmp_path):
    path = tmp_path / "o.ocpw"
    rep = run_method(ds, 4, path, policy=ExtraSpacePolicy(1.1))
    assert rep.overflow_fraction > 0
    res = read_and_verify(path, ds)
    assert res.verification.ok
    for r in range(ds.ranks):
        for f in range(ds.fields):
            ref = decompress(refs[r][f], ds.configs[f], ds.partitions[r][f].dims).values
            assert np.array_equal(res.values[r][f], ref)
            assert rep.entries[f * ds.ranks + r].actual_size == len(refs[r][f].payload)


def test_methods_agree(ds, tmp_path):
    out = {}
    for m in (1, 2, 3, 4):
        run_method(ds, m, tmp_path / f"m{m}.ocpw")
        out[m] = read_and_verify(tmp_path / f"m{m}.ocpw", ds)
        assert out[m].verification.ok
    for r in range(ds.ranks):
        for f in range(ds.fields):
            assert np.array_equal(out[1].values[r][f], ds.partitions[r][f].values)
            assert np.array_equal(out[2].values[r][f], out[3].values[r][f])
            assert np.array_equal(out[2].values[r][f], out[4].values[r][f])
    assert np.array_equal(out[4].assemble(0).shape, (96, 96, 96))


def test_adversarial_estimates(ds, tmp_path):
    path = tmp_path / "a.ocpw"
    rep = run_method(ds, 3, path, estimate_override=1)
    assert rep.overflow_fraction == 1.0
    assert all(e.reserved_size == 8 for e in rep.entries)
    assert read_and_verify(path, ds).verification.ok


def test_writes_are_disjoint(ds, tmp_path):
    ranges = []
    run_method(
        ds, 4, tmp_path / "d.ocpw", policy=ExtraSpacePolicy(1.1),
        on_write=lambda off, n, rank: ranges.append((off, off + n, rank)),
    )
    data = sorted((a, b) for a, b, rank in ranges if rank is not None and b > a)
    for (a0, b0), (a1, b1) in zip(data, data[1:]):
        assert b0 <= a1


def test_raw_method_file_size(ds, tmp_path):
    rep = run_method(ds, 1, tmp_path / "r.ocpw")
    meta = len(encode_metadata([]))
    assert rep.file_size == ds.raw_bytes + rep.header_size + meta + 32 * ds.ranks * ds.fields


def test_report_accounting(ds, tmp_path):
    rep = run_method(ds, 4, tmp_path / "w.ocpw", policy=ExtraSpacePolicy(1.25))
    fits = [e for e in rep.entries if not e.overflowed]
    assert rep.wasted_bytes == sum(e.reserved_size - e.actual_size for e in fits)
    assert rep.ratio_with_extra_space <= rep.ratio_without_extra_space
    assert rep.raw_bytes == ds.raw_bytes
    lines = rep.to_csv().strip().splitlines()
    assert len(lines) == 1 + ds.ranks * ds.fields
    assert set(rep.breakdown()) >= {"compress_total", "write_total", "wall_time"}
    assert sorted(rep.order[0]) == list(range(ds.fields))


def test_overflow_monotone_in_r_space(ds, tmp_path):
    fracs = [
        run_method(ds, 3, tmp_path / f"s{rs}.ocpw", policy=ExtraSpacePolicy(rs)).overflow_fraction
        for rs in (1.10, 1.15, 1.25, 1.43)
    ]
    assert all(a >= b for a, b in zip(fracs, fracs[1:])), fracs


def test_corrupt_entry_names_rank_and_field(ds, tmp_path):
    path = tmp_path / "x.ocpw"
    rep = run_method(ds, 4, path)
    res = read_and_verify(path)
    m = res.container.metadata[res.container.entry_index(3, 2)]
    data = bytearray(path.read_bytes())
    data[m.reserved_offset + m.head_size // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(DecodeError, match=r"rank 3, field 'f2'"):
        read_and_verify(path)


@pytest.mark.parametrize("flag", [0, 2])
def test_torn_or_aborted_file_rejected(ds, tmp_path, flag):
    path = tmp_path / "t.ocpw"
    run_method(ds, 4, path)
    data = bytearray(path.read_bytes())
    data[FLAG_OFFSET] = flag
    path.write_bytes(bytes(data))
    with pytest.raises(DecodeError):
        read_and_verify(path)


def test_failed_run_marks_aborted(ds, tmp_path):
    path = tmp_path / "f.ocpw"

    def boom(rank, field):
        if rank == 5:
            raise RuntimeError("estimator failure")
        return 100

    with pytest.raises(RuntimeError):
        run_method(ds, 4, path, estimate_override=boom)
    assert path.read_bytes()[FLAG_OFFSET] == 2
    with pytest.raises(DecodeError, match="aborted"):
        read_and_verify(path)


def test_invalid_arguments(ds, tmp_path):
    with pytest.raises(InvalidInput):
        run_method(ds, 5, tmp_path / "x")
    with pytest.raises(InvalidInput):
        run_method(ds, 4, tmp_path / "x", sample_fraction=0)
    with pytest.raises(InvalidInput):
        run_method(ds, 4, tmp_path / "x", backend="process", on_write=print)


def test_process_backend(tmp_path):
    d = make_dataset(g=32, ranks=2)
    rep = run_method(d, 4, tmp_path / "p.ocpw", backend="process")
    assert len(rep.timings) == 2
    res = read_and_verify(tmp_path / "p.ocpw", d)
    assert res.verification.ok
    thread = read_and_verify(run_method(d, 4, tmp_path / "t.ocpw").path)
    for r in range(2):
        for f in range(6):
            assert np.array_equal(res.values[r][f], thread.values[r][f])


def test_compress_time_similar_between_baseline_and_overlap(ds, tmp_path):
    run_method(ds, 2, tmp_path / "warm.ocpw")
    tot = {}
    for m in (2, 3):
        runs = [sum(t.compress_total for t in run_method(ds, m, tmp_path / f"c{m}.ocpw").timings) for _ in range(3)]
        tot[m] = float(np.median(runs))
    assert abs(tot[2] - tot[3]) / tot[2] < 0.10
