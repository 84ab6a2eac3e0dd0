import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icon_vil.errors import BadConfig, BadKind, DataCoverageError, DimMismatch, ParseError
from icon_vil.numerics import make_rng
from icon_vil.scenario import (ALL_DOMAINS, StreamKind, TaskSpec, _domain_rotation,
                               generate_stream, index_cells, load_csv, synth_dataset, task_data)


def test_stream_task_counts():
    assert len(generate_stream("vil", 10, 4, 2)) == 20
    assert len(generate_stream("cil", 10, 4, 2)) == 5
    dil = generate_stream("dil", 10, 4, 2)
    assert len(dil) == 4 and all(t.class_ids == tuple(range(10)) for t in dil)
    assert len(generate_stream("cdil", 10, 4, 2)) == 4


def test_vil_covers_every_group_domain_cell_once():
    stream = generate_stream("vil", 10, 4, 2, seed=3)
    cells = [(t.class_ids, t.domain_id) for t in stream]
    assert len(set(cells)) == 20
    assert {d for _, d in cells} == {0, 1, 2, 3}
    assert [t.task_index for t in stream] == list(range(20))


def test_cil_pools_domains_and_cdil_pairs_new_groups_with_new_domains():
    cil = generate_stream("cil", 10, 4, 2, seed=1)
    assert {t.domain_id for t in cil} == {ALL_DOMAINS}
    assert sorted(c for t in cil for c in t.class_ids) == list(range(10))
    cdil = generate_stream("cdil", 10, 4, 2, seed=1)
    assert len({t.domain_id for t in cdil}) == 4
    assert len({t.class_ids for t in cdil}) == 4


def test_stream_determinism_and_seed_dependence():
    a = generate_stream("vil", 10, 4, 2, seed=5)
    assert a.tasks == generate_stream("vil", 10, 4, 2, seed=5).tasks
    assert a.tasks != generate_stream("vil", 10, 4, 2, seed=6).tasks


def test_stream_errors():
    with pytest.raises(BadConfig) as exc:
        generate_stream("vil", 10, 4, 3)
    assert exc.value.path == "scenario.classes_per_task"
    with pytest.raises(BadKind) as exc:
        generate_stream("multi", 10, 4, 2)
    assert exc.value.path == "scenario.kind"
    assert StreamKind.parse("VIL") is StreamKind.VIL


def test_task_spec_validates_classes():
    with pytest.raises(ValueError):
        TaskSpec(0, 0, (2, 1))
    with pytest.raises(ValueError):
        TaskSpec(0, 0, ())


def test_synth_cells_and_splits():
    cells = synth_dataset(10, 4, 8, 60, 0.6, 0.5, seed=2)
    assert len(cells) == 40
    assert {(c.class_id, c.domain_id) for c in cells} == {(c, d) for c in range(10) for d in range(4)}
    assert all(c.train.shape == (45, 8) and c.test.shape == (15, 8) for c in cells)


def test_synth_is_byte_identical_per_seed():
    a = synth_dataset(3, 2, 5, 8, 0.4, 0.3, seed=9)
    b = synth_dataset(3, 2, 5, 8, 0.4, 0.3, seed=9)
    assert all(x.train.tobytes() == y.train.tobytes() and x.test.tobytes() == y.test.tobytes()
               for x, y in zip(a, b))


def test_zero_shift_leaves_domains_identically_distributed():
    assert np.array_equal(_domain_rotation(make_rng(0, 2, 0), 6, 0.0), np.eye(6))
    # same prototypes and per-cell noise streams; domains differ only in the noise draw
    cells = index_cells(synth_dataset(2, 3, 6, 400, 0.0, 0.1, seed=4))
    means = [np.vstack([cells[(0, d)].train, cells[(0, d)].test]).mean(axis=0) for d in range(3)]
    assert max(np.abs(m - means[0]).max() for m in means) < 0.05


@given(st.integers(2, 7), st.floats(0.0, 1.0), st.integers(0, 1000))
def test_domain_rotation_is_special_orthogonal(dim, strength, seed):
    r = _domain_rotation(make_rng(seed, 2, 0), dim, strength)
    assert np.allclose(r @ r.T, np.eye(dim), atol=1e-9)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)


def test_task_data_stacks_cells_and_reports_gaps():
    cells = synth_dataset(4, 2, 3, 8, 0.5, 0.5, seed=0)
    X, y = task_data(cells, TaskSpec(0, 1, (0, 2)))
    assert X.shape == (12, 3) and sorted(set(y.tolist())) == [0, 2]
    X, y = task_data(cells, TaskSpec(0, ALL_DOMAINS, (1,)), "test")
    assert X.shape == (4, 3) and set(y.tolist()) == {1}
    partial = [c for c in cells if (c.class_id, c.domain_id) != (2, 1)]
    with pytest.raises(DataCoverageError):
        task_data(partial, TaskSpec(0, 1, (0, 2)))


def test_csv_empty_and_single_cell(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert load_csv(empty, 2) == []
    one = tmp_path / "one.csv"
    one.write_text("class_id,domain_id,split,f0,f1\n0,1,train,0.5,1.5\n0,1,test,2,3\n")
    (cell,) = load_csv(one, 2)
    assert (cell.class_id, cell.domain_id) == (0, 1)
    assert cell.train.tolist() == [[0.5, 1.5]] and cell.test.tolist() == [[2.0, 3.0]]


def test_csv_errors_carry_line_numbers(tmp_path):
    short = tmp_path / "short.csv"
    short.write_text("0,0,train,1,2\n0,0,train,1\n")
    with pytest.raises(DimMismatch, match="line 2"):
        load_csv(short, 2)
    bad = tmp_path / "bad.csv"
    bad.write_text("0,0,train,1,2\n1,0,valid,1,2\n")
    with pytest.raises(ParseError) as exc:
        load_csv(bad, 2)
    assert exc.value.line == 2


@given(st.integers(0, 500), st.integers(0, 500))
def test_vil_seeds_permute_the_same_cells(a, b):
    sa = generate_stream("vil", 6, 3, 2, seed=a)
    sb = generate_stream("vil", 6, 3, 2, seed=b)
    cells = lambda s: sorted((t.class_ids, t.domain_id) for t in s)
    assert cells(sa) == cells(sb) == sorted((g, d) for g in [(0, 1), (2, 3), (4, 5)] for d in range(3))
