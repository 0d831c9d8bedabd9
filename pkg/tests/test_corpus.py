import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from iclsynth.corpus import (FAMILIES, INFERENCE_CONTEXT_RATIO, ManifestError, SplitSpec, TaskSampler, TaskSpec,
                             cap_query, desk_manifest, dump_manifest, expand_corpus, fresh_draw, generate_dataset,
                             parse_manifest, permutation_variants, read_corpus, split_context_query,
                             split_indices, subsample_training, write_corpus)
from iclsynth.encdec import CATEGORICAL, Column, NUMERIC, Table, TableSchema
from iclsynth.ndnum import ContractError


def _canonical(t: Table) -> np.ndarray:
    order = np.argsort(t.schema.names)
    v = t.values[:, order]
    return v[np.lexsort(v.T[::-1])]


def test_spec_bounds():
    with pytest.raises(ContractError):
        TaskSpec("gaussian_mixture", 49, 3, 0)
    with pytest.raises(ContractError):
        TaskSpec("gaussian_mixture", 100, 51, 0)
    with pytest.raises(ContractError):
        TaskSpec("nope", 100, 3, 0)


@pytest.mark.parametrize("family", FAMILIES)
def test_generate_deterministic_and_filtered(family):
    spec = TaskSpec(family, 80, 5, 7)
    a, b = generate_dataset(spec), generate_dataset(spec)
    assert np.array_equal(a.values, b.values) and a.schema == b.schema
    assert 50 <= a.n_rows and len(a.schema) <= 50
    assert a.schema.names == TaskSampler(spec).schema.names


def test_gaussian_single_component_mean():
    means = [[1.0, -2.0, 0.5]]
    spec = TaskSpec("gaussian_mixture", 500, 3, 3, {"n_components": 1, "identity": True, "means": means})
    t = generate_dataset(spec)
    assert np.all(np.abs(t.values.mean(0) - means[0]) < 3 / np.sqrt(500))


def test_categorical_frequency():
    spec = TaskSpec("categorical_mixture", 1000, 2, 4, {"n_numeric": 1, "probabilities": [[0.7, 0.3]]})
    t = generate_dataset(spec)
    assert abs(np.mean(t.values[:, 1] == 0) - 0.7) < 0.05


def test_fresh_draw_is_independent_of_dataset():
    spec = TaskSpec("linear_regression", 100, 4, 1)
    assert not np.array_equal(fresh_draw(spec, 100, 0).values, generate_dataset(spec).values)
    assert np.array_equal(fresh_draw(spec, 50, 3).values, fresh_draw(spec, 50, 3).values)


def test_permutation_variants():
    t = generate_dataset(TaskSpec("categorical_mixture", 60, 5, 2))
    vs = permutation_variants(t, 5, seed=1)
    assert len(vs) == 5
    ti = t.schema.target_index
    for v in vs:
        assert v.schema.target_index == ti and v.schema.target == t.schema.target
        assert np.array_equal(_canonical(v), _canonical(t))
    assert permutation_variants(t, 1, permute=False)[0] is t
    with pytest.raises(ContractError):
        permutation_variants(t, 0)


@given(st.integers(0, 10_000))
def test_permutation_preserves_row_target_pairing(seed):
    t = generate_dataset(TaskSpec("gaussian_mixture", 50, 4, 5))
    for v in permutation_variants(t, 2, seed):
        idx = {n: j for j, n in enumerate(v.schema.names)}
        back = v.values[:, [idx[n] for n in t.schema.names]]
        assert np.array_equal(_canonical(Table(t.schema, back)), _canonical(t))


def test_variant_count_for_full_corpus():
    schema = TableSchema((Column("a", NUMERIC), Column("t", NUMERIC, target=True)))
    tables = [Table(schema, np.arange(4.0).reshape(2, 2) + i) for i in range(826)]
    assert sum(len(permutation_variants(t, 5, seed=i)) for i, t in enumerate(tables)) == 4130


def test_split_context_query():
    t = generate_dataset(TaskSpec("two_moons_like", 50, 4, 0))
    ctx_idx, qry_idx = split_indices(10, 0.3, np.random.default_rng(0))
    assert len(ctx_idx) == 3 and len(qry_idx) == 7
    assert set(ctx_idx) | set(qry_idx) == set(range(10)) and not set(ctx_idx) & set(qry_idx)
    ctx, qry = split_context_query(t, SplitSpec(INFERENCE_CONTEXT_RATIO, 4))
    assert ctx.n_rows == 15 and qry.n_rows == 35
    assert INFERENCE_CONTEXT_RATIO == 0.3
    for bad in (0.01, 1.0):
        with pytest.raises(ContractError):
            split_indices(10, bad, np.random.default_rng(0))


@given(st.integers(2, 400), st.floats(0.05, 0.95), st.integers(0, 99))
def test_split_is_partition(n, r, seed):
    m = int(np.floor(r * n))
    if m < 1 or m == n:
        return
    a, b = split_indices(n, r, np.random.default_rng(seed))
    assert len(a) == m and np.array_equal(np.sort(np.r_[a, b]), np.arange(n))


def test_cap_query():
    small = np.arange(50)
    assert cap_query(small, 128) is small
    big = np.arange(300) * 2
    c = cap_query(big, 128, seed=1)
    assert len(c) == 128 and len(set(c)) == 128 and set(c) <= set(big)
    assert np.array_equal(c, cap_query(big, 128, seed=1))


def test_subsample_training():
    schema = TableSchema((Column("a", NUMERIC), Column("t", NUMERIC, target=True)))
    t = Table(schema, np.random.default_rng(0).normal(size=(2088, 2)))
    assert subsample_training(t, 1.0) is t
    assert subsample_training(t, 0.2, seed=3).n_rows == 417
    assert np.array_equal(subsample_training(t, 0.4, 3).values, subsample_training(t, 0.4, 3).values)


def test_manifest_round_trip_and_errors():
    specs = desk_manifest(8, seed=1)
    assert parse_manifest(dump_manifest(specs)) == specs
    with pytest.raises(ManifestError, match="line 2"):
        parse_manifest('[\n  {"family": }\n]')
    with pytest.raises(ManifestError, match="task #0"):
        parse_manifest(json.dumps([{"family": "gaussian_mixture", "n_rows": 10, "n_features": 3, "seed": 0}]))
    dup = [specs[0].to_dict(), specs[0].to_dict()]
    with pytest.raises(ManifestError):
        parse_manifest(json.dumps(dup))


def test_write_corpus_byte_identical(tmp_path):
    specs = desk_manifest(3, seed=2)
    p1 = write_corpus(specs, tmp_path / "a")
    p2 = write_corpus(specs, tmp_path / "b")
    assert len(p1) == 15
    for a, b in zip(p1, p2):
        assert a.read_bytes() == b.read_bytes()
    assert [i for i, _ in read_corpus(tmp_path / "a")] == [i for i, _ in expand_corpus(specs)]
    flat = write_corpus(specs, tmp_path / "n", k=1, permute=False)
    assert len(flat) == 3
    assert np.array_equal(read_corpus(tmp_path / "n")[0][1].values, generate_dataset(specs[0]).values)
