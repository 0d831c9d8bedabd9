import numpy as np
import pytest
from hypothesis import given, strategies as st

from iclsynth.encdec import (CATEGORICAL, NUMERIC, Column, DataError, DecoderConfig, DivergenceError,
                             FeatureDecoder, SchemaError, Table, TableSchema, codebook, decode, encode,
                             encode_table, fit_stats, init_decoder, numeric_axes, read_table, table_from_csv,
                             table_to_csv, train_decoders, write_table)
from iclsynth.ndnum import ParamStore

SCHEMA = TableSchema((Column("x", NUMERIC), Column("c", CATEGORICAL, ("a", "b", "z")),
                      Column("y", NUMERIC, target=True)))


def _table(n=40, seed=0):
    r = np.random.default_rng(seed)
    return Table(SCHEMA, np.c_[r.normal(2, 3, n), r.integers(0, 3, n), r.normal(size=n)])


# ------------------------------------------------------------------ schema / tables

def test_schema_validation():
    with pytest.raises(SchemaError):
        TableSchema((Column("a", NUMERIC), Column("a", NUMERIC, target=True)))
    with pytest.raises(SchemaError):
        TableSchema((Column("a", NUMERIC), Column("b", NUMERIC)))
    with pytest.raises(SchemaError):
        TableSchema((Column("a", CATEGORICAL, ("only",), True),))
    assert TableSchema.from_dict(SCHEMA.to_dict()) == SCHEMA


def test_table_rejects_bad_cells():
    with pytest.raises(DataError):
        Table(SCHEMA, [[1.0, 5, 0.0]])
    with pytest.raises(DataError):
        Table(SCHEMA, [[np.nan, 0, 0.0]])


def test_csv_round_trip(tmp_path):
    t = _table()
    assert np.array_equal(table_from_csv(table_to_csv(t), SCHEMA).values, t.values)
    write_table(t, tmp_path / "t.csv")
    assert (tmp_path / "t.schema.json").exists()
    back = read_table(tmp_path / "t.csv")
    assert back.schema == SCHEMA and np.array_equal(back.values, t.values)


def test_csv_errors_carry_line_numbers():
    with pytest.raises(DataError, match="line 3"):
        table_from_csv("x,c,y\n1.0,a,2\n1.0,q,2\n", SCHEMA)
    with pytest.raises(SchemaError):
        table_from_csv("x,c\n1.0,a\n", SCHEMA)


# ------------------------------------------------------------------ stats

def test_fit_stats_examples():
    schema = TableSchema((Column("v", NUMERIC), Column("k", CATEGORICAL, ("a", "b"), True)))
    s = fit_stats(Table(schema, [[1, 0], [2, 0], [3, 1]]))
    assert s.means[0] == 2.0 and s.stds[0] == pytest.approx(np.sqrt(2 / 3)) and s.stds[0] == pytest.approx(0.8165, abs=1e-4)
    assert np.allclose(s.frequencies[1], [2 / 3, 1 / 3])
    with pytest.raises(DataError, match="'v'"):
        fit_stats(Table(schema, [[1, 0], [1, 1]]))


# ------------------------------------------------------------------ encoder

def test_encoder_examples():
    t = _table()
    stats = fit_stats(t)
    z = encode_table(t, stats, seed=3, d=16)
    u, b = numeric_axes(3, 0, 16)
    assert z.shape == (40, 3, 16)
    # unit scale per coordinate: entries are standard normal draws
    wide = numeric_axes(3, 0, 4096)[0]
    assert abs(wide.var() - 1) < 0.1 and abs(wide.mean()) < 0.05 and not np.allclose(u, b)
    # v = 0 maps to b exactly
    zero = Table(SCHEMA, [[stats.means[0], 0, 0.0]])
    assert np.array_equal(encode_table(zero, stats, 3, 16)[0, 0], b)
    # equal cells -> identical slices; categorical rows hit the codebook
    book = codebook(3, 1, 3, 16)
    assert np.array_equal(z[:, 1], book[t.values[:, 1].astype(int)])
    # encode is keyed by (seed, column, role) only
    assert np.array_equal(encode_table(t, stats, 3, 16), z)
    assert not np.array_equal(encode_table(t, stats, 4, 16), z)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_encoder_linearity(v1, v2):
    t = _table()
    stats = fit_stats(t)
    raw = lambda v: Table(SCHEMA, [[v * stats.stds[0] + stats.means[0], 0, 0.0]])
    e1 = encode_table(raw(v1), stats, 0, 8)[0, 0]
    e2 = encode_table(raw(v2), stats, 0, 8)[0, 0]
    u, _ = numeric_axes(0, 0, 8)
    assert np.abs((e1 - e2) - (v1 - v2) * u).max() < 1e-12 * max(1.0, abs(v1), abs(v2))


def test_encode_schema_mismatch():
    t = _table()
    other = TableSchema((Column("x", NUMERIC), Column("y", NUMERIC, target=True)))
    with pytest.raises(SchemaError):
        encode(t, Table(other, [[1.0, 2.0]]), fit_stats(t), 0, 8)


def test_closed_form_inverse_is_exact():
    # oracle for the decoder examples: v = u.(z - b) / |u|^2 recovers the standardized value
    t = _table()
    stats = fit_stats(t)
    z = encode_table(t, stats, 0, 32)
    u, b = numeric_axes(0, 0, 32)
    v = (z[:, 0] - b) @ u / (u @ u)
    assert np.allclose(v, stats.standardize(t.values, SCHEMA)[:, 0], atol=1e-12)
    # nearest-codebook recovers categories
    book = codebook(0, 1, 3, 32)
    assert np.array_equal(np.argmax(z[:, 1] @ book.T, axis=1), t.values[:, 1])


# ------------------------------------------------------------------ decoders

def test_decoder_round_trip():
    t = _table(120, seed=1)
    stats = fit_stats(t)
    z = encode_table(t, stats, 0, 32)
    fit = train_decoders(z, t, stats, DecoderConfig())
    back = decode(z, fit.decoders, stats, SCHEMA)
    std_t, std_b = stats.standardize(t.values, SCHEMA), stats.standardize(back.values, SCHEMA)
    for j in (0, 2):
        assert np.mean((std_t[:, j] - std_b[:, j]) ** 2) < 1e-3
    assert np.mean(back.values[:, 1] == t.values[:, 1]) > 0.99


def test_zero_epochs_reports_init_losses():
    t = _table()
    stats = fit_stats(t)
    fit = train_decoders(encode_table(t, stats, 0, 8), t, stats, DecoderConfig(hidden=16, epochs=0))
    assert len(fit.decoders) == 3 and all(np.isfinite(fit.losses))


def test_decoder_determinism_and_context_free():
    t = _table(30)
    stats = fit_stats(t)
    z = encode_table(t, stats, 0, 8)
    cfg = DecoderConfig(hidden=16, epochs=3)
    a, b = train_decoders(z, t, stats, cfg), train_decoders(z, t, stats, cfg)
    assert a.losses == b.losses
    assert np.array_equal(decode(z, a.decoders, stats, SCHEMA).values, decode(z, b.decoders, stats, SCHEMA).values)


def test_divergence_names_column():
    t = _table(10)
    stats = fit_stats(t)
    z = encode_table(t, stats, 0, 8) * 1e300
    with pytest.raises(DivergenceError) as info:
        train_decoders(z, t, stats, DecoderConfig(hidden=8, epochs=1))
    assert info.value.column == "x"


def test_decode_empty_and_ties():
    t = _table()
    stats = fit_stats(t)
    decs = [init_decoder(j, c.kind, 1 if c.kind == NUMERIC else 3, 4, 8, np.random.default_rng(j))
            for j, c in enumerate(SCHEMA.columns)]
    empty = decode(np.zeros((0, 3, 4)), decs, stats, SCHEMA)
    assert empty.n_rows == 0 and empty.schema == SCHEMA
    # all-zero categorical decoder: every logit ties -> category 0
    zero = FeatureDecoder(1, CATEGORICAL, 3, ParamStore.from_arrays(
        {k: np.zeros_like(v.data) for k, v in decs[1].params.tensors.items()}))
    decs[1] = zero
    out = decode(np.random.default_rng(0).normal(size=(5, 3, 4)), decs, stats, SCHEMA)
    assert np.all(out.values[:, 1] == 0)
    with pytest.raises(SchemaError):
        decode(np.zeros((2, 2, 4)), decs, stats, SCHEMA)
