"""Tables, the latent encoder and the per-feature decoders.

The encoder is pluggable. The default one is a deterministic seeded embedder:
a numeric cell with standardised value v in column f becomes v*u_f + b_f and a
categorical cell with category c becomes the codebook vector e_{f,c}. Every
vector has unit Euclidean norm and is drawn from a PRNG keyed by
(seed, column index, role), so equal keys give equal vectors in any dataset.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import ndnum as nd
from .ndnum import ContractError, ParamStore, Tensor

NUMERIC = "numeric"
CATEGORICAL = "categorical"

_ROLE_SLOPE, _ROLE_OFFSET, _ROLE_CODE = 0, 1, 2


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, column: str, message: str):
        super().__init__(f"decoder for column {column!r} diverged: {message}")
        self.column = column


# ------------------------------------------------------------------ tables

@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    categories: tuple = ()
    target: bool = False

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == CATEGORICAL:
            d["categories"] = list(self.categories)
        if self.target:
            d["target"] = True
        return d


@dataclass(frozen=True)
class TableSchema:
    columns: tuple

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column names in {names}")
        if sum(c.target for c in self.columns) != 1:
            raise SchemaError("schema needs exactly one target column")
        for c in self.columns:
            if c.kind not in (NUMERIC, CATEGORICAL):
                raise SchemaError(f"column {c.name!r}: unknown kind {c.kind!r}")
            if c.kind == CATEGORICAL and len(c.categories) < 2:
                raise SchemaError(f"categorical column {c.name!r} needs at least 2 categories")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def target_index(self) -> int:
        return next(i for i, c in enumerate(self.columns) if c.target)

    @property
    def target(self) -> Column:
        return self.columns[self.target_index]

    def __len__(self):
        return len(self.columns)

    def to_dict(self) -> dict:
        return {"columns": [c.to_dict() for c in self.columns]}

    @classmethod
    def from_dict(cls, d: dict) -> "TableSchema":
        try:
            cols = tuple(Column(c["name"], c["kind"], tuple(c.get("categories", ())), bool(c.get("target", False)))
                         for c in d["columns"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc
        return cls(cols)


@dataclass
class Table:
    """Typed table. ``values`` is (N, F) float: numeric cells hold the value,
    categorical cells hold the category index."""
    schema: TableSchema
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.schema):
            raise SchemaError(f"values shape {self.values.shape} does not fit {len(self.schema)} columns")
        if not np.all(np.isfinite(self.values)):
            raise DataError("missing or non-finite cells are not supported")
        for j, c in enumerate(self.schema.columns):
            if c.kind == CATEGORICAL:
                col = self.values[:, j]
                if np.any((col < 0) | (col >= len(c.categories)) | (col != np.round(col))):
                    raise DataError(f"column {c.name!r}: category index out of range")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def __len__(self):
        return self.n_rows

    def take(self, rows) -> "Table":
        return Table(self.schema, self.values[np.asarray(rows, dtype=int)])

    def features_target(self) -> tuple[np.ndarray, np.ndarray]:
        t = self.schema.target_index
        return np.delete(self.values, t, axis=1), self.values[:, t]

    @classmethod
    def concat(cls, tables: Sequence["Table"]) -> "Table":
        schema = tables[0].schema
        for t in tables[1:]:
            if t.schema != schema:
                raise SchemaError("cannot concatenate tables with different schemas")
        return cls(schema, np.concatenate([t.values for t in tables], axis=0)) if tables else None

    @classmethod
    def empty(cls, schema: TableSchema) -> "Table":
        t = cls.__new__(cls)
        t.schema, t.values = schema, np.zeros((0, len(schema)))
        return t


def table_to_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.schema.names)
    cols = table.schema.columns
    for row in table.values:
        w.writerow([c.categories[int(v)] if c.kind == CATEGORICAL else repr(float(v))
                    for c, v in zip(cols, row)])
    return buf.getvalue()


def table_from_csv(text: str, schema: TableSchema) -> Table:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty CSV") from None
    if header != schema.names:
        raise SchemaError(f"CSV header {header} does not match schema {schema.names}")
    lookups = [{lab: i for i, lab in enumerate(c.categories)} if c.kind == CATEGORICAL else None
               for c in schema.columns]
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if len(rec) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} cells, got {len(rec)}")
        row = []
        for c, lut, cell in zip(schema.columns, lookups, rec):
            if cell == "":
                raise DataError(f"line {lineno}: missing value in column {c.name!r}")
            if lut is None:
                try:
                    row.append(float(cell))
                except ValueError:
                    raise DataError(f"line {lineno}: {cell!r} is not a number ({c.name!r})") from None
            else:
                if cell not in lut:
                    raise DataError(f"line {lineno}: {cell!r} not a category of {c.name!r}")
                row.append(lut[cell])
        rows.append(row)
    if not rows:
        return Table.empty(schema)
    return Table(schema, np.array(rows))


def write_table(table: Table, csv_path: str | Path, schema_path: str | Path | None = None) -> None:
    csv_path = Path(csv_path)
    csv_path.write_text(table_to_csv(table))
    schema_path = Path(schema_path) if schema_path else schema_path_for(csv_path)
    schema_path.write_text(json.dumps(table.schema.to_dict(), indent=2))


def read_table(csv_path: str | Path, schema_path: str | Path | None = None) -> Table:
    csv_path = Path(csv_path)
    schema_path = Path(schema_path) if schema_path else schema_path_for(csv_path)
    schema = TableSchema.from_dict(json.loads(schema_path.read_text()))
    return table_from_csv(csv_path.read_text(), schema)


def schema_path_for(csv_path: Path) -> Path:
    return csv_path.with_name(csv_path.stem + ".schema.json")


# ------------------------------------------------------------------ stats

@dataclass
class ColumnStats:
    means: np.ndarray
    stds: np.ndarray
    frequencies: dict[int, np.ndarray] = field(default_factory=dict)

    def standardize(self, values: np.ndarray, schema: TableSchema) -> np.ndarray:
        out = values.astype(np.float64, copy=True)
        num = [j for j, c in enumerate(schema.columns) if c.kind == NUMERIC]
        out[:, num] = (out[:, num] - self.means[num]) / self.stds[num]
        return out


def fit_stats(table: Table) -> ColumnStats:
    """Population mean/std per numeric column, frequency table per categorical one."""
    if table.n_rows < 1:
        raise DataError("cannot fit statistics on an empty table")
    F = len(table.schema)
    means, stds = np.zeros(F), np.ones(F)
    freqs = {}
    for j, c in enumerate(table.schema.columns):
        col = table.values[:, j]
        if c.kind == NUMERIC:
            means[j] = col.mean()
            stds[j] = col.std()
            if not stds[j] > 0:
                raise DataError(f"numeric column {c.name!r} is constant")
        else:
            freqs[j] = np.bincount(col.astype(int), minlength=len(c.categories)) / len(col)
    return ColumnStats(means, stds, freqs)


# ------------------------------------------------------------------ encoder

class Encoder(Protocol):
    def __call__(self, ctx: Table, qry: Table, stats: ColumnStats, seed: int, d: int) -> tuple[np.ndarray, np.ndarray]: ...


def _unit_vector(seed: int, column: int, role: int, extra: int = 0, d: int = 32) -> np.ndarray:
    """Seeded vector with i.i.d. N(0, 1) entries (unit scale per coordinate), so
    latent coordinates sit on the same scale the noise schedule assumes."""
    return np.random.default_rng([seed, column, role, extra]).standard_normal(d)


def encode_table(table: Table, stats: ColumnStats, seed: int, d: int) -> np.ndarray:
    """(N, F, d) latents of every row; a pure function of cells, stats, seed and d."""
    std = stats.standardize(table.values, table.schema)
    out = np.empty((table.n_rows, len(table.schema), d))
    for j, c in enumerate(table.schema.columns):
        if c.kind == NUMERIC:
            u = _unit_vector(seed, j, _ROLE_SLOPE, d=d)
            b = _unit_vector(seed, j, _ROLE_OFFSET, d=d)
            out[:, j, :] = std[:, j:j + 1] * u + b
        else:
            book = codebook(seed, j, len(c.categories), d)
            out[:, j, :] = book[std[:, j].astype(int)]
    return out


def codebook(seed: int, column: int, n_categories: int, d: int) -> np.ndarray:
    return np.stack([_unit_vector(seed, column, _ROLE_CODE, k, d) for k in range(n_categories)])


def numeric_axes(seed: int, column: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    return _unit_vector(seed, column, _ROLE_SLOPE, d=d), _unit_vector(seed, column, _ROLE_OFFSET, d=d)


def encode(ctx: Table, qry: Table, stats: ColumnStats, seed: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    if ctx.schema != qry.schema:
        raise SchemaError("context and query tables have different schemas")
    return encode_table(ctx, stats, seed, d), encode_table(qry, stats, seed, d)


# ------------------------------------------------------------------ decoders

@dataclass(frozen=True)
class DecoderConfig:
    hidden: int = 256
    epochs: int = 100
    lr: float = 1e-3
    dropout: float = 0.1
    batch_size: int = 64
    seed: int = 0


PAPER_DECODER = DecoderConfig(hidden=768, lr=2e-5)
DESK_DECODER = DecoderConfig()


@dataclass
class FeatureDecoder:
    column: int
    kind: str
    out_dim: int
    params: ParamStore
    dropout: float = 0.1

    def apply(self, z: np.ndarray | Tensor, training: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
        p = self.params
        x = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=p.flat.dtype))
        # latent entries are O(1) per coordinate; 1/sqrt(d) keeps the first layer's
        # pre-activations O(1) regardless of d
        x = x * (1.0 / np.sqrt(x.shape[-1]))
        h = nd.dropout(nd.relu(nd.linear(x, p["w1"], p["b1"])), self.dropout, rng, training)
        h = nd.dropout(nd.relu(nd.linear(h, p["w2"], p["b2"])), self.dropout, rng, training)
        return nd.linear(h, p["w3"], p["b3"])

    def predict(self, z: np.ndarray) -> np.ndarray:
        with nd.no_grad():
            return self.apply(z, training=False).data


def init_decoder(column: int, kind: str, out_dim: int, d: int, hidden: int,
                 rng: np.random.Generator, dropout: float = 0.1) -> FeatureDecoder:
    def he(n_in, n_out):
        return rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out))

    arrays = {
        "w1": he(d, hidden), "b1": np.zeros(hidden),
        "w2": he(hidden, hidden), "b2": np.zeros(hidden),
        "w3": rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, out_dim)), "b3": np.zeros(out_dim),
    }
    return FeatureDecoder(column, kind, out_dim, ParamStore.from_arrays(arrays, dtype=np.float64), dropout)


def decoder_loss(dec: FeatureDecoder, z, target: np.ndarray, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    out = dec.apply(z, training, rng)
    if dec.kind == NUMERIC:
        return nd.mse(nd.reshape(out, (out.shape[0],)), target)
    return nd.cross_entropy(out, target.astype(int))


@dataclass
class DecoderFit:
    decoders: list[FeatureDecoder]
    losses: list[float]


def train_decoders(z_qry: np.ndarray, qry: Table, stats: ColumnStats,
                   config: DecoderConfig = DESK_DECODER) -> DecoderFit:
    """One MLP per column (target included), each fitted on its own latent slice
    of the query set with Adam. Numeric targets are standardised values."""
    m, F, d = z_qry.shape
    if m < 2:
        raise ContractError("decoder training needs at least 2 query rows")
    if F != len(qry.schema) or m != qry.n_rows:
        raise SchemaError(f"latents {z_qry.shape} do not match query table {qry.values.shape}")
    std = stats.standardize(qry.values, qry.schema)
    seeds = np.random.SeedSequence(config.seed).spawn(F)
    decoders, losses = [], []
    for j, c in enumerate(qry.schema.columns):
        rng = np.random.default_rng(seeds[j])
        out_dim = 1 if c.kind == NUMERIC else len(c.categories)
        dec = init_decoder(j, c.kind, out_dim, d, config.hidden, rng, config.dropout)
        z, y = z_qry[:, j, :], std[:, j]
        state = nd.AdamState.zeros_like([dec.params.flat])
        bs = min(config.batch_size, m)
        total = config.epochs * -(-m // bs)
        step = 0
        for _ in range(config.epochs):
            order = rng.permutation(m)
            for start in range(0, m, bs):
                idx = order[start:start + bs]
                loss = decoder_loss(dec, z[idx], y[idx], training=True, rng=rng)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(c.name, f"loss {loss.item()}")
                lr = config.lr * 0.5 * (1.0 + np.cos(np.pi * step / total))
                nd.adam_step([dec.params.flat], [dec.params.flat_grad(loss)], state, lr)
                step += 1
        with nd.no_grad():
            final = decoder_loss(dec, z, y).item()
        if not np.isfinite(final):
            raise DivergenceError(c.name, f"loss {final}")
        decoders.append(dec)
        losses.append(final)
    return DecoderFit(decoders, losses)


def decode(z0: np.ndarray, decoders: Sequence[FeatureDecoder], stats: ColumnStats,
           schema: TableSchema) -> Table:
    """Map generated latents back to a table; categorical argmax ties go to the lowest index."""
    if z0.ndim != 3 or z0.shape[1] != len(schema):
        raise SchemaError(f"latents {z0.shape} do not match {len(schema)} columns")
    if len(decoders) != len(schema):
        raise SchemaError("need one decoder per column")
    k = z0.shape[0]
    if k == 0:
        return Table.empty(schema)
    values = np.empty((k, len(schema)))
    for j, (c, dec) in enumerate(zip(schema.columns, decoders)):
        out = dec.predict(z0[:, j, :])
        if c.kind == NUMERIC:
            values[:, j] = out[:, 0] * stats.stds[j] + stats.means[j]
        else:
            values[:, j] = np.argmax(out, axis=1)
    return Table(schema, values)
