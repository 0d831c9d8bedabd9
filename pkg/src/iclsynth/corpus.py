"""Procedural pretraining corpora: task families with ground-truth samplers,
row/column permutation variants, and context/query splitting."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encdec import CATEGORICAL, NUMERIC, Column, Table, TableSchema, read_table, write_table
from .ndnum import ContractError

FAMILIES = ("gaussian_mixture", "linear_regression", "categorical_mixture", "two_moons_like")
MIN_ROWS, MAX_ROWS = 50, 2000
MIN_FEATURES, MAX_FEATURES = 2, 50
DEFAULT_VARIANTS = 5
INFERENCE_CONTEXT_RATIO = 0.3
PRETRAIN_RATIO_RANGE = (0.2, 0.5)
QUERY_CAP = 128


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    family: str
    n_rows: int
    n_features: int
    seed: int
    params: dict = field(default_factory=dict)
    task_id: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown task family {self.family!r}")
        if not MIN_ROWS <= self.n_rows <= MAX_ROWS:
            raise ContractError(f"n_rows {self.n_rows} outside [{MIN_ROWS}, {MAX_ROWS}]")
        if not MIN_FEATURES <= self.n_features <= MAX_FEATURES:
            raise ContractError(f"n_features {self.n_features} outside [{MIN_FEATURES}, {MAX_FEATURES}]")

    @property
    def id(self) -> str:
        return self.task_id or f"{self.family}-{self.seed}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(d["family"], int(d["n_rows"]), int(d["n_features"]), int(d["seed"]),
                   dict(d.get("params", {})), d.get("task_id"))


@dataclass(frozen=True)
class SplitSpec:
    context_ratio: float
    seed: int = 0


# ------------------------------------------------------------------ samplers

class TaskSampler:
    """Ground-truth distribution of one task; ``draw`` yields fresh i.i.d. rows."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        p = spec.params
        F = spec.n_features
        fam = spec.family
        if fam == "gaussian_mixture":
            k = int(p.get("n_components", rng.integers(2, 4)))
            n_num = F - 1 if k >= 2 else F
            spread = float(p.get("spread", 3.0))
            self.means = rng.normal(0.0, spread, (k, n_num)) if "means" not in p else np.asarray(p["means"], float)
            if p.get("identity", False):
                self.stds = np.ones((k, n_num))
            else:
                self.stds = rng.uniform(0.5, 1.5, (k, n_num)) * float(p.get("scale", 1.0))
            self.weights = np.asarray(p["weights"], float) if "weights" in p else rng.dirichlet(np.full(k, 4.0))
            cols = [Column(f"x{i}", NUMERIC) for i in range(n_num)]
            if k >= 2:
                cols.append(Column("component", CATEGORICAL, tuple(f"c{i}" for i in range(k)), True))
            else:
                cols[-1] = Column(cols[-1].name, NUMERIC, target=True)
        elif fam == "linear_regression":
            n_x = F - 1
            mix = rng.normal(0.0, 1.0, (n_x, n_x)) / np.sqrt(n_x)
            self.mix = np.eye(n_x) * 0.7 + 0.5 * mix
            self.coef = rng.normal(0.0, 1.0, n_x)
            self.noise = float(p.get("noise", rng.uniform(0.1, 1.0)))
            cols = [Column(f"x{i}", NUMERIC) for i in range(n_x)] + [Column("y", NUMERIC, target=True)]
        elif fam == "categorical_mixture":
            n_num = int(p.get("n_numeric", F // 2))
            n_cat = F - n_num
            if n_cat < 1:
                raise ContractError("categorical_mixture needs at least one categorical column")
            if "probabilities" in p:
                probs = [np.asarray(q, float) for q in p["probabilities"]]
                k = 1
                self.cat_probs = [pr[None, :] for pr in probs]
            else:
                k = int(p.get("n_components", rng.integers(2, 4)))
                counts = p.get("n_categories", [int(c) for c in rng.integers(2, 5, n_cat)])
                counts = [int(counts)] * n_cat if np.isscalar(counts) else list(counts)
                self.cat_probs = [rng.dirichlet(np.full(c, 0.7), size=k) for c in counts]
            self.weights = rng.dirichlet(np.full(k, 4.0)) if k > 1 else np.ones(1)
            self.num_means = rng.normal(0.0, 2.0, (k, n_num))
            cols = [Column(f"x{i}", NUMERIC) for i in range(n_num)]
            cols += [Column(f"cat{i}", CATEGORICAL, tuple(f"v{j}" for j in range(pr.shape[1])),
                            target=(i == n_cat - 1)) for i, pr in enumerate(self.cat_probs)]
        else:  # two_moons_like
            if F < 3:
                raise ContractError("two_moons_like needs at least 3 columns")
            self.noise = float(p.get("noise", rng.uniform(0.05, 0.25)))
            self.n_extra = F - 3
            cols = [Column(f"x{i}", NUMERIC) for i in range(F - 1)]
            cols.append(Column("moon", CATEGORICAL, ("a", "b"), True))
        self.schema = TableSchema(tuple(cols))

    def draw(self, n: int, rng: np.random.Generator) -> Table:
        fam = self.spec.family
        if fam == "gaussian_mixture":
            comp = rng.choice(len(self.weights), size=n, p=self.weights)
            x = self.means[comp] + self.stds[comp] * rng.standard_normal(self.means[comp].shape)
            vals = np.c_[x, comp] if len(self.weights) >= 2 else x
        elif fam == "linear_regression":
            x = rng.standard_normal((n, len(self.coef))) @ self.mix.T
            y = x @ self.coef + self.noise * rng.standard_normal(n)
            vals = np.c_[x, y]
        elif fam == "categorical_mixture":
            comp = rng.choice(len(self.weights), size=n, p=self.weights)
            num = self.num_means[comp] + rng.standard_normal((n, self.num_means.shape[1]))
            cats = []
            for pr in self.cat_probs:
                cum = np.cumsum(pr[comp], axis=1)
                u = rng.random((n, 1))
                cats.append(np.minimum((u > cum).sum(axis=1), pr.shape[1] - 1))
            vals = np.c_[num, np.stack(cats, axis=1)] if cats else num
        else:
            label = rng.integers(0, 2, n)
            t = rng.uniform(0.0, np.pi, n)
            x1 = np.where(label == 0, np.cos(t), 1.0 - np.cos(t))
            x2 = np.where(label == 0, np.sin(t), 0.5 - np.sin(t))
            pts = np.c_[x1, x2] + self.noise * rng.standard_normal((n, 2))
            vals = np.c_[pts, rng.standard_normal((n, self.n_extra)), label]
        return Table(self.schema, vals)


def generate_dataset(spec: TaskSpec) -> Table:
    return TaskSampler(spec).draw(spec.n_rows, np.random.default_rng([spec.seed, 1]))


def fresh_draw(spec: TaskSpec, n: int, seed: int) -> Table:
    """Rows from the task's ground-truth distribution, independent of the dataset itself."""
    return TaskSampler(spec).draw(n, np.random.default_rng([spec.seed, 2, seed]))


# ------------------------------------------------------------------ permutations / splits

def permute_table(table: Table, row_perm: np.ndarray, col_perm: np.ndarray) -> Table:
    cols = tuple(table.schema.columns[j] for j in col_perm)
    return Table(TableSchema(cols), table.values[np.asarray(row_perm)][:, np.asarray(col_perm)])


def permutation_variants(table: Table, k: int = DEFAULT_VARIANTS, seed: int = 0,
                         permute: bool = True) -> list[Table]:
    """k row/column-permuted copies; the target column keeps its position."""
    if k < 1:
        raise ContractError("need at least one variant")
    if not permute:
        return [table for _ in range(k)]
    rng = np.random.default_rng(seed)
    t = table.schema.target_index
    others = np.array([j for j in range(len(table.schema)) if j != t])
    out = []
    for _ in range(k):
        rows = rng.permutation(table.n_rows)
        col_perm = np.arange(len(table.schema))
        col_perm[others] = others[rng.permutation(len(others))]
        out.append(permute_table(table, rows, col_perm))
    return out


def split_indices(n: int, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    m_ctx = int(np.floor(ratio * n))
    if m_ctx < 1 or n - m_ctx < 1:
        raise ContractError(f"context ratio {ratio} on {n} rows leaves an empty side")
    order = rng.permutation(n)
    return order[:m_ctx], order[m_ctx:]


def split_context_query(table: Table, split: SplitSpec) -> tuple[Table, Table]:
    ctx, qry = split_indices(table.n_rows, split.context_ratio, np.random.default_rng(split.seed))
    return table.take(ctx), table.take(qry)


def cap_indices(m: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    if cap < 1:
        raise ContractError("cap must be >= 1")
    return np.arange(m) if m <= cap else rng.choice(m, size=cap, replace=False)


def cap_query(qry, cap: int = QUERY_CAP, seed: int = 0):
    """Uniform subsample without replacement down to ``cap`` rows (Table or array)."""
    m = qry.n_rows if isinstance(qry, Table) else len(qry)
    if m <= cap:
        return qry
    idx = cap_indices(m, cap, np.random.default_rng(seed))
    return qry.take(idx) if isinstance(qry, Table) else qry[idx]


def subsample_training(table: Table, ratio: float, seed: int = 0) -> Table:
    n = int(np.floor(ratio * table.n_rows))
    if n < 2:
        raise ContractError(f"subsample ratio {ratio} leaves fewer than 2 rows")
    if n == table.n_rows:
        return table
    idx = np.random.default_rng(seed).choice(table.n_rows, size=n, replace=False)
    return table.take(np.sort(idx))


# ------------------------------------------------------------------ manifests

def desk_manifest(n_tasks: int = 200, seed: int = 0, rows: tuple[int, int] = (60, 240),
                  features: tuple[int, int] = (3, 7), families: Sequence[str] = FAMILIES) -> list[TaskSpec]:
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_tasks):
        fam = families[i % len(families)]
        specs.append(TaskSpec(fam, int(rng.integers(rows[0], rows[1] + 1)),
                              int(rng.integers(features[0], features[1] + 1)),
                              int(rng.integers(0, 2 ** 31)), task_id=f"task{seed}-{i:04d}"))
    return specs


def dump_manifest(specs: Iterable[TaskSpec]) -> str:
    return json.dumps([s.to_dict() for s in specs], indent=2)


def parse_manifest(text: str) -> list[TaskSpec]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    if isinstance(raw, dict):
        raw = raw.get("tasks")
    if not isinstance(raw, list):
        raise ManifestError("manifest must be a JSON list of task specs")
    specs = []
    for i, entry in enumerate(raw):
        try:
            specs.append(TaskSpec.from_dict(entry))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"task #{i}: {exc}") from exc
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise ManifestError("task ids in manifest are not unique")
    return specs


def expand_corpus(specs: Sequence[TaskSpec], k: int = DEFAULT_VARIANTS,
                  permute: bool = True) -> list[tuple[str, Table]]:
    """All (dataset id, table) pairs of a corpus, in manifest order."""
    out = []
    for spec in specs:
        base = generate_dataset(spec)
        for v, table in enumerate(permutation_variants(base, k, seed=spec.seed + 1, permute=permute)):
            out.append((f"{spec.id}/v{v}", table))
    return out


def write_corpus(specs: Sequence[TaskSpec], out_dir: str | Path, k: int = DEFAULT_VARIANTS,
                 permute: bool = True) -> list[Path]:
    """Materialise ``{out_dir}/{task_id}/v{n}.csv`` plus schema sidecars and the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for ds_id, table in expand_corpus(specs, k, permute):
        task_id, variant = ds_id.split("/")
        (out_dir / task_id).mkdir(exist_ok=True)
        path = out_dir / task_id / f"{variant}.csv"
        write_table(table, path)
        paths.append(path)
    (out_dir / "manifest.json").write_text(dump_manifest(specs))
    return paths


def read_corpus(corpus_dir: str | Path) -> list[tuple[str, Table]]:
    corpus_dir = Path(corpus_dir)
    out = []
    for path in sorted(corpus_dir.glob("*/*.csv")):
        out.append((f"{path.parent.name}/{path.stem}", read_table(path)))
    if not out:
        raise ManifestError(f"no datasets found under {corpus_dir}")
    return out
