"""Evaluation suite: DCR-based privacy, marginal/pairwise fidelity, alpha-precision
and beta-recall, downstream utility with built-in learners, and the
aggregation helpers (z-scores, metric correlations, balanced checkpoint score)."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .encdec import CATEGORICAL, NUMERIC, SchemaError, Table, TableSchema

ALPHA_GRID = tuple(np.round(np.arange(1, 11) / 10, 1))
LEARNERS = ("boosted_stumps", "linear")


class MetricError(ValueError):
    pass


def _same_schema(*tables: Table):
    s = tables[0].schema
    for t in tables[1:]:
        if t.schema != s:
            raise SchemaError("tables do not share a schema")


# ------------------------------------------------------------------ distances

@dataclass(frozen=True)
class DistanceConfig:
    """Mixed-type row distance: |standardised difference| for numeric columns,
    0/1 mismatch for categorical ones, summed and divided by F."""
    kinds: tuple
    scales: tuple

    @classmethod
    def fit(cls, table: Table) -> "DistanceConfig":
        scales = []
        for j, c in enumerate(table.schema.columns):
            s = float(table.values[:, j].std()) if c.kind == NUMERIC else 1.0
            scales.append(s if s > 0 else 1.0)
        return cls(tuple(c.kind for c in table.schema.columns), tuple(scales))

    @classmethod
    def unit(cls, schema: TableSchema) -> "DistanceConfig":
        return cls(tuple(c.kind for c in schema.columns), (1.0,) * len(schema))


def pairwise_distances(a: np.ndarray, b: np.ndarray, dist: DistanceConfig) -> np.ndarray:
    out = np.zeros((len(a), len(b)))
    for j, (kind, scale) in enumerate(zip(dist.kinds, dist.scales)):
        if kind == NUMERIC:
            out += np.abs(a[:, j, None] - b[None, :, j]) / scale
        else:
            out += a[:, j, None] != b[None, :, j]
    return out / len(dist.kinds)


def _min_distances(a: np.ndarray, b: np.ndarray, dist: DistanceConfig, chunk: int = 512) -> np.ndarray:
    return np.concatenate([pairwise_distances(a[i:i + chunk], b, dist).min(axis=1)
                           for i in range(0, len(a), chunk)]) if len(a) else np.zeros(0)


def dcr(x: np.ndarray, table: Table, dist: DistanceConfig | None = None) -> float:
    """Distance from one row to its closest record in ``table``."""
    if table.n_rows == 0:
        raise MetricError("reference table is empty")
    x = np.asarray(x, float).reshape(1, -1)
    if x.shape[1] != len(table.schema):
        raise SchemaError(f"row has {x.shape[1]} cells, table has {len(table.schema)} columns")
    dist = dist or DistanceConfig.fit(table)
    return float(pairwise_distances(x, table.values, dist).min())


def dcr_overfit(syn: Table, train: Table, val: Table, dist: DistanceConfig | None = None) -> tuple[float, float]:
    """(p, score): p is the share of synthetic rows strictly closer to train than
    to val; score = min(1, 2(1 - p)). Distances use train-fitted scales by default."""
    _same_schema(syn, train, val)
    if min(syn.n_rows, train.n_rows, val.n_rows) == 0:
        raise MetricError("dcr_overfit needs non-empty tables")
    dist = dist or DistanceConfig.fit(train)
    d_train = _min_distances(syn.values, train.values, dist)
    d_val = _min_distances(syn.values, val.values, dist)
    p = float(np.mean(d_train < d_val))
    return p, overfit_score(p)


def overfit_score(p: float) -> float:
    return min(1.0, 2.0 * (1.0 - p))


# ------------------------------------------------------------------ shape / trend

def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov sup-distance, exact over the merged support."""
    a, b = np.sort(a), np.sort(b)
    grid = np.concatenate([a, b])
    ca = np.searchsorted(a, grid, side="right") / len(a)
    cb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(ca - cb)))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def _freq(col: np.ndarray, n_cat: int) -> np.ndarray:
    return np.bincount(col.astype(int), minlength=n_cat) / len(col)


def shape(syn: Table, real: Table) -> float:
    _same_schema(syn, real)
    if syn.n_rows == 0 or real.n_rows == 0:
        raise MetricError("shape needs non-empty tables")
    scores = []
    for j, c in enumerate(real.schema.columns):
        if c.kind == NUMERIC:
            scores.append(1.0 - ks_statistic(syn.values[:, j], real.values[:, j]))
        else:
            k = len(c.categories)
            scores.append(1.0 - total_variation(_freq(syn.values[:, j], k), _freq(real.values[:, j], k)))
    return float(np.mean(scores))


def _discretize(a: np.ndarray, b: np.ndarray, bins: int = 10) -> tuple[np.ndarray, np.ndarray, int]:
    edges = np.unique(np.quantile(np.concatenate([a, b]), np.linspace(0, 1, bins + 1)[1:-1]))
    return np.searchsorted(edges, a, side="right"), np.searchsorted(edges, b, side="right"), len(edges) + 1


def _codes(syn: Table, real: Table, j: int) -> tuple[np.ndarray, np.ndarray, int]:
    c = real.schema.columns[j]
    if c.kind == CATEGORICAL:
        return syn.values[:, j].astype(int), real.values[:, j].astype(int), len(c.categories)
    return _discretize(syn.values[:, j], real.values[:, j])


def _contingency(x: np.ndarray, y: np.ndarray, nx: int, ny: int) -> np.ndarray:
    t = np.zeros((nx, ny))
    np.add.at(t, (x, y), 1.0)
    return t / len(x)


def trend(syn: Table, real: Table, notes: list | None = None) -> float:
    """Mean pairwise-dependence similarity over all unordered column pairs.

    numeric/numeric: 1 - |rho_syn - rho_real| / 2 (Pearson). Any pair with a
    categorical column: 1 - TV between contingency tables (numeric sides
    binned on pooled quantiles). Pairs with a constant numeric column are
    skipped and recorded in ``notes``.
    """
    _same_schema(syn, real)
    cols = real.schema.columns
    if len(cols) < 2:
        raise MetricError("trend needs at least two columns")
    scores = []
    for i in range(len(cols)):
        for j in range(i + 1, len(cols)):
            if cols[i].kind == NUMERIC and cols[j].kind == NUMERIC:
                cs = [t.values[:, [i, j]] for t in (syn, real)]
                if any(np.ptp(c[:, 0]) == 0 or np.ptp(c[:, 1]) == 0 for c in cs):
                    if notes is not None:
                        notes.append(f"trend: skipped constant pair ({cols[i].name}, {cols[j].name})")
                    continue
                rho_s, rho_r = (np.corrcoef(c[:, 0], c[:, 1])[0, 1] for c in cs)
                scores.append(1.0 - abs(rho_s - rho_r) / 2.0)
            else:
                si, ri, ni = _codes(syn, real, i)
                sj, rj, nj = _codes(syn, real, j)
                scores.append(1.0 - total_variation(_contingency(si, sj, ni, nj), _contingency(ri, rj, ni, nj)))
    if not scores:
        raise MetricError("no usable column pairs for trend")
    return float(np.mean(scores))


# ------------------------------------------------------------------ alpha-precision / beta-recall

def _knn_radius(d_self: np.ndarray, k: int) -> np.ndarray:
    # d_self is square; k-th neighbour excluding the point itself
    d = d_self.copy()
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def _support_curve(ref: np.ndarray, probe: np.ndarray, dist: DistanceConfig, k: int,
                   grid: Sequence[float]) -> np.ndarray:
    """For each level a: share of probe points inside the union of k-NN balls of
    the ceil(a*N) densest reference points."""
    n = len(ref)
    radius = _knn_radius(pairwise_distances(ref, ref, dist), k)
    rank = np.empty(n, dtype=int)
    rank[np.argsort(radius, kind="stable")] = np.arange(n)
    inside = pairwise_distances(probe, ref, dist) <= radius[None, :]
    best_rank = np.where(inside, rank[None, :], n).min(axis=1)
    return np.array([np.mean(best_rank < math.ceil(a * n - 1e-9)) for a in grid])


def _integrated(curve: np.ndarray, grid: Sequence[float]) -> float:
    # one-sided shortfall from the ideal curve P(a) = a, complemented
    g = np.asarray(grid)
    return float(np.clip(np.mean(np.minimum(1.0, curve / g)), 0.0, 1.0))


def _check_knn(syn: Table, real: Table, k: int):
    _same_schema(syn, real)
    if k < 1:
        raise MetricError("k must be >= 1")
    if k >= min(syn.n_rows, real.n_rows):
        raise MetricError(f"k={k} needs more than k rows on both sides")


def ip_alpha(syn: Table, real: Table, k: int = 5, grid: Sequence[float] = ALPHA_GRID) -> float:
    """Alpha-precision: synthetic mass inside the real distribution's alpha-supports."""
    _check_knn(syn, real, k)
    dist = DistanceConfig.fit(real)
    return _integrated(_support_curve(real.values, syn.values, dist, k, grid), grid)


def ir_beta(syn: Table, real: Table, k: int = 5, grid: Sequence[float] = ALPHA_GRID) -> float:
    """Beta-recall: real points covered by the synthetic distribution's beta-supports."""
    _check_knn(syn, real, k)
    dist = DistanceConfig.fit(real)
    return _integrated(_support_curve(syn.values, real.values, dist, k, grid), grid)


# ------------------------------------------------------------------ learners

def _design(table: Table, ref: Table) -> np.ndarray:
    """Numeric columns standardised with ``ref`` statistics, categoricals one-hot."""
    parts = []
    for j, c in enumerate(table.schema.columns):
        if c.target:
            continue
        col = table.values[:, j]
        if c.kind == NUMERIC:
            mu, sd = ref.values[:, j].mean(), ref.values[:, j].std()
            parts.append(((col - mu) / (sd if sd > 0 else 1.0))[:, None])
        else:
            parts.append(np.eye(len(c.categories))[col.astype(int)])
    return np.concatenate(parts, axis=1) if parts else np.zeros((table.n_rows, 0))


def _best_stump(X_sorted_idx, Xs, g, h):
    """Best single split maximising G_L^2/H_L + G_R^2/H_R over all features."""
    best = (-np.inf, 0, 0.0, 0.0, 0.0)
    total_g, total_h = g.sum(), h.sum()
    base = total_g ** 2 / total_h
    for f in range(Xs.shape[1]):
        order = X_sorted_idx[:, f]
        xs = Xs[:, f]
        gl = np.cumsum(g[order])[:-1]
        hl = np.cumsum(h[order])[:-1]
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        gr, hr = total_g - gl, total_h - hl
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(valid & (hl > 0) & (hr > 0), gl ** 2 / hl + gr ** 2 / hr - base, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0]:
            best = (gain[i], f, 0.5 * (xs[i] + xs[i + 1]), -gl[i] / hl[i], -gr[i] / hr[i])
    return best


class BoostedStumps:
    """Gradient-boosted depth-1 trees with Newton leaf values."""

    def __init__(self, rounds: int = 100, lr: float = 0.1, loss: str = "squared"):
        self.rounds, self.lr, self.loss = rounds, lr, loss

    def fit(self, X: np.ndarray, y: np.ndarray) -> "BoostedStumps":
        n = len(y)
        if self.loss == "squared":
            self.base = float(y.mean())
        else:
            p = np.clip(y.mean(), 1e-6, 1 - 1e-6)
            self.base = float(np.log(p / (1 - p)))
        F = np.full(n, self.base)
        idx = np.argsort(X, axis=0, kind="stable")
        Xs = np.take_along_axis(X, idx, axis=0)
        self.stumps = []
        for _ in range(self.rounds):
            if self.loss == "squared":
                g, h = F - y, np.ones(n)
            else:
                p = 1.0 / (1.0 + np.exp(-F))
                g, h = p - y, np.maximum(p * (1 - p), 1e-12)
            gain, f, thr, left, right = _best_stump(idx, Xs, g, h)
            if not np.isfinite(gain):
                break
            self.stumps.append((f, thr, left, right))
            F = F + self.lr * np.where(X[:, f] <= thr, left, right)
        return self

    def decision(self, X: np.ndarray) -> np.ndarray:
        F = np.full(len(X), self.base)
        for f, thr, left, right in self.stumps:
            F = F + self.lr * np.where(X[:, f] <= thr, left, right)
        return F


class RidgeModel:
    """L2-regularised least squares, or logistic regression fitted by Newton steps."""

    def __init__(self, alpha: float = 1.0, loss: str = "squared", iters: int = 30):
        self.alpha, self.loss, self.iters = alpha, loss, iters

    def fit(self, X: np.ndarray, y: np.ndarray) -> "RidgeModel":
        A = np.c_[np.ones(len(X)), X]
        pen = self.alpha * np.eye(A.shape[1])
        pen[0, 0] = 0.0
        if self.loss == "squared":
            self.w = np.linalg.solve(A.T @ A + pen + 1e-10 * np.eye(A.shape[1]), A.T @ y)
            return self
        w = np.zeros(A.shape[1])
        for _ in range(self.iters):
            p = 1.0 / (1.0 + np.exp(-(A @ w)))
            grad = A.T @ (p - y) + pen @ w
            H = (A * (p * (1 - p))[:, None]).T @ A + pen + 1e-8 * np.eye(A.shape[1])
            step = np.linalg.solve(H, grad)
            w -= step
            if np.abs(step).max() < 1e-10:
                break
        self.w = w
        return self

    def decision(self, X: np.ndarray) -> np.ndarray:
        return np.c_[np.ones(len(X)), X] @ self.w


def _make(learner: str, loss: str):
    if learner == "boosted_stumps":
        return BoostedStumps(loss=loss)
    if learner == "linear":
        return RidgeModel(loss=loss)
    raise MetricError(f"unknown learner {learner!r}")


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (average ranks for ties)."""
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes in the evaluation set")
    r = rankdata(scores)
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def r2(pred: np.ndarray, y: np.ndarray) -> float:
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")


def utility(train_like: Table, test: Table, learner: str = "boosted_stumps") -> float:
    """Train on ``train_like``, score on ``test``: AUC (macro one-vs-rest if multiclass) or R^2."""
    _same_schema(train_like, test)
    if test.n_rows == 0 or train_like.n_rows == 0:
        raise MetricError("utility needs non-empty train and test tables")
    Xtr, Xte = _design(train_like, train_like), _design(test, train_like)
    t = train_like.schema.target_index
    ytr, yte = train_like.values[:, t], test.values[:, t]
    tcol = train_like.schema.target
    if tcol.kind == NUMERIC:
        return r2(_make(learner, "squared").fit(Xtr, ytr).decision(Xte), yte)
    classes = np.unique(ytr)
    if len(classes) < 2:
        raise MetricError("classification training set has a single class")
    if len(tcol.categories) == 2:
        pos = 1.0
        model = _make(learner, "logistic").fit(Xtr, (ytr == pos).astype(float))
        return auc(model.decision(Xte), yte == pos)
    aucs = []
    for c in np.unique(yte):
        if c not in classes or np.all(yte == c):
            continue
        model = _make(learner, "logistic").fit(Xtr, (ytr == c).astype(float))
        aucs.append(auc(model.decision(Xte), yte == c))
    if not aucs:
        raise MetricError("no class is evaluable on the test set")
    return float(np.mean(aucs))


def augmentation_eval(real_train: Table, syn: Table, test: Table,
                      learner: str = "boosted_stumps") -> tuple[float, float]:
    """(augmented utility, real-only baseline)."""
    baseline = utility(real_train, test, learner)
    if syn.n_rows == 0:
        return baseline, baseline
    _same_schema(real_train, syn)
    return utility(Table.concat([real_train, syn]), test, learner), baseline


# ------------------------------------------------------------------ aggregation

def zscore_normalize(groups: Mapping, dropped: list | None = None) -> dict:
    """z = (x - mean) / std (population) within each (dataset, metric) group.

    Groups with fewer than two values or zero variance are dropped and listed
    in ``dropped``.
    """
    out = {}
    for key, values in groups.items():
        v = np.asarray(values, float)
        sd = v.std() if len(v) >= 2 else 0.0
        if len(v) < 2 or not sd > 0:
            if dropped is not None:
                dropped.append(key)
            continue
        out[key] = (v - v.mean()) / sd
    return out


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        return float("nan")
    return float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class CorrelationResult:
    metrics: list
    pearson: np.ndarray
    spearman: np.ndarray


def correlation_matrix(points: Sequence[Mapping[str, float]], metrics: Sequence[str] | None = None,
                       min_points: int = 3) -> CorrelationResult:
    """Pairwise-complete Pearson and Spearman matrices; entries with fewer than
    ``min_points`` overlapping points are NaN (unavailable)."""
    metrics = list(metrics) if metrics else sorted({k for p in points for k in p})
    M = np.array([[_num(p.get(m)) for m in metrics] for p in points], dtype=float).reshape(len(points), len(metrics))
    k = len(metrics)
    P, S = np.full((k, k), np.nan), np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i, k):
            ok = np.isfinite(M[:, i]) & np.isfinite(M[:, j])
            if ok.sum() < min_points:
                continue
            x, y = M[ok, i], M[ok, j]
            if i == j:
                P[i, i] = S[i, i] = 1.0
                continue
            P[i, j] = P[j, i] = _pearson(x, y)
            S[i, j] = S[j, i] = _pearson(rankdata(x), rankdata(y))
    return CorrelationResult(metrics, P, S)


def _num(v) -> float:
    try:
        return float(v) if v is not None else float("nan")
    except (TypeError, ValueError):
        return float("nan")


def balanced_score(utility_value: float, dcr_overfit_value: float) -> float:
    return 0.5 * utility_value + 0.5 * dcr_overfit_value


def best_balanced(points: Sequence["FrontierPoint"]) -> "FrontierPoint":
    """Checkpoint maximising the balanced score; ties go to the earliest entry."""
    return max(points, key=lambda p: (balanced_score(p.quality, p.privacy), -points.index(p)))


# ------------------------------------------------------------------ reports

@dataclass
class MetricReport:
    dcr_overfit: float | None = None
    dcr_p: float | None = None
    shape: float | None = None
    trend: float | None = None
    ip_alpha: float | None = None
    ir_beta: float | None = None
    utility: dict = field(default_factory=dict)
    balanced_score: float | None = None
    notes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


_UNIT = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "MetricReport",
    "type": "object",
    "required": ["dcr_overfit", "shape", "trend", "ip_alpha", "ir_beta", "utility", "balanced_score"],
    "properties": {
        "dcr_overfit": _UNIT, "dcr_p": _UNIT, "shape": _UNIT, "trend": _UNIT,
        "ip_alpha": _UNIT, "ir_beta": _UNIT,
        "utility": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
        "balanced_score": {"type": ["number", "null"]},
        "notes": {"type": "array", "items": {"type": "string"}},
        "meta": {"type": "object"},
    },
}


def evaluate(syn: Table, train: Table, test: Table, val: Table | None = None,
             learners: Sequence[str] = LEARNERS, k: int = 5) -> MetricReport:
    """Full report. Without a validation split dcr_overfit is unavailable (None)."""
    rep = MetricReport()
    if val is not None:
        rep.dcr_p, rep.dcr_overfit = dcr_overfit(syn, train, val)
    else:
        rep.notes.append("dcr_overfit unavailable: no validation split")
    rep.shape = shape(syn, train)
    rep.trend = trend(syn, train, rep.notes)
    if k < min(syn.n_rows, train.n_rows):
        rep.ip_alpha = ip_alpha(syn, train, k)
        rep.ir_beta = ir_beta(syn, train, k)
    else:
        rep.notes.append(f"ip_alpha/ir_beta unavailable: fewer than {k + 1} rows")
    for learner in learners:
        try:
            rep.utility[learner] = utility(syn, test, learner)
        except MetricError as exc:
            rep.utility[learner] = None
            rep.notes.append(f"utility[{learner}] unavailable: {exc}")
    primary = rep.utility.get(learners[0]) if learners else None
    if primary is not None and rep.dcr_overfit is not None:
        rep.balanced_score = balanced_score(primary, rep.dcr_overfit)
    return rep


@dataclass(frozen=True)
class FrontierPoint:
    step: float
    quality: float
    privacy: float


def write_frontier(points: Iterable[FrontierPoint], path: str | Path, key: str = "step") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([key, "quality", "privacy"])
        for p in points:
            w.writerow([p.step, repr(float(p.quality)), repr(float(p.privacy))])


def read_frontier(path: str | Path) -> list[FrontierPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [FrontierPoint(float(r[0]), float(r[1]), float(r[2])) for r in rows[1:]]


def write_matrix_csv(names: Sequence[str], matrix: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", *names])
        for n, row in zip(names, matrix):
            w.writerow([n, *("" if not np.isfinite(v) else repr(float(v)) for v in row)])


def read_matrix_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    mat = np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows[1:]])
    return names, mat


def save_report(rep: MetricReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))


def load_report(path: str | Path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text()))
