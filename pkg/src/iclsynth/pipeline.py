"""Pretraining over a corpus, FID-based checkpoint selection, conditional
latent sampling and end-to-end synthesis."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ndnum as nd
from .corpus import (INFERENCE_CONTEXT_RATIO, PRETRAIN_RATIO_RANGE, QUERY_CAP, cap_indices,
                     split_indices)
from .denoiser import (DESK_DENOISER, DenoiserConfig, DenoiserModel, denoise_fn, forward,
                       init_model, save_checkpoint)
from .encdec import (DESK_DECODER, DecoderConfig, Table, decode, encode_table, fit_stats,
                     train_decoders)
from .ndnum import ContractError, ParamStore
from .schedule import ScheduleConfig, loss_weight, run_ladder, sample_sigma

log = logging.getLogger(__name__)

DEFAULT_SYNTH_ROWS = 2500


class TrainingError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    warmup_ratio: float = 0.05
    schedule: str = "cosine"
    weight_decay: float = 0.0
    epochs: int = 200
    batch_query_cap: int = QUERY_CAP
    context_ratio_range: tuple = PRETRAIN_RATIO_RANGE
    seed: int = 0
    encoder_seed: int = 0
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.warmup_ratio < 1:
            raise ContractError("warmup_ratio must lie in (0, 1)")
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_ratio_range"] = list(self.context_ratio_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "context_ratio_range" in kw:
            kw["context_ratio_range"] = tuple(kw["context_ratio_range"])
        return cls(**kw)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


PAPER_TRAIN = TrainConfig(epochs=20000, dtype="float64")
# sized so 200 tasks x 5 variants pretrain in ~20 minutes on one CPU core
DESK_TRAIN = TrainConfig(epochs=10, lr=1e-3, checkpoint_every=5)


@dataclass
class Checkpoint:
    step: int
    epoch: int
    model: DenoiserModel
    fingerprint: str
    fid: float | None = None
    path: Path | None = None


@dataclass(frozen=True)
class LatentFID:
    value: float
    dim: int
    n_gen: int
    n_real: int


@dataclass
class PreparedDataset:
    id: str
    table: Table
    latents: np.ndarray


def prepare(datasets: Sequence[tuple[str, Table]], encoder_seed: int, d: int) -> list[PreparedDataset]:
    """Encode every table once; statistics come from the whole table (context+query pool)."""
    out = []
    for ds_id, table in datasets:
        out.append(PreparedDataset(ds_id, table, encode_table(table, fit_stats(table), encoder_seed, d)))
    return out


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to zero."""
    warm = max(1, int(round(cfg.warmup_ratio * total)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.schedule == "constant":
        return cfg.lr
    frac = (step - warm) / max(1, total - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def cast_model(model: DenoiserModel, dtype) -> DenoiserModel:
    arrays = {n: model.params[n].data for n in model.params.names}
    return DenoiserModel(model.config, ParamStore.from_arrays(arrays, dtype=np.dtype(dtype).type), model.schedule)


def diffusion_loss(model: DenoiserModel, z_qry: np.ndarray, z_ctx: np.ndarray, sigma: float,
                   noise: np.ndarray) -> nd.Tensor:
    """lambda(sigma) * mean squared denoising residual over all query cells."""
    dtype = model.params.flat.dtype
    z_sigma = (z_qry + sigma * noise).astype(dtype)
    out = forward(model, z_sigma, sigma, z_ctx.astype(dtype))
    resid = nd.sub(out, nd.Tensor(z_qry.astype(dtype)))
    return nd.mul(nd.mean(nd.square(resid)), loss_weight(sigma, model.schedule))


def pretrain(datasets: Sequence[tuple[str, Table]], denoiser_config: DenoiserConfig = DESK_DENOISER,
             train_config: TrainConfig = DESK_TRAIN, schedule: ScheduleConfig = ScheduleConfig(),
             out_dir: str | Path | None = None, init: DenoiserModel | None = None,
             on_record: Callable[[dict], None] | None = None) -> list[Checkpoint]:
    """Train the conditional denoiser over ``datasets`` and return its checkpoints.

    Checkpoint 0 is the initial model. Further checkpoints are taken every
    ``checkpoint_every`` epochs (if > 0) and after the last epoch.
    """
    if not datasets:
        raise ContractError("empty corpus")
    cfg = train_config
    prepared = prepare(datasets, cfg.encoder_seed, denoiser_config.latent_dim)
    model = init if init is not None else init_model(denoiser_config, cfg.seed, schedule)
    model = cast_model(model, cfg.dtype)
    rng = np.random.default_rng([cfg.seed, 17])
    state = nd.AdamState.zeros_like([model.params.flat])
    total = cfg.epochs * len(prepared)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    fp = cfg.fingerprint()
    ckpts: list[Checkpoint] = []
    log_fh = open(out_dir / "train_log.jsonl", "w") if out_dir else None

    def snapshot(step, epoch):
        ck = Checkpoint(step, epoch, cast_model(model, np.float64), fp)
        if out_dir:
            ck.path = out_dir / f"ckpt_{step:08d}.bin"
            save_checkpoint(ck.path, ck.model, {"step": step, "epoch": epoch, "train_fingerprint": fp,
                                                "train_config": cfg.to_dict()})
        ckpts.append(ck)

    snapshot(0, 0)
    step = 0
    t0 = time.time()
    lo, hi = cfg.context_ratio_range
    try:
        for epoch in range(1, cfg.epochs + 1):
            for i in rng.permutation(len(prepared)):
                ds = prepared[i]
                ctx_idx, qry_idx = split_indices(ds.table.n_rows, rng.uniform(lo, hi), rng)
                qry_idx = qry_idx[cap_indices(len(qry_idx), cfg.batch_query_cap, rng)]
                z_ctx, z_qry = ds.latents[ctx_idx], ds.latents[qry_idx]
                sigma = sample_sigma(rng, schedule)
                noise = rng.standard_normal(z_qry.shape)
                loss = diffusion_loss(model, z_qry, z_ctx, sigma, noise)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss on dataset {ds.id} at step {step}")
                lr = lr_at(step, total, cfg)
                nd.adam_step([model.params.flat], [model.params.flat_grad(loss)], state, lr,
                             weight_decay=cfg.weight_decay)
                step += 1
                rec = {"step": step, "epoch": epoch, "dataset": ds.id, "sigma": sigma,
                       "loss": value, "lr": lr, "wallclock": round(time.time() - t0, 3)}
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                if on_record:
                    on_record(rec)
            if epoch == cfg.epochs or (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0):
                snapshot(step, epoch)
                log.info("epoch %d step %d (%.0fs)", epoch, step, time.time() - t0)
    finally:
        if log_fh:
            log_fh.close()
    return ckpts


def train_dataset_specific(table: Table, denoiser_config: DenoiserConfig = DESK_DENOISER,
                           train_config: TrainConfig = DESK_TRAIN, schedule: ScheduleConfig = ScheduleConfig(),
                           out_dir: str | Path | None = None,
                           on_record: Callable[[dict], None] | None = None) -> list[Checkpoint]:
    """Same machinery as ``pretrain`` with a corpus of exactly one dataset (re-split every epoch)."""
    return pretrain([("target", table)], denoiser_config, train_config, schedule, out_dir, on_record=on_record)


# ------------------------------------------------------------------ sampling

def sample_latents(model: DenoiserModel, z_ctx: np.ndarray, k: int,
                   schedule: ScheduleConfig | None = None, seed: int = 0,
                   denoiser: Callable | None = None) -> np.ndarray:
    """K latents conditioned on one shared context, each from independent noise."""
    if k < 1:
        raise ContractError("K must be >= 1")
    if z_ctx.ndim != 3 or z_ctx.shape[0] < 1:
        raise ContractError(f"context latents must be (M_ctx>=1, F, d), got {z_ctx.shape}")
    schedule = schedule or model.schedule
    _, F, d = z_ctx.shape
    z = np.random.default_rng(seed).standard_normal((k, F, d)) * schedule.sigma_max
    fn = denoiser or denoise_fn(model, z_ctx)
    with np.errstate(invalid="ignore", over="ignore"):
        out = run_ladder(fn, z, schedule)
    if not np.all(np.isfinite(out)):
        raise TrainingError("sampler produced non-finite latents; checkpoint is unusable")
    return out


def _pool(z: np.ndarray) -> np.ndarray:
    return z.mean(axis=1) if z.ndim == 3 else z


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}) via a symmetric eigen-square-root."""
    w1, v1 = np.linalg.eigh((cov1 + cov1.T) / 2)
    if w1.min() < -1e-8:
        raise ArithmeticError(f"covariance has negative eigenvalue {w1.min():.3g}")
    root1 = (v1 * np.sqrt(np.clip(w1, 0, None))) @ v1.T
    inner = root1 @ cov2 @ root1
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        raise ArithmeticError(f"product has negative eigenvalue {w.min():.3g}")
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = mu1 - mu2
    return float(max(0.0, diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt))


def latent_fid(gen: np.ndarray, real: np.ndarray) -> LatentFID:
    """Frechet distance between Gaussians fitted to feature-mean-pooled latents."""
    a, b = _pool(np.asarray(gen, float)), _pool(np.asarray(real, float))
    if len(a) < 2 or len(b) < 2:
        raise ContractError("latent FID needs at least 2 samples per side")
    if a.shape[1:] != b.shape[1:]:
        raise ContractError(f"latent shapes disagree: {gen.shape} vs {real.shape}")
    value = frechet_distance(a.mean(0), np.cov(a, rowvar=False).reshape(a.shape[1], -1),
                             b.mean(0), np.cov(b, rowvar=False).reshape(b.shape[1], -1))
    return LatentFID(value, a.shape[1], len(a), len(b))


@dataclass
class SelectionReport:
    best_step: int
    fids: dict = field(default_factory=dict)
    per_dataset: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"best_step": self.best_step, "fids": {str(k): v for k, v in self.fids.items()},
                "per_dataset": {str(k): v for k, v in self.per_dataset.items()}}


def _task_of(ds_id: str) -> str:
    return ds_id.split("/")[0]


def validation_fid(model: DenoiserModel, validation: Sequence[PreparedDataset], ratio: float = INFERENCE_CONTEXT_RATIO,
                   seed: int = 0, schedule: ScheduleConfig | None = None,
                   cap: int = QUERY_CAP) -> dict[str, float]:
    out = {}
    for i, ds in enumerate(validation):
        rng = np.random.default_rng([seed, i])
        ctx_idx, qry_idx = split_indices(ds.table.n_rows, ratio, rng)
        qry_idx = qry_idx[cap_indices(len(qry_idx), cap, rng)]
        z_ctx, z_qry = ds.latents[ctx_idx], ds.latents[qry_idx]
        gen = sample_latents(model, z_ctx, len(qry_idx), schedule, seed=int(rng.integers(2 ** 31)))
        out[ds.id] = latent_fid(gen, z_qry).value
    return out


def select_checkpoint(checkpoints: Sequence[Checkpoint], validation: Sequence[tuple[str, Table]],
                      train_ids: Sequence[str] = (), encoder_seed: int = 0, seed: int = 0,
                      schedule: ScheduleConfig | None = None) -> tuple[Checkpoint, SelectionReport]:
    """Argmin of mean validation latent FID; ties go to the earliest step."""
    if not checkpoints:
        raise ContractError("no checkpoints to select from")
    if len(checkpoints) == 1 and not validation:
        return checkpoints[0], SelectionReport(checkpoints[0].step)
    overlap = {_task_of(i) for i, _ in validation} & {_task_of(i) for i in train_ids}
    if overlap:
        raise ContractError(f"validation tasks overlap the training corpus: {sorted(overlap)[:5]}")
    if len(checkpoints) == 1:
        return checkpoints[0], SelectionReport(checkpoints[0].step)
    d = checkpoints[0].model.config.latent_dim
    prepared = prepare(validation, encoder_seed, d)
    report = SelectionReport(-1)
    best = None
    for ck in sorted(checkpoints, key=lambda c: c.step):
        model = cast_model(ck.model, np.float32)
        per = validation_fid(model, prepared, seed=seed, schedule=schedule)
        ck.fid = float(np.mean(list(per.values())))
        report.fids[ck.step] = ck.fid
        report.per_dataset[ck.step] = per
        if best is None or ck.fid < best.fid:
            best = ck
        log.info("checkpoint step %d: validation FID %.4f", ck.step, ck.fid)
    report.best_step = best.step
    return best, report


# ------------------------------------------------------------------ synthesis

@dataclass
class SynthesisResult:
    table: Table
    decoder_losses: list[float]
    context_rows: np.ndarray
    query_rows: np.ndarray
    seeds: dict


def synthesize(table: Table, model: DenoiserModel, k: int = DEFAULT_SYNTH_ROWS,
               ratio: float = INFERENCE_CONTEXT_RATIO, seed: int = 0, encoder_seed: int = 0,
               decoder_config: DecoderConfig = DESK_DECODER,
               schedule: ScheduleConfig | None = None) -> SynthesisResult:
    """split -> stats -> encode -> sample K latents -> fit decoders on the query -> decode.

    Context rows only condition the sampler; decoders see query rows only.
    """
    ctx_idx, qry_idx = split_indices(table.n_rows, ratio, np.random.default_rng([seed, 0]))
    stats = fit_stats(table)
    d = model.config.latent_dim
    ctx, qry = table.take(ctx_idx), table.take(qry_idx)
    z_ctx = encode_table(ctx, stats, encoder_seed, d)
    z_qry = encode_table(qry, stats, encoder_seed, d)
    fast = cast_model(model, np.float32)
    z0 = sample_latents(fast, z_ctx, k, schedule, seed=seed + 1)
    fit = train_decoders(z_qry, qry, stats, replace(decoder_config, seed=decoder_config.seed + seed))
    out = decode(z0, fit.decoders, stats, table.schema)
    seeds = {"split": seed, "sampler": seed + 1, "decoder": decoder_config.seed + seed, "encoder": encoder_seed}
    return SynthesisResult(out, fit.losses, ctx_idx, qry_idx, seeds)
