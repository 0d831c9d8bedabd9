import json

import numpy as np
import pytest

from iclsynth import ndnum as nd
from iclsynth import pipeline as P
from iclsynth.corpus import TaskSpec, desk_manifest, expand_corpus, generate_dataset
from iclsynth.denoiser import DenoiserConfig, forward, init_model
from iclsynth.encdec import CATEGORICAL, Column, DecoderConfig, Table, TableSchema
from iclsynth.ndnum import ContractError
from iclsynth.schedule import ScheduleConfig, gaussian_posterior_denoiser, loss_weight

TINY = DenoiserConfig(latent_dim=4, model_dim=8, layers=1, heads=2)
FAST = P.TrainConfig(epochs=2, lr=1e-3, checkpoint_every=1)


def _corpus(n=2):
    return expand_corpus(desk_manifest(n, seed=5, rows=(50, 60), features=(3, 4)), k=1)


def test_train_config_defaults_and_validation():
    c = P.TrainConfig()
    assert (c.lr, c.warmup_ratio, c.weight_decay, c.batch_query_cap, c.context_ratio_range) == (2e-4, 0.05, 0.0, 128, (0.2, 0.5))
    assert P.PAPER_TRAIN.epochs == 20000
    with pytest.raises(ContractError):
        P.TrainConfig(warmup_ratio=0.0)
    with pytest.raises(ContractError):
        P.TrainConfig(lr=0.0)
    assert P.TrainConfig.from_dict(c.to_dict()) == c


def test_lr_schedule_shape():
    cfg = P.TrainConfig(lr=1.0, warmup_ratio=0.1)
    lrs = [P.lr_at(s, 100, cfg) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == pytest.approx(1.0)
    assert np.all(np.diff(lrs[10:]) <= 0) and lrs[-1] < 0.01


def test_diffusion_loss_matches_hand_computation():
    model = init_model(TINY, 0, zero_residual=False)
    r = np.random.default_rng(0)
    zq, zc, noise = r.normal(size=(3, 2, 4)), r.normal(size=(4, 2, 4)), r.normal(size=(3, 2, 4))
    sigma = 0.7
    got = P.diffusion_loss(model, zq, zc, sigma, noise).item()
    with nd.no_grad():
        den = forward(model, zq + sigma * noise, sigma, zc).data
    assert got == pytest.approx(loss_weight(sigma) * np.mean((den - zq) ** 2), abs=1e-10)


def test_pretrain_smoke_and_determinism(tmp_path):
    data = _corpus()
    records = []
    a = P.pretrain(data, TINY, FAST, out_dir=tmp_path / "a", on_record=records.append)
    b = P.pretrain(data, TINY, FAST, out_dir=tmp_path / "b")
    assert [c.step for c in a] == [0, 2, 4]
    assert records[0]["loss"] > 0 and np.isfinite(records[0]["loss"])
    steps = [json.loads(l)["step"] for l in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert steps == sorted(set(steps)) and steps[0] == 1
    for ca, cb in zip(a, b):
        assert ca.path.read_bytes() == cb.path.read_bytes()
    with pytest.raises(ContractError):
        P.pretrain([], TINY, FAST)


def test_pretrain_non_finite_loss_aborts():
    bad = init_model(TINY, 0)
    bad.params.flat[:] = np.nan
    with pytest.raises(P.TrainingError, match="dataset"):
        P.pretrain(_corpus(1), TINY, replace_dtype(FAST), init=bad)


def replace_dtype(cfg):
    from dataclasses import replace
    return replace(cfg, dtype="float64")


def test_point_mass_loss_decreases():
    schema = TableSchema((Column("a", CATEGORICAL, ("u", "v")), Column("b", CATEGORICAL, ("u", "v"), True)))
    table = Table(schema, np.zeros((60, 2)))
    cfg = P.TrainConfig(epochs=50, lr=3e-3, dtype="float64")
    ckpts = P.train_dataset_specific(table, TINY, cfg)
    z = P.prepare([("pm", table)], 0, TINY.latent_dim)[0].latents
    noise = np.random.default_rng(0).normal(size=(40, 2, 4))
    sigma = 0.05
    before = P.diffusion_loss(ckpts[0].model, z[20:], z[:20], sigma, noise).item()
    after = P.diffusion_loss(ckpts[-1].model, z[20:], z[:20], sigma, noise).item()
    # constant-predictor floor is 0: the ideal denoiser returns the point itself
    assert after < before


def test_train_dataset_specific_single_corpus():
    t = generate_dataset(TaskSpec("gaussian_mixture", 60, 3, 1))
    records = []
    P.train_dataset_specific(t, TINY, P.TrainConfig(epochs=2), on_record=records.append)
    assert {r["dataset"] for r in records} == {"target"} and len(records) == 2


def test_latent_fid_examples():
    r = np.random.default_rng(0)
    a = r.normal(size=(500, 3, 4))
    assert P.latent_fid(a, a).value <= 1e-8
    x, y = r.normal(size=(10_000, 4)), r.normal(size=(10_000, 4))
    y[:, 0] += 1.0
    assert abs(P.latent_fid(x, y).value - 1.0) < 0.1
    b = r.normal(1, 2, size=(300, 3, 4))
    assert P.latent_fid(a, b).value == pytest.approx(P.latent_fid(b, a).value, abs=1e-10)
    with pytest.raises(ContractError):
        P.latent_fid(a[:1], b)


def test_frechet_closed_form():
    # diagonal Gaussians: sum (m1-m2)^2 + (s1 - s2)^2
    m1, m2 = np.array([0.0, 1.0]), np.array([2.0, 1.0])
    s1, s2 = np.array([1.0, 4.0]), np.array([9.0, 1.0])
    exp = ((m1 - m2) ** 2).sum() + ((np.sqrt(s1) - np.sqrt(s2)) ** 2).sum()
    assert P.frechet_distance(m1, np.diag(s1), m2, np.diag(s2)) == pytest.approx(exp, abs=1e-12)


def test_noise_scores_worse_than_context_mean():
    r = np.random.default_rng(1)
    real = r.normal(0.3, 0.2, size=(200, 2, 4))
    ctx_mean = np.broadcast_to(real.mean(0), real.shape) + 1e-3 * r.normal(size=real.shape)
    noise = r.normal(0, 80, size=real.shape)
    assert P.latent_fid(ctx_mean, real).value < P.latent_fid(noise, real).value


def test_sample_latents_contract():
    model = init_model(TINY, 0)
    zc = np.random.default_rng(0).normal(size=(5, 2, 4))
    out = P.sample_latents(model, zc, 3, seed=1)
    assert out.shape == (3, 2, 4)
    assert np.array_equal(out, P.sample_latents(model, zc, 3, seed=1))
    assert not np.array_equal(out, P.sample_latents(model, zc, 3, seed=2))
    with pytest.raises(ContractError):
        P.sample_latents(model, zc, 0)


def test_sample_latents_initial_variance():
    seen = []

    def spy(z, sigma):
        if not seen:
            seen.append(z.copy())
        return np.zeros_like(z)

    P.sample_latents(init_model(TINY, 0), np.zeros((1, 5, 4)), 5000, seed=0, denoiser=spy)
    assert abs(seen[0].var() / 80.0 ** 2 - 1) < 0.02


def test_sample_latents_gaussian_oracle():
    out = P.sample_latents(init_model(TINY, 0), np.zeros((1, 1, 1)), 10_000, seed=3,
                           denoiser=gaussian_posterior_denoiser(-0.8, 0.3))
    assert abs(out.mean() + 0.8) < 0.02 * 0.8 and abs(out.var() - 0.3) < 0.05 * 0.3


def test_select_checkpoint(tmp_path):
    data = _corpus(2)
    ckpts = P.pretrain(data, TINY, FAST)
    val = expand_corpus(desk_manifest(2, seed=77, rows=(50, 60), features=(3, 4)), k=1)
    only, rep = P.select_checkpoint(ckpts[:1], [])
    assert only is ckpts[0]
    best, rep = P.select_checkpoint(ckpts, val, [i for i, _ in data])
    assert best.fid == min(rep.fids.values())
    assert best.step == min(s for s, f in rep.fids.items() if f == best.fid)
    with pytest.raises(ContractError, match="overlap"):
        P.select_checkpoint(ckpts, data, [i for i, _ in data])
    with pytest.raises(ContractError):
        P.select_checkpoint([], val)


def test_select_checkpoint_ties_pick_earliest():
    m = init_model(TINY, 0)
    ckpts = [P.Checkpoint(5, 1, m, "x"), P.Checkpoint(2, 1, m.copy(), "x")]
    val = expand_corpus(desk_manifest(1, seed=78, rows=(50, 60), features=(3, 4)), k=1)
    best, _ = P.select_checkpoint(ckpts, val)
    assert best.step == 2


def test_synthesize_contract(monkeypatch):
    t = generate_dataset(TaskSpec("categorical_mixture", 60, 4, 3))
    seen = {}
    orig = P.train_decoders

    def spy(z, qry, stats, config):
        seen["qry"] = qry.values.copy()
        return orig(z, qry, stats, config)

    monkeypatch.setattr(P, "train_decoders", spy)
    res = P.synthesize(t, init_model(TINY, 0), k=7, seed=2, decoder_config=DecoderConfig(hidden=8, epochs=2))
    assert res.table.n_rows == 7 and res.table.schema == t.schema
    assert len(res.context_rows) == 18
    assert np.array_equal(seen["qry"], t.values[res.query_rows])
    assert not set(res.context_rows) & set(res.query_rows)
    assert P.DEFAULT_SYNTH_ROWS == 2500


def test_sample_latents_non_finite_model():
    bad = init_model(TINY, 0)
    bad.params.flat[:] = np.nan
    with pytest.raises(P.TrainingError):
        P.sample_latents(bad, np.zeros((2, 2, 4)), 3)
