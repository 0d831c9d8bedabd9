import csv
import json

import jsonschema
import numpy as np
import pytest

from iclsynth import cli, metrics
from iclsynth.corpus import TaskSpec, dump_manifest, fresh_draw, generate_dataset
from iclsynth.denoiser import DenoiserConfig, init_model, save_checkpoint
from iclsynth.encdec import read_table, write_table

TINY = DenoiserConfig(latent_dim=4, model_dim=8, layers=1, heads=2)
SPECS = [TaskSpec("gaussian_mixture", 60, 3, 1, task_id="a"), TaskSpec("categorical_mixture", 50, 3, 2, task_id="b")]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def manifest(tmp_path):
    p = tmp_path / "manifest.txt"
    p.write_text(dump_manifest(SPECS))
    return p


@pytest.fixture
def toy(tmp_path):
    spec = TaskSpec("gaussian_mixture", 300, 3, 9)
    paths = {}
    for name, seed in (("train", 1), ("val", 2), ("test", 3), ("syn", 4)):
        paths[name] = tmp_path / f"{name}.csv"
        write_table(fresh_draw(spec, 120, seed), paths[name])
    return paths


def _files(d):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*.csv"))}


def test_corpus_variants_and_determinism(tmp_path, manifest):
    assert run("corpus", "--manifest", manifest, "--out", tmp_path / "c1") == 0
    assert len(_files(tmp_path / "c1")) == 2 * 5
    assert run("corpus", "--manifest", manifest, "--out", tmp_path / "c2") == 0
    assert _files(tmp_path / "c1") == _files(tmp_path / "c2")
    assert run("corpus", "--manifest", manifest, "--no-permute", "--out", tmp_path / "c3") == 0
    assert len(_files(tmp_path / "c3")) == 2


def test_run_config_rerun_is_bit_exact(tmp_path, manifest):
    out = tmp_path / "c"
    assert run("corpus", "--manifest", manifest, "--variants", 2, "--out", out) == 0
    cfg = json.loads((out / "run_config.json").read_text())
    assert cfg["command"] == "corpus" and cfg["variants"] == 2 and cfg["manifest_seed"] == 0
    first = _files(out)
    assert run("corpus", "--config", out / "run_config.json") == 0
    assert _files(out) == first


def test_flags_override_config(tmp_path, manifest):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"manifest": str(manifest), "variants": 3, "out": str(tmp_path / "c")}))
    assert run("corpus", "--config", cfg, "--variants", 1) == 0
    assert json.loads((tmp_path / "c" / "run_config.json").read_text())["variants"] == 1


def test_usage_and_data_exit_codes(tmp_path, manifest):
    assert run("corpus") == 2
    assert run("bogus") == 2
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert run("corpus", "--config", bad, "--out", tmp_path) == 2
    bad_manifest = tmp_path / "bad.txt"
    bad_manifest.write_text('[{"family": "unknown_family", "n_rows": 50, "n_features": 3, "seed": 0}]')
    assert run("corpus", "--manifest", bad_manifest, "--out", tmp_path / "o") == 3
    assert run("eval", "--syn", tmp_path / "missing.csv", "--train", tmp_path / "m.csv",
               "--test", tmp_path / "m.csv", "--out", tmp_path / "r.json") == 3


def test_numeric_failure_exit_code(tmp_path, toy):
    ck = tmp_path / "nan.bin"
    model = init_model(TINY, 0)
    model.params.flat[:] = np.nan
    save_checkpoint(ck, model)
    code = run("synth", "--checkpoint", ck, "--data", toy["train"], "--k", 5, "--decoder-epochs", 1,
               "--out", tmp_path / "s.csv")
    assert code == 4


def test_pretrain_preset_paper_echo(tmp_path, capsys):
    # the echo precedes any data access, so a missing corpus still shows it
    code = run("pretrain", "--preset", "paper", "--corpus", tmp_path / "none", "--out", tmp_path / "p")
    echoed = json.loads(capsys.readouterr().out.splitlines()[0])
    assert echoed["train"]["lr"] == 2e-4 and echoed["train"]["warmup_ratio"] == 0.05
    assert code == 3


def test_pretrain_log_steps(tmp_path, manifest):
    assert run("corpus", "--manifest", manifest, "--no-permute", "--out", tmp_path / "c") == 0
    assert run("corpus", "--manifest", manifest, "--no-permute", "--manifest-seed", 1, "--out", tmp_path / "v") == 0
    assert run("pretrain", "--corpus", tmp_path / "c", "--epochs", 2, "--checkpoint-every", 1,
               "--out", tmp_path / "p") == 0
    steps = [json.loads(l)["step"] for l in (tmp_path / "p" / "train_log.jsonl").read_text().splitlines()]
    assert all(b > a for a, b in zip(steps, steps[1:]))
    assert len(list((tmp_path / "p").glob("ckpt_*.bin"))) == 3


def test_synth_row_count_and_sidecar(tmp_path, toy):
    ck = tmp_path / "m.bin"
    save_checkpoint(ck, init_model(TINY, 0))
    out = tmp_path / "s.csv"
    assert run("synth", "--checkpoint", ck, "--data", toy["train"], "--k", 17, "--decoder-epochs", 2, "--out", out) == 0
    t = read_table(out)
    assert t.n_rows == 17 and t.schema == read_table(toy["train"]).schema
    side = json.loads((tmp_path / "s.csv.json").read_text())
    assert side["rows"] == 17 and set(side["decoder_losses"]) and "seeds" in side
    p = json.loads((tmp_path / "run_config.json").read_text())
    assert p["ratio"] == 0.3 and cli.DEFAULTS["synth"]["k"] == 2500


def test_eval_report_schema(tmp_path, toy):
    out = tmp_path / "r.json"
    assert run("eval", "--syn", toy["syn"], "--train", toy["train"], "--val", toy["val"], "--test", toy["test"],
               "--dataset", "toy", "--method", "oracle", "--seed", 0, "--out", out) == 0
    doc = json.loads(out.read_text())
    jsonschema.validate(doc, metrics.REPORT_SCHEMA)
    assert doc["dcr_overfit"] > 0.5 and set(doc["utility"]) == set(metrics.LEARNERS)
    out2 = tmp_path / "r2.json"
    assert run("eval", "--syn", toy["train"], "--train", toy["train"], "--test", toy["test"], "--out", out2) == 0
    doc2 = json.loads(out2.read_text())
    jsonschema.validate(doc2, metrics.REPORT_SCHEMA)
    assert doc2["dcr_overfit"] is None and doc2["notes"]


def test_frontier_csv_columns(tmp_path):
    data = tmp_path / "d.csv"
    write_table(generate_dataset(TaskSpec("gaussian_mixture", 120, 3, 4)), data)
    out = tmp_path / "f.csv"
    assert run("frontier", "--data", data, "--mode", "dataset_specific", "--n", 80, "--epochs", 2,
               "--cadence", 1, "--k", 40, "--out", out) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step_or_ratio", "quality", "privacy"] and len(rows) == 3
    ck = tmp_path / "m.bin"
    save_checkpoint(ck, init_model(TINY, 0))
    assert run("frontier", "--data", data, "--mode", "icl", "--checkpoint", ck, "--n", 80, "--k", 40,
               "--out", tmp_path / "g.csv") == 0
    ratios = [float(r[0]) for r in list(csv.reader(open(tmp_path / "g.csv")))[1:]]
    assert ratios == pytest.approx([0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    assert run("frontier", "--data", data, "--mode", "icl", "--n", 80, "--out", tmp_path / "h.csv") == 2


def _report(path, ds, method, seed, val):
    rep = metrics.MetricReport(dcr_overfit=val, dcr_p=0.5, shape=val / 2, trend=1 - val, ip_alpha=val,
                               ir_beta=0.5, utility={"linear": val * val}, balanced_score=val)
    rep.meta = {"dataset": ds, "method": method, "seed": seed}
    metrics.save_report(rep, path)
    return path


def test_report_aggregation_round_trip(tmp_path):
    paths = [_report(tmp_path / f"r{i}.json", "d", "m", i, v) for i, v in enumerate([0.2, 0.5, 0.9])]
    assert run("report", "--inputs", *paths, "--out", tmp_path / "a") == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "summary.csv")))
    shape = next(r for r in rows if r["metric"] == "shape")
    vals = np.array([0.1, 0.25, 0.45])
    assert float(shape["mean"]) == pytest.approx(vals.mean(), abs=1e-12)
    assert float(shape["std"]) == pytest.approx(vals.std(ddof=1), abs=1e-12)
    names, pear = metrics.read_matrix_csv(tmp_path / "a" / "correlation_pearson.csv")
    i, j = names.index("dcr_overfit"), names.index("trend")
    assert pear[i, j] == pytest.approx(-1.0, abs=1e-10)
    sp = metrics.read_matrix_csv(tmp_path / "a" / "correlation_spearman.csv")[1]
    assert sp[names.index("dcr_overfit"), names.index("utility_linear")] == 1.0
    first = _files(tmp_path / "a")
    assert run("report", "--inputs", *paths, "--out", tmp_path / "b") == 0
    assert _files(tmp_path / "b") == first


def test_report_single_identity(tmp_path):
    p = _report(tmp_path / "r.json", "d", "m", 0, 0.7)
    assert run("report", "--inputs", p, "--out", tmp_path / "a") == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "summary.csv")))
    assert {r["metric"]: float(r["mean"]) for r in rows}["shape"] == pytest.approx(0.35)
    assert all(float(r["std"]) == 0.0 for r in rows)


@pytest.mark.parametrize("variant,extra", [("S", ["--epochs", 3]),
                                           ("N", ["--desk-tasks", 2, "--validation-tasks", 1, "--epochs", 1])])
def test_ablate_emits_standard_report(tmp_path, variant, extra):
    data = tmp_path / "d.csv"
    write_table(generate_dataset(TaskSpec("gaussian_mixture", 120, 3, 4)), data)
    out = tmp_path / f"{variant}.json"
    assert run("ablate", "--data", data, "--variant", variant, "--n", 80, "--k", 30, *extra, "--out", out) == 0
    doc = json.loads(out.read_text())
    jsonschema.validate(doc, metrics.REPORT_SCHEMA)
    assert doc["meta"]["method"] == f"ablation_{variant}"
    ckpts = sorted((tmp_path / f"ablate_{variant}").glob("ckpt_*.bin"))
    assert len(ckpts) == 2          # step 0 and the last step only
    if variant == "N":
        # no-permute corpus: one identity variant per task
        log = [json.loads(l) for l in (tmp_path / "ablate_N" / "train_log.jsonl").read_text().splitlines()]
        assert {r["dataset"].split("/")[1] for r in log} == {"v0"}


@pytest.mark.slow
def test_desk_smoke_corpus_under_five_minutes(tmp_path):
    import time
    assert run("corpus", "--desk-tasks", 20, "--out", tmp_path / "c") == 0
    t0 = time.perf_counter()
    assert run("pretrain", "--corpus", tmp_path / "c", "--epochs", 20, "--checkpoint-every", 20,
               "--out", tmp_path / "p") == 0
    assert time.perf_counter() - t0 < 300
