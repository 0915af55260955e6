import csv
import json
import shutil
from dataclasses import replace

import numpy as np
import pytest

from taskquant import codec
from taskquant.harness import (ABLATION_SCHEMES, ConfigError, ExperimentConfig, Workspace, ablation_suite,
                               dump_config, load_config, parse_config, reevaluate, run_experiment, sweep_r)
from taskquant.harness import experiment
from taskquant.harness.cli import main
from taskquant.harness.experiment import ReportRow
from taskquant.trainer import DivergenceError

TINY = """\
# small enough for a few seconds per run
n_train = 40
n_val = 6
H = 32
W = 32
m = 2
epochs = 1
finetune_epochs = 1
precision = double
schemes = VQVAE, GOSVAE_STAR
seeds = 1
segmenter_epochs = 8
"""


def tiny_cfg(out_dir, **kw):
    return replace(parse_config(TINY + f"out_dir = {out_dir}\n"), **kw)


@pytest.fixture(scope="module")
def tiny_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("report")
    cfg = tiny_cfg(out)
    ws = Workspace(cfg, reuse_checkpoints=False)
    return cfg, ws, run_experiment(cfg, workspace=ws)


# -- configuration

def test_config_roundtrip():
    cfg = parse_config(TINY + "rs = 2, 4\nlr = 0.001\npretrain_checkpoint = none\n")
    assert cfg.dataset.H == 32 and cfg.rs == (2, 4) and cfg.train.lr == 0.001
    assert cfg.schemes == ("VQVAE", "GOSVAE_STAR")
    assert parse_config(dump_config(cfg)) == cfg


def test_default_config_roundtrip():
    cfg = ExperimentConfig()
    assert parse_config(dump_config(cfg)) == cfg
    assert cfg.train.lr == 2e-3


def test_config_comments_and_blank_lines():
    cfg = parse_config("\n# nothing\n  m = 3   # trailing\n\n")
    assert cfg.dataset.m == 3


@pytest.mark.parametrize("text", [
    "bogus = 1",
    "m = 3\nm = 4",
    "m = three",
    "schemes = VQVAE, NOPE",
    "rs = 5",
    "seeds = ",
    "precision = half",
    "no equals sign",
    "scheme = VQVAE",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.txt")


# -- reports

def test_empty_scheme_list_gives_header_only_report(tmp_path):
    cfg = tiny_cfg(tmp_path, schemes=())
    report = run_experiment(cfg)
    assert report.rows == [] and report.runs == []
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert len(lines) == 1
    assert lines[0].split(",")[:4] == ["scheme", "r", "K", "params_count"]
    assert not list(tmp_path.glob("segmenter-*"))


def test_report_columns(tiny_report):
    cfg, _, report = tiny_report
    with open(cfg.out_dir + "/report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["scheme"] for r in rows] == ["VQVAE", "GOSVAE_STAR"]
    for col in ("scheme", "r", "K", "params_count", "payload_bytes", "kib", "miou", "accuracy", "mse", "perceptual"):
        assert col in rows[0]
    for row, mem in zip(rows, report.rows):
        assert float(row["kib"]) == pytest.approx(float(row["payload_bytes"]) / 1024)
        assert float(row["miou"]) == mem.miou
        assert int(row["payload_header_bytes"]) == 21 + 64 < float(row["payload_bytes"])
    with open(cfg.out_dir + "/report.json") as fh:
        doc = json.load(fh)
    assert doc["kind"] == "report" and len(doc["rows"]) == 2
    assert "confusion" in doc["conventions"]["miou"]


def test_metric_selection_drops_columns(tiny_report, tmp_path):
    _, _, report = tiny_report
    report.write(tmp_path, ("miou",))
    header = (tmp_path / "report.csv").read_text().splitlines()[0].split(",")
    assert "miou" in header and "mse" not in header and "payload_bytes" not in header


def test_row_matches_reevaluation(tiny_report):
    cfg, ws, report = tiny_report
    for run in report.runs:
        tc = cfg.run_config(run.scheme, run.r, run.seed)
        ev = reevaluate(ws.out / run.checkpoint, tc, ws)
        assert abs(ev.miou - run.miou) <= 1e-9 * max(1.0, abs(run.miou))
        assert ev.payload_bytes == run.payload_bytes
        row = report.row(run.scheme, run.r)
        assert abs(row.miou - ev.miou) <= 1e-9 * max(1.0, abs(ev.miou))


def test_star_reuses_pixel_pretraining(tiny_report):
    cfg, ws, report = tiny_report
    base = ws.train_run(cfg.run_config("VQVAE", 4, 1))
    star = ws.train_run(cfg.run_config("GOSVAE_STAR", 4, 1))
    strip = lambda row: {k: v for k, v in row.items() if k != "phase"}
    assert star.curves.rows[0]["phase"] == "pretrain"
    assert strip(star.curves.rows[0]) == strip(base.curves.rows[0])


def test_report_is_deterministic(tmp_path):
    cfg = tiny_cfg(tmp_path)
    run_experiment(cfg, workspace=Workspace(cfg, reuse_checkpoints=False))
    first = {p.relative_to(tmp_path): p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
    shutil.rmtree(tmp_path)
    run_experiment(cfg, workspace=Workspace(cfg, reuse_checkpoints=False))
    second = {p.relative_to(tmp_path): p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
    assert first.keys() == second.keys()
    assert all(first[k] == second[k] for k in first)


def test_stored_checkpoints_are_reused(tiny_report):
    cfg, ws, report = tiny_report
    again = run_experiment(cfg, write=False)
    assert [r.checkpoint_digest for r in again.runs] == [r.checkpoint_digest for r in report.runs]
    assert again.rows == report.rows


def test_failures_are_recorded_and_run_continues(tmp_path, monkeypatch):
    cfg = tiny_cfg(tmp_path, schemes=("VQVAE", "GOSVAE"))
    real = experiment.train

    def flaky(tc, *a, **kw):
        if tc.scheme == "GOSVAE":
            raise DivergenceError("loss became nan")
        return real(tc, *a, **kw)

    monkeypatch.setattr(experiment, "train", flaky)
    report = run_experiment(cfg, workspace=Workspace(cfg, reuse_checkpoints=False))
    assert report.diverged
    bad = report.row("GOSVAE")
    assert bad.n_diverged == 1 and bad.n_seeds == 0 and "nan" in bad.errors
    assert report.row("VQVAE").n_seeds == 1
    assert json.loads((tmp_path / "report.json").read_text())["rows"][1]["miou"] is None


def test_seed_spread_is_reported():
    runs = [experiment.RunRecord("VQVAE", 4, s, 64, 10, 100.0, 200.0, m, 90.0, 0.1, 0.2, "", "")
            for s, m in ((1, 50.0), (2, 60.0), (3, 70.0))]
    row = experiment.aggregate("VQVAE", 4, runs)
    assert isinstance(row, ReportRow)
    assert row.miou == 60.0 and row.miou_std == 10.0
    assert (row.miou_min, row.miou_max, row.n_seeds) == (50.0, 70.0, 3)


def test_sweep_rejects_indivisible_ratio(tmp_path):
    with pytest.raises(ValueError):
        sweep_r(tiny_cfg(tmp_path), rs=(4, 64))


def test_workspace_must_match(tiny_report, tmp_path):
    _, ws, _ = tiny_report
    other = tiny_cfg(tmp_path, seed=9)
    with pytest.raises(ValueError):
        run_experiment(other, workspace=ws)


def test_ablation_scheme_set(tmp_path):
    assert set(ABLATION_SCHEMES) == {"ABL_CE", "ABL_KLD", "ABL_VQ_KLD", "ABL_VQ_LPIPS", "ABL_KLD_LPIPS", "GOSVAE"}
    cfg = tiny_cfg(tmp_path, dataset=replace(tiny_cfg(tmp_path).dataset, n_train=8))
    ws = Workspace(cfg)
    ws._F = _cheap_segmenter(cfg)
    report = ablation_suite(cfg, workspace=ws)
    assert [r.scheme for r in report.rows] == list(ABLATION_SCHEMES)
    assert (tmp_path / "ablation.csv").exists()


def _cheap_segmenter(cfg):
    from taskquant.nets import build_segmenter
    from taskquant.task import FrozenSegmenter
    return FrozenSegmenter(build_segmenter(cfg.dataset.m, np.random.default_rng(0), np.float64), cfg.dataset.m)


# -- command line

@pytest.fixture(scope="module")
def cli_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    return d


def run_cli(cli_dir, *args):
    return main(["--config", str(cli_dir / "tiny.cfg"), "--out-dir", str(cli_dir / "out"), *args])


def test_cli_end_to_end(cli_dir, capsys):
    out = cli_dir / "out"
    assert run_cli(cli_dir, "gen-data") == 0
    assert len((out / "data" / "manifest.txt").read_text().splitlines()) == 46
    assert run_cli(cli_dir, "pretrain-task") == 0
    info = json.loads((out / "segmenter.json").read_text())
    assert info["val_accuracy"] > 90

    capsys.readouterr()
    assert run_cli(cli_dir, "train", "--scheme", "VQVAE") == 0
    rec = json.loads(capsys.readouterr().out)
    ckpt = out / rec["checkpoint"]
    assert ckpt.exists()

    assert run_cli(cli_dir, "eval", "--checkpoint", str(ckpt), "--scheme", "VQVAE") == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["miou"] == pytest.approx(rec["miou"], rel=1e-9)

    pkt = out / "scene.gosm"
    assert run_cli(cli_dir, "encode", "--checkpoint", str(ckpt), "--scheme", "VQVAE",
                   "--scene", str(out / "data" / "val" / "00000.gosd"), "--output", str(pkt)) == 0
    capsys.readouterr()
    assert main(["inspect-packet", str(pkt)]) == 0
    meta = json.loads(capsys.readouterr().out)
    assert (meta["H"], meta["W"], meta["r"], meta["K"]) == (32, 32, 4, 64)
    assert meta["symbol_count"] == 64 and meta["coder_id"] == codec.HUFFMAN

    img, lab = out / "recon.ppm", out / "labels.pgm"
    assert run_cli(cli_dir, "decode", "--checkpoint", str(ckpt), "--scheme", "VQVAE",
                   "--packet", str(pkt), "--output", str(img), "--labels", str(lab)) == 0
    assert img.read_bytes().startswith(b"P6 32 32 255\n") and len(img.read_bytes()) == 13 + 32 * 32 * 3
    assert lab.read_bytes().startswith(b"P5 32 32 255\n")

    assert run_cli(cli_dir, "report") == 0
    assert (out / "report.csv").exists() and (out / "config.txt").exists()
    assert parse_config((out / "config.txt").read_text()).out_dir == str(out)


def test_cli_fixed_coder_by_index(cli_dir, tmp_path):
    assert run_cli(cli_dir, "train", "--scheme", "VQVAE") == 0
    ckpt = next((cli_dir / "out" / "checkpoints").glob("VQVAE_r4_s1_*.gosw"))
    pkt = tmp_path / "p.gosm"
    assert run_cli(cli_dir, "encode", "--checkpoint", str(ckpt), "--scheme", "VQVAE", "--index", "2",
                   "--coder", "0", "--output", str(pkt)) == 0
    # 64 six-bit symbols in 48 bytes after the 21-byte header
    assert len(pkt.read_bytes()) == 21 + 48
    assert run_cli(cli_dir, "encode", "--checkpoint", str(ckpt), "--scheme", "VQVAE", "--index", "99",
                   "--output", str(pkt)) == 2


def test_cli_flags_after_subcommand(cli_dir, tmp_path):
    rc = main(["pretrain-task", "--config", str(cli_dir / "tiny.cfg"), "--out-dir", str(tmp_path)])
    assert rc == 0 and (tmp_path / "segmenter.json").exists()


def test_cli_exit_codes(cli_dir, tmp_path, monkeypatch):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert main(["--config", str(bad), "gen-data"]) == 2
    assert main(["--config", str(tmp_path / "missing.cfg"), "gen-data"]) == 2
    assert main(["inspect-packet", str(tmp_path / "missing.gosm")]) == 4
    junk = tmp_path / "junk.gosm"
    junk.write_bytes(b"GOSM" + bytes(10))
    assert main(["inspect-packet", str(junk)]) == 4

    def boom(*a, **kw):
        raise DivergenceError("loss became inf")

    monkeypatch.setattr(experiment, "train", boom)
    assert main(["--config", str(cli_dir / "tiny.cfg"), "--out-dir", str(tmp_path / "div"),
                 "train", "--scheme", "GOSVAE"]) == 3
    assert main(["--config", str(cli_dir / "tiny.cfg"), "--out-dir", str(tmp_path / "div"), "report"]) == 3
