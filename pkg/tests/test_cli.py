import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from sdabn.cli import main
from sdabn.metrics import read_csv


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


@pytest.fixture
def cfg(micro_root):
    return micro_root / "micro.yaml"


def run_dir(root, name="micro-conditioned-x1-gaussian-s50"):
    return root / "runs" / name


def test_generate_refuses_then_forces(cfg, micro_root):
    r = run("generate", "--config", cfg)
    assert r.exit_code == 1 and "--force" in r.output
    before = (micro_root / "data/clean/00000.png").read_bytes()
    r = run("generate", "--config", cfg, "--force", "--seed", "5")
    assert r.exit_code == 0 and "manifest.txt" in r.output
    assert len(list((micro_root / "data/clean").glob("*.png"))) == 20
    assert (micro_root / "data/clean/00000.png").read_bytes() != before


def test_default_generate_counts(tmp_path, monkeypatch):
    monkeypatch.setenv("SDABN_OUTPUT_ROOT", str(tmp_path))
    r = run("generate")
    assert r.exit_code == 0 and "train 256  test 64" in r.output


def test_config_error_exit_code(cfg, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(cfg.read_text() + "\nextra_key: 1\n")
    r = run("train", "--config", bad)
    assert r.exit_code == 2 and "extra_key" in r.output


def test_data_error_exit_code(cfg, micro_root):
    Image.fromarray(np.full((16, 16), 9, dtype=np.uint8), mode="L").save(micro_root / "data/labels/00000.png")
    Image.fromarray(np.full((16, 16), 9, dtype=np.uint8), mode="L").save(micro_root / "data/labels/00001.png")
    r = run("train", "--config", cfg)
    assert r.exit_code == 3


def test_train_eval_and_refusal(cfg, micro_root):
    r = run("train", "--config", cfg)
    assert r.exit_code == 0, r.output
    out = run_dir(micro_root)
    rows = read_csv((out / "metrics.csv").read_text())
    assert {int(x["unit"]) for x in rows} == {0, 1}
    assert (out / "config.yaml").exists()
    assert run("train", "--config", cfg).exit_code == 1
    assert run("train", "--config", cfg, "--force").exit_code == 0

    r = run("eval", "--config", cfg, "--split", "train", "--split", "test", "--dump-images")
    assert r.exit_code == 0, r.output
    rows = read_csv((out / "eval-gaussian-s50.csv").read_text())
    assert {x["split"] for x in rows} == {"train", "test"}
    dumps = sorted(p.name for p in (out / "dumps/test-gaussian-s50").iterdir())
    assert dumps[:2] == sorted(dumps[:2]) and all(n.count("_u") == 1 for n in dumps)

    r = run("eval", "--config", cfg, "--noise-kind", "poisson", "--peak", "255")
    assert r.exit_code == 0
    assert (out / "eval-poisson-p255.csv").exists()


def test_checkpoint_mismatch_exit_code(cfg, micro_root):
    assert run("train", "--config", cfg).exit_code == 0
    ck = next((micro_root / "runs/checkpoints").glob("D1-*.ckpt"))
    seg_ck = next((micro_root / "runs/checkpoints").glob("S1-*.ckpt"))
    ck.write_bytes(seg_ck.read_bytes())
    r = run("eval", "--config", cfg)
    assert r.exit_code == 4


def test_prefix_reuse_keeps_block_one_metrics(cfg, micro_root):
    assert run("train", "--config", cfg, "--blocks", "1").exit_code == 0
    assert run("train", "--config", cfg, "--blocks", "2").exit_code == 0
    one = read_csv((run_dir(micro_root) / "metrics.csv").read_text())
    two = read_csv((run_dir(micro_root, "micro-conditioned-x2-gaussian-s50") / "metrics.csv").read_text())
    pick = lambda rows: [(r["unit"], r["metric"], r["value"]) for r in rows if r["unit"] in ("0", "1")]
    assert pick(one) == pick(two)


def test_reproducible_across_output_roots(cfg, micro_root, tmp_path, monkeypatch):
    texts = []
    for sub in ("a", "b"):
        monkeypatch.setenv("SDABN_OUTPUT_ROOT", str(micro_root))
        root = micro_root / sub
        c = root / "cfg.yaml"
        root.mkdir()
        c.write_text(cfg.read_text().replace("output_dir: runs", f"output_dir: {sub}/runs"))
        assert run("train", "--config", c).exit_code == 0
        assert run("eval", "--config", c).exit_code == 0
        d = micro_root / sub / "runs/micro-conditioned-x1-gaussian-s50"
        texts.append(((d / "metrics.csv").read_bytes(), (d / "eval-gaussian-s50.csv").read_bytes()))
    assert texts[0] == texts[1]


def test_variants_train(cfg, micro_root):
    for args in (["--variant", "plain", "--blocks", "2"], ["--variant", "gt-condition", "--tail-seg"],
                 ["--variant", "img-condition"], ["--variant", "joint"]):
        r = run("train", "--config", cfg, *args)
        assert r.exit_code == 0, (args, r.output)
    joint = read_csv((run_dir(micro_root, "micro-joint-x1-gaussian-s50") / "metrics.csv").read_text())
    assert {r["metric"] for r in joint if r["unit"] != "0"} <= {"miou", "pixel_accuracy", "mean_accuracy"}


def test_report(cfg, micro_root):
    for n in (1, 2, 3):
        assert run("train", "--config", cfg, "--blocks", n).exit_code == 0
    for s in (10, 30):
        assert run("train", "--config", cfg, "--blocks", 1, "--sigma", s).exit_code == 0
    runs = [micro_root / "runs" / f"micro-conditioned-x{n}-gaussian-s50" for n in (1, 2, 3)]
    runs += [micro_root / "runs" / f"micro-conditioned-x1-gaussian-s{s}" for s in (10, 30)]
    r = run("report", *runs, "--out", micro_root / "rep")
    assert r.exit_code == 0, r.output
    rows = read_csv((micro_root / "rep/summary.csv").read_text())
    psnr_units = sorted(int(x["unit"]) for x in rows if x["metric"] == "psnr")
    assert psnr_units == [0, 1, 2, 3]
    assert (micro_root / "rep/test_miou_vs_sigma.png").exists()
    assert (micro_root / "rep/test_psnr_vs_unit.png").exists()
    assert "psnr" in (micro_root / "rep/summary.txt").read_text()


def test_report_errors(micro_root):
    r = run("report", "--out", micro_root / "empty")
    assert r.exit_code == 1 and not (micro_root / "empty").exists()
    r = run("report", micro_root / "runs/ghost", "--out", micro_root / "rep2")
    assert r.exit_code == 1 and "ghost" in r.output and not (micro_root / "rep2").exists()
