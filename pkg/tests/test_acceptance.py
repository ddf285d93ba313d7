"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture.

Criterion 6 trains the desk profile (configs/desk.yaml) end to end and is by
far the slowest test here.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from sdabn import metrics as M
from sdabn import tensor as T
from sdabn.cli import main
from sdabn.config import ExperimentConfig
from sdabn.models import SftParams, build_block, sdb_forward, sft_forward
from sdabn.noise import add_poisson_noise
from sdabn.tensor import Tensor
from sdabn.training import Checkpoint

from conftest import param_gradient_error
from test_cascade import plain_segmentation_gradient_zero, prefix_consistent, single_block_reduction, skip_connection_live
from test_metrics import segmentation_oracle_agrees
from test_models import SMALL, sft_annihilation_exact, sft_identity_exact
from test_noise import LEVELS, gaussian_residual_ok

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
GRAD_TOL = 1e-4


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else ""))
        assert ok, detail
    return emit


# ---- 1. gradients


def op_gradient_errors():
    rng = np.random.default_rng(100)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    r4 = rng.normal(size=(2, 4, 6, 6))
    r3 = rng.normal(size=(2, 3, 6, 6))
    b = rng.normal(size=(1, 3, 6, 6))
    labels = rng.integers(0, 3, size=(2, 6, 6))
    labels[0, 0, 0] = 255
    dot = lambda t, r: T.sum(T.mul(t, Tensor(r)))
    checks = {
        "conv2d/input": lambda t: dot(T.conv2d(t, Tensor(w), padding=2, dilation=2), r4),
        "conv2d/weight": (lambda t: dot(T.conv2d(Tensor(x), t, Tensor(np.zeros(4)), stride=1, padding=1), r4), w),
        "conv2d/stride2": lambda t: dot(T.conv2d(t, Tensor(w), padding=1, stride=2), r4[:, :, :3, :3]),
        "relu": lambda t: dot(T.relu(t), r3),
        "add": lambda t: T.sum(T.mul(T.add(t, Tensor(b)), T.add(t, Tensor(b)))),
        "sub": lambda t: T.sum(T.mul(T.sub(t, Tensor(b)), T.sub(t, Tensor(b)))),
        "mul": lambda t: T.sum(T.mul(T.mul(t, Tensor(b)), T.mul(t, Tensor(b)))),
        "scale": lambda t: dot(T.scale(t, 0.3), r3),
        "mean": lambda t: T.mean(T.mul(t, t)),
        "concat/slice": lambda t: dot(T.slice_channels(T.concat_channels([Tensor(r3), t]), 2, 5), r3),
        "upsample": (lambda t: dot(T.upsample_nearest(t), np.tile(r3, (1, 1, 2, 2))), x),
        "softmax": lambda t: dot(T.softmax_channels(t), r3),
        "mse": lambda t: T.mse_loss(t, Tensor(r3)),
        "cross_entropy": lambda t: T.cross_entropy_loss(t, labels),
    }
    errors = {}
    for name, check in checks.items():
        f, point = check if isinstance(check, tuple) else (check, x)
        errors[name] = T.finite_difference_check(f, point, epsilon=1e-5, max_coords=40)
    return errors


def sft_and_sdb_gradient_errors():
    rng = np.random.default_rng(101)
    sft = SftParams(3, [4], 5, rng)
    f, cond, r = rng.normal(size=(1, 4, 6, 6)), rng.random((1, 3, 6, 6)), rng.normal(size=(1, 4, 6, 6))
    errors = {
        "sft/features": T.finite_difference_check(lambda t: T.sum(T.mul(sft_forward(t, Tensor(cond), sft), Tensor(r))), f),
        "sft/condition": T.finite_difference_check(lambda t: T.sum(T.mul(sft_forward(Tensor(f), t, sft), Tensor(r))),
                                                   cond, max_coords=40),
    }
    block = build_block(2, "conditioned", 3, rng, seg_widths=(3, 4, 4), den_width=4, sft_width=3, dilations=(1, 2))
    x, y, tgt = rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8))
    loss = lambda: T.mse_loss(sdb_forward(block, Tensor(x), Tensor(y))[1], Tensor(tgt))
    errors["sdb/parameters"] = param_gradient_error(block, loss, n_coords=2)
    errors["sdb/input"] = T.finite_difference_check(
        lambda t: T.mse_loss(sdb_forward(block, t, Tensor(y))[1], Tensor(tgt)), x, max_coords=24)
    return errors


def test_criterion_1_gradient_correctness(verdict):
    start = time.perf_counter()
    errors = {**op_gradient_errors(), **sft_and_sdb_gradient_errors()}
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < GRAD_TOL and elapsed <= 10.0
    verdict(1, "finite-difference gradients", ok,
            f"{len(errors)} checks, worst {worst} {errors[worst]:.2e}, {elapsed:.1f} s")


# ---- 2. SFT


def test_criterion_2_sft_identity_and_annihilation(verdict):
    ident, annih = sft_identity_exact(), sft_annihilation_exact()
    verdict(2, "SFT identity and annihilation", ident and annih, f"identity {ident}, annihilation {annih}")


# ---- 3. metrics


def test_criterion_3_metric_oracles(verdict):
    seg_ok = segmentation_oracle_agrees(n_pairs=100)
    x = np.random.default_rng(3).random((16, 16, 3)) * 0.8
    psnr_err = abs(M.psnr(x, x + 0.1) - 20.0)
    ssim_err = abs(M.ssim(x, x) - 1.0)
    ok = seg_ok and psnr_err <= 1e-6 and ssim_err <= 1e-9
    verdict(3, "metric oracles", ok, f"segmentation exact {seg_ok}, psnr err {psnr_err:.1e}, ssim err {ssim_err:.1e}")


# ---- 4. noise


def test_criterion_4_noise_statistics(verdict):
    gauss = {s: gaussian_residual_ok(s, seed=2024) == (True, True) for s in LEVELS}
    clean = np.full((400, 400), 0.5)
    y = add_poisson_noise(clean, 255, 11)
    poisson = abs(y.mean() - 0.5) <= 0.005 and abs(y.var() - 0.5 / 255) <= 0.05 * 0.5 / 255
    verdict(4, "noise statistics", all(gauss.values()) and poisson, f"gaussian {gauss}, poisson peak 255 {poisson}")


# ---- 5. cascade


def test_criterion_5_cascade_structure(verdict):
    parts = {
        "single block": single_block_reduction(),
        "prefix": prefix_consistent(),
        "skip live": skip_connection_live(),
        "plain seg grad zero": plain_segmentation_gradient_zero(),
    }
    verdict(5, "cascade structure", all(parts.values()), ", ".join(f"{k} {v}" for k, v in parts.items()))


# ---- 6. trends


def desk_trends(root: Path):
    from sdabn import pipeline as P

    cfg = ExperimentConfig.load(DESK).with_overrides(
        {"output_dir": str(root / "runs"), "dataset": {"root": str(root / "data")}})
    P.prepare_dataset(cfg)
    cascade, _ = P.train_progressive(cfg)
    units = P.evaluate_config(cfg, cascade)
    gt = cfg.with_overrides({"model": {"variant": "gt-condition", "blocks": 1, "tail_segmentation": True}})
    gt_cascade, _ = P.train_progressive(gt)
    gt_units = P.evaluate_config(gt, gt_cascade)

    images, _, idx = P.load_split(cfg, "test")
    noisy = P.noisy_inputs(images, idx, cfg.noise, np.float64)
    input_psnr = float(np.mean([M.psnr(images[i], noisy[i]) for i in range(len(images))]))
    return input_psnr, units, gt_units


def trend_verdicts(input_psnr, units, gt_units):
    u1, u2, u3 = units
    gt_seg = gt_units[-1].miou
    return {
        "a: D1 gain >= 3 dB": (u1.psnr - input_psnr >= 3.0, f"{input_psnr:.2f} -> {u1.psnr:.2f} dB"),
        "b: seg on denoised +0.5 pt": (u2.miou - u1.miou >= 0.005, f"mIoU {u1.miou:.4f} -> {u2.miou:.4f}"),
        "c: psnr non-decreasing": (u2.psnr - u1.psnr >= -0.05 and u3.psnr - u2.psnr >= -0.05,
                                   f"{u1.psnr:.2f}, {u2.psnr:.2f}, {u3.psnr:.2f} dB"),
        "c: miou non-decreasing": (u2.miou - u1.miou >= -0.003 and u3.miou - u2.miou >= -0.003,
                                   f"{u1.miou:.4f}, {u2.miou:.4f}, {u3.miou:.4f}"),
        "d: ground-truth condition best": (gt_seg > u2.miou, f"{gt_seg:.4f} vs {u2.miou:.4f}"),
    }


def test_criterion_6_trend_reproduction(verdict, tmp_path):
    start = time.perf_counter()
    parts = trend_verdicts(*desk_trends(tmp_path))
    elapsed = time.perf_counter() - start
    detail = "; ".join(f"{k} {'ok' if ok else 'FAIL'} [{d}]" for k, (ok, d) in parts.items())
    verdict(6, "trend reproduction on the desk profile", all(ok for ok, _ in parts.values()),
            f"{detail}; {elapsed / 60:.1f} min")


# ---- 7. ablations


def test_criterion_7_ablation_harness(verdict, micro_root):
    counts = {}
    for v in ("conditioned", "img-condition"):
        counts[v] = build_block(2, v, 4, np.random.default_rng(0), **SMALL).num_parameters()
    result = CliRunner().invoke(main, ["train", "--config", str(micro_root / "micro.yaml"), "--variant", "joint"])
    rows = []
    csv = micro_root / "runs/micro-joint-x1-gaussian-s50/metrics.csv"
    if csv.exists():
        rows = [r for r in M.read_csv(csv.read_text()) if r["unit"] != "0"]
    joint_ok = result.exit_code == 0 and {r["metric"] for r in rows} == {"miou", "pixel_accuracy", "mean_accuracy"}
    ok = counts["conditioned"] == counts["img-condition"] and joint_ok
    verdict(7, "ablation harness", ok, f"parameter counts {counts}, joint emits segmentation metrics {joint_ok}")


# ---- 8. reproducibility


def test_criterion_8_reproducibility(verdict, micro_root):
    cfg = str(micro_root / "micro.yaml")
    run_dir = micro_root / "runs/micro-conditioned-x1-gaussian-s50"
    outputs, checkpoints = [], []
    for _ in range(2):
        for args in (["train", "--config", cfg, "--force", "--retrain"], ["eval", "--config", cfg, "--force"]):
            assert CliRunner().invoke(main, args).exit_code == 0
        outputs.append(((run_dir / "metrics.csv").read_bytes(), (run_dir / "eval-gaussian-s50.csv").read_bytes()))
        checkpoints.append({p.name: p.read_bytes() for p in (micro_root / "runs/checkpoints").glob("*.ckpt")})
    csv_ok = outputs[0] == outputs[1]
    ck_ok = checkpoints[0] == checkpoints[1] and len(checkpoints[0]) == 3
    for path in sorted((micro_root / "runs/checkpoints").glob("*.ckpt")):
        raw = path.read_bytes()
        ck_ok &= Checkpoint.load(path).to_bytes() == raw == Checkpoint.from_bytes(raw).to_bytes()
    verdict(8, "reproducibility", csv_ok and ck_ok, f"csv identical {csv_ok}, retrained checkpoints and round-trips bitwise {ck_ok}")
