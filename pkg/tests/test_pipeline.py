import numpy as np
import pytest

from sdabn import pipeline as P
from sdabn import training as TR
from sdabn.config import ExperimentConfig
from sdabn.errors import CheckpointMismatchError, UsageError
from sdabn.models import SegNetTiny
from sdabn.noise import derive_seed


def cfg_for(root, **model):
    return ExperimentConfig.load(root / "micro.yaml").with_overrides({"model": model} if model else {})


def test_plan_order_and_sharing(micro_root):
    cond = P.plan_stages(cfg_for(micro_root, blocks=3))
    assert [s.label for s in cond] == ["S0", "S1", "D1", "S2", "D2", "S3", "D3"]
    gt = P.plan_stages(cfg_for(micro_root, blocks=1, variant="gt-condition", tail_segmentation=True))
    assert [s.label for s in gt] == ["S0", "S1", "D1", "S2"]
    assert gt[1].key == cond[1].key  # the first segmenter does not depend on the variant
    assert gt[2].key != cond[2].key
    one = P.plan_stages(cfg_for(micro_root, blocks=1))
    assert [s.key for s in one] == [s.key for s in cond[:3]]
    plain = P.plan_stages(cfg_for(micro_root, blocks=2, variant="plain"))
    assert [s.label for s in plain] == ["S0", "D1", "D2"]
    assert [s.label for s in P.plan_stages(cfg_for(micro_root, variant="joint"))] == ["J2"]


def test_single_block_run_is_composition(micro_root):
    cfg = cfg_for(micro_root)
    _, ckpts = P.train_progressive(cfg)
    stages = P.plan_stages(cfg)
    cascade = P.build_cascade(cfg)
    data = P.load_training_data(cfg)
    boot = SegNetTiny(3, np.random.default_rng(derive_seed(cfg.seed, 999)), cfg.model["seg_widths"])
    s0 = TR.train_clean_segmentation(boot, data, cfg.schedule("bootstrap"), P._stage_seed(cfg, stages[0]))
    s1 = TR.train_segmentation_stage(1, cascade, data, cfg.schedule("segmentation"), P._stage_seed(cfg, stages[1]),
                                     init=s0.tensors)
    d1 = TR.train_denoising_stage(1, cascade, data, cfg.schedule("denoising"), P._stage_seed(cfg, stages[2]))
    for manual, stage, saved in zip((s0, s1, d1), stages, ckpts):
        manual.config_digest = stage.key
        assert manual.to_bytes() == saved.to_bytes()


def test_resume_reuses_completed_stages(micro_root):
    cfg = cfg_for(micro_root, blocks=2)
    P.train_progressive(cfg)
    ckdir = P.checkpoint_dir(cfg)
    files = {p.name: p.read_bytes() for p in ckdir.glob("*.ckpt")}
    d2 = next(n for n in files if n.startswith("D2-"))
    (ckdir / d2).unlink()
    for n in files:
        if n != d2:
            (ckdir / n).write_bytes(files[n])  # unchanged content, fresh mtime
    P.train_progressive(cfg)
    assert {p.name: p.read_bytes() for p in ckdir.glob("*.ckpt")} == files


def test_checkpoint_key_mismatch(micro_root):
    cfg = cfg_for(micro_root)
    P.train_progressive(cfg)
    stage = P.plan_stages(cfg)[2]
    path = P.checkpoint_dir(cfg) / stage.filename()
    ck = TR.Checkpoint.load(path)
    ck.config_digest = "0" * 64
    ck.save(path)
    with pytest.raises(CheckpointMismatchError):
        P.load_trained_cascade(cfg)
    path.unlink()
    with pytest.raises(UsageError):
        P.load_trained_cascade(cfg)


def test_evaluate_units_and_dumps(micro_root, tmp_path):
    cfg = cfg_for(micro_root, blocks=2, tail_segmentation=True)
    cascade, _ = P.train_progressive(cfg)
    recs = P.evaluate_config(cfg, cascade, dump_dir=tmp_path / "dump")
    assert [r.unit_index for r in recs] == [1, 2, 3]
    assert recs[2].psnr is None and recs[2].miou is not None
    assert all(0 <= r.miou <= 1 and -1 <= r.ssim <= 1 for r in recs[:2])
    names = sorted(p.name for p in (tmp_path / "dump").iterdir())
    n_test = len(P.load_split(cfg, "test")[2])
    assert len(names) == n_test * 5
    assert any(n.endswith("_u3_seg.png") for n in names) and any(n.endswith("_u2_denoised.png") for n in names)


def test_joint_variant_reports_segmentation_only(micro_root):
    cfg = cfg_for(micro_root, variant="joint")
    cascade, ckpts = P.train_progressive(cfg)
    assert [c.stage for c in ckpts] == ["J"]
    recs = P.evaluate_config(cfg, cascade)
    assert recs and all(r.psnr is None and r.ssim is None and r.miou is not None for r in recs)
    progressive = P.build_cascade(cfg_for(micro_root, tail_segmentation=True))
    assert {k: v.shape for k, v in progressive.state_dict().items()} == {k: v.shape for k, v in cascade.state_dict().items()}


def test_missing_dataset(tmp_path, monkeypatch):
    monkeypatch.setenv("SDABN_OUTPUT_ROOT", str(tmp_path))
    with pytest.raises(UsageError):
        P.train_progressive(ExperimentConfig.from_dict({"dataset": {"root": "nowhere"}}))
