import numpy as np
import pytest

from sdabn import tensor as T


def param_gradient_error(module, loss_fn, n_coords=6, epsilon=1e-6, seed=0):
    """Worst relative error of analytic vs central-difference gradients over sampled parameter entries."""
    module.set_trainable(True)
    module.zero_grad()
    T.backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.no_grad():
        for name, p in module.named_parameters():
            flat = p.data.reshape(-1)
            for i in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + epsilon
                fp = float(loss_fn().data)
                flat[i] = old - epsilon
                fm = float(loss_fn().data)
                flat[i] = old
                num = (fp - fm) / (2 * epsilon)
                a = float(p.grad.reshape(-1)[i])
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


MICRO = {
    "name": "micro",
    "output_dir": "runs",
    "dataset": {"root": "data", "size": 16, "count": 20, "classes": 3},
    "model": {"blocks": 1, "seg_widths": [4, 6, 8], "den_width": 6, "sft_width": 4, "dilations": [1, 2]},
    "training": {k: {"epochs": 2, "batch_size": 4, "patience": 2} for k in ("bootstrap", "segmentation", "denoising", "joint")},
    "eval": {"batch_size": 4},
}


@pytest.fixture
def micro_root(tmp_path, monkeypatch):
    """Output root with a micro config file and its generated dataset."""
    import yaml

    from sdabn.config import ExperimentConfig
    from sdabn.pipeline import prepare_dataset

    monkeypatch.setenv("SDABN_OUTPUT_ROOT", str(tmp_path))
    cfg_path = tmp_path / "micro.yaml"
    cfg_path.write_text(yaml.safe_dump(MICRO))
    prepare_dataset(ExperimentConfig.load(cfg_path))
    return tmp_path
