"""Write tests/fixtures/golden_v1.bin, the frozen checkpoint-format fixture.

Run only when the format version changes; the test suite compares against the
committed file.
"""
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from egru_lm.checkpoint import Checkpoint, save_checkpoint  # noqa: E402
from egru_lm.core_math import Rng  # noqa: E402
from egru_lm.lm import LmConfig, LmModel  # noqa: E402
from egru_lm.prune import apply_prune_step  # noqa: E402
from egru_lm.train import OptimState  # noqa: E402


def golden_checkpoint():
    cfg = LmConfig(vocab_size=7, embed_dim=3, hidden_dims=(4, 3), dropconnect_p=0.2, dropout_p=0.1)
    model = LmModel.init(cfg, Rng(2024).child("golden"))
    opt = OptimState.zeros_like(model.named_tensors())
    for k, (name, t) in enumerate(sorted(model.named_tensors().items())):
        opt.m[name][...] = (np.arange(t.size).reshape(t.shape) % 5 - 2) / 8 + k
        opt.v[name][...] = (np.arange(t.size).reshape(t.shape) % 3) / 4
    opt.step = 11
    apply_prune_step(model, 0.5, opt)
    return Checkpoint(model, opt, "0" * 64, 11, {"kind": "golden"})


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "golden_v1.bin"
    save_checkpoint(golden_checkpoint(), out)
    print(out)
