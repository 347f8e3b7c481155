"""
Training a small model and removing rain
========================================

Train the desk-sized network (base width 8) for a few hundred steps on
synthetic pairs, save it, reload it, and compare held-out PSNR/SSIM before
and after. The last part imports a fake pretrained archive into the first
encoder blocks.
"""

import tempfile
import time
from pathlib import Path

import numpy as np

from mcgkt.archive import WeightArchive
from mcgkt.model import ModelConfig, describe, import_ekt, init_model, load_model, save_model
from mcgkt.rain import RainConfig, make_synthetic_dataset
from mcgkt.metrics import psnr, ssim
from mcgkt.train import TrainConfig, build_model, evaluate_model, train

work = Path(tempfile.mkdtemp(prefix="derain_demo_"))
rain = RainConfig()
train_set = make_synthetic_dataset(16, 32, rain, seed=1, prefix="train")
eval_set = make_synthetic_dataset(4, 32, rain, seed=2, prefix="eval")

config = TrainConfig(steps=300, patch_size=32, batch_size=4, seed=0)
model, _ = build_model(ModelConfig.desk(), config)
print(describe(model.config), model.parameter_count(), "parameters")

t0 = time.perf_counter()
result = train(model, train_set, config,
               on_step=lambda s, l: print(f"step {s + 1:4d} loss {l:.5f}") if (s + 1) % 50 == 0 else None)
print(f"{len(result.history)} steps in {time.perf_counter() - t0:.1f}s")

path = save_model(model, work / "desk.mcgw")
model = load_model(path)

before = (np.mean([psnr(p.rainy, p.clean) for _, p in eval_set]),
          np.mean([ssim(p.rainy, p.clean) for _, p in eval_set]))
after = evaluate_model(model, eval_set)
print(f"held-out rainy    {before[0]:.2f} dB  {before[1]:.3f}")
print(f"held-out derained {after[0]:.2f} dB  {after[1]:.3f}")

# pretrained import: stage names follow stage{s}.conv{k}.{weight,bias}
rng = np.random.default_rng(0)
vgg = WeightArchive({
    "stage1.conv1.weight": rng.standard_normal((64, 3, 3, 3)),
    "stage1.conv1.bias": rng.standard_normal(64),
    "stage1.conv2.weight": rng.standard_normal((64, 64, 3, 3)),
})
wide = init_model(ModelConfig(base_channels=64), seed=0)
print(import_ekt(wide, vgg).summary())
print(import_ekt(init_model(ModelConfig.desk()), vgg).summary().splitlines()[0], "(base width 8: widths differ)")
