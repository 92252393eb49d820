"""Train the toy denoiser for a short while and watch the loss fall.

The shipped checkpoint (checkpoints/toy) came from the same code with the
default TrainConfig (12k steps). Here we stop at STEPS to keep the demo short.
"""
import sys
from pathlib import Path

import numpy as np

from attnguide import scenes
from attnguide.diffusion import DenoiserModel, TrainConfig, build_schedule, train

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 300

images, ids, records = scenes.make_dataset(2000, seed=1)
print("dataset:", images.shape, "first caption:", records[0]["prompt"]["token_ids"])

model = DenoiserModel(seed=0)
cfg = TrainConfig(steps=STEPS, batch=32, warmup=50, log_every=0, target_loss=1.0)


def report(step, loss):
    if (step + 1) % 50 == 0:
        print(f"step {step + 1:5d}  loss {loss:.4f}")


out = Path(__file__).parent / "out" / "demo_checkpoint"
res = train(model, (images, ids), build_schedule(), cfg, out_dir=out, callback=report)
print(f"{STEPS} steps in {res.seconds:.0f}s; mean of last 50 losses {np.mean(res.losses[-50:]):.4f}")
print("checkpoint in", out)
