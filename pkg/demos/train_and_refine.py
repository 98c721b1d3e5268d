"""Train a tiny model on a synthetic corpus and refine one mask stage by stage.

Takes a minute or two on a laptop core. The tiny model is far too small and
briefly trained to be good; the point is the shape of the pipeline. Pass a
trained checkpoint (for example ``full.crm`` from the acceptance cache) to
skip training and see what a desk model does with the same mask.

Run: python demos/train_and_refine.py [checkpoint.crm]
"""
import sys

import numpy as np

from crm.data import gen_sample
from crm.decoder import CRMConfig
from crm.encoder import EncoderConfig
from crm.inference import default_schedule, refine_multires
from crm.metrics import iou, mba
from crm.training import TrainConfig, load_checkpoint, perturb_mask, synthetic_dataset, train


def report(step, loss, terms):
    if (step + 1) % 50 == 0:
        print(f"step {step + 1:4d}  loss {loss:.4f}")


if len(sys.argv) > 1:
    model = load_checkpoint(sys.argv[1]).to_model()
else:
    dataset = synthetic_dataset(200, 96, seed=0)
    model_cfg = CRMConfig(EncoderConfig(base_channels=8, latent_channels=16, depth=1), hidden=(32, 32, 32, 32))
    cfg = TrainConfig(patch_size=48, total_steps=150, batch_size=4, lr=1e-3, checkpoint_every=0)
    model = train(cfg, dataset, model_cfg, callback=report).to_model()

img, gt = gen_sample(99_999, 256)
coarse = perturb_mask(gt, 0.85, seed=1).astype(np.float32)
stages = []
_, sched = refine_multires(img, coarse, default_schedule(), model, stages=stages, return_schedule=True)

print(f"\ncoarse     IoU {iou(coarse, gt):.4f}  mBA {mba(coarse, gt):.4f}")
for ratio, stage in zip(sched.ratios, stages):
    print(f"ratio {ratio:<5g} IoU {iou(stage, gt):.4f}  mBA {mba(stage, gt):.4f}")
