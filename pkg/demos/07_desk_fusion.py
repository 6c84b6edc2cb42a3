"""
Train a small denoiser and fuse held-out pairs
==============================================

A short version of the desk experiment.  Pass an epoch count to train
longer (the full run uses 300 epochs on 64 pairs).
"""
import sys

import numpy as np

from rediffuse import dataio, metrics
from rediffuse.diffusion import make_schedule, sample
from rediffuse.train import TrainConfig, train
from rediffuse.unet import Denoiser, UNetConfig

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
cfg = UNetConfig()
sched = make_schedule(cfg.T)
data = dataio.stack_pairs([dataio.gen_pair(s) for s in range(64)])

state = train(data, cfg, TrainConfig(epochs=epochs), sched,
              on_epoch=lambda r, s: print(f"epoch {r.epoch:3d}  loss {r.loss:.3f}"))
print("loss ratio last/first: %.3f" % (state.history[-1].loss / state.history[0].loss))

gt, a, b = dataio.stack_pairs([dataio.gen_pair(10_000 + s) for s in range(8)])
fused = sample(Denoiser(state.params, cfg, sched), a, b, sched, np.random.default_rng(0))
ours = np.mean([metrics.ms_ssim(fused[i], gt[i]) for i in range(len(gt))])
avg = np.mean([metrics.ms_ssim((a[i] + b[i]) / 2, gt[i]) for i in range(len(gt))])
print(f"MS-SSIM vs ground truth: model {ours:.4f}, pixel average {avg:.4f}")
