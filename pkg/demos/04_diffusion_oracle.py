"""
The noise schedule and the mean-only sampler
============================================

With a noise predictor that knows the clean target, the deterministic
reverse chain returns that target exactly.  This isolates the sampler from
the network.
"""
import numpy as np

from rediffuse import diffusion as D
from rediffuse.dataio import gen_pair

sched = D.make_schedule(100, 1e-4, 0.05)
print("alpha_bar at t = 1, 50, 100:", sched.alpha_bar[[1, 50, 100]].round(4))

pair = gen_pair(0)
F0 = pair.ground_truth[None, :, :, None]
oracle = D.oracle_model(F0, sched)
out = D.sample(oracle, F0, F0, sched, np.random.default_rng(0))
print("oracle sampler max error: %.2e" % np.abs(out - F0).max())

# %% one reverse step against its closed form
rng = np.random.default_rng(1)
eps = rng.standard_normal(F0.shape)
t = 37
F_t = D.forward_sample(F0, t, eps, sched)
ab0 = sched.alpha_bar[t - 1]
closed = np.sqrt(ab0) * F0 + np.sqrt(sched.alpha[t]) * (1 - ab0) / np.sqrt(1 - sched.alpha_bar[t]) * eps
print("reverse_step vs closed form: %.2e" % np.abs(D.reverse_step(F_t, t, eps, sched) - closed).max())
