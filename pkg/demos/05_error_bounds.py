"""
Measured equivariance errors against their certified bounds
===========================================================

Fields are sampled from trigonometric sums whose gradient is bounded by a
known G.  For the 45 degree element of C_8, maxpool and bilinear upsampling
stay under 2 sqrt2 G delta and 2 (sqrt2 + 1) G delta; group norm is exact.
"""
import numpy as np

from rediffuse import harness as H
from rediffuse.suites import field_spec, op_scaling

print(" G     delta   maxpool / bound     upsample / bound")
for G in (0.5, 1.0, 2.0):
    for delta in (0.05, 0.1):
        spec = field_spec(delta, G)
        mp = H.measure_maxpool(spec, 0, 8, 1)
        up = H.measure_upsample(spec, 0, 8, 1)
        print(f"{G:4.1f}  {delta:5.2f}   {mp.error:.4f} / {mp.bound:.4f}   {up.error:.4f} / {up.bound:.4f}")

f = np.random.default_rng(0).standard_normal((16, 16, 8, 4))
print("\ngroup norm error, k=1..7:", max(H.measure_group_norm(f, 8, k).error for k in range(1, 8)))

# %% how the errors shrink with the mesh
for name in ("maxpool", "upsample"):
    rep = op_scaling(name, 8, 0.1)
    print(f"{name}: log-log slope {rep.extra['slope']:.2f} over deltas {rep.extra['deltas']}")
