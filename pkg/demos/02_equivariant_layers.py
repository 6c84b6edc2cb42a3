"""
The equivariant layer zoo and its parameter budget
==================================================

Lifting and group convolutions share one base kernel across the m rotated
copies, so they learn 1/m of the weights a plain convolution of the same
unrolled width would.  Each op commutes with the field rotation.
"""
import numpy as np

from rediffuse import eqops
from rediffuse.groups import RotationGroup, rotate_field
from rediffuse.unet import UNetConfig, conv_parameter_table

rng = np.random.default_rng(0)
m = 4
g = RotationGroup(m)

lift = eqops.EqKernel("lifting", rng.standard_normal((3, 1, 3, 3)), m)
gconv = eqops.EqKernel("group", rng.standard_normal((3, 3, m, 3, 3)), m)
gn = eqops.GroupNormParams(np.ones(3), np.zeros(3), 1)

img = rng.standard_normal((16, 16, 1))
f = eqops.lift_conv(img, lift)
print("lifted field shape (H, W, m, C):", f.shape)

# %% every op commutes with a quarter turn
ops = {
    "group_conv": lambda x: eqops.group_conv(x, gconv),
    "group_norm": lambda x: eqops.group_norm(x, gn),
    "silu": eqops.silu,
    "maxpool": eqops.eq_maxpool,
    "upsample": eqops.eq_upsample,
}
for name, op in ops.items():
    err = np.abs(op(rotate_field(f, g, 1)) - rotate_field(op(f), g, 1)).max()
    print(f"{name:10s} equivariance error {err:.2e}")

# %% parameter sharing, layer by layer, for the desk U-Net
print("\nlayer                 learned   plain   ratio")
for name, count, regular in conv_parameter_table(UNetConfig())[:6]:
    print(f"{name:20s} {count:8d} {regular:7d}   1/{regular // count}")
