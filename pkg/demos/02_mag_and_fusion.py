"""The two fusion steps on small hand-made inputs.

MAG shifts each token embedding by an image-conditioned displacement whose
norm is capped relative to the token; the region fusion lets each text token
attend over image regions.

    python3 demos/02_mag_and_fusion.py
"""
# %%
import numpy as np

from mxt.fusion import fuse
from mxt.mag import alpha_values, mag_shift
from mxt.tensor import Tensor

# %% the clamp factor: alpha = min(beta * |T| / |H|, 1)
T = np.array([[3.0, 4.0]])
H = np.array([[0.0, 3.0]])
for beta in (0.1, 0.5, 1.0, 10.0):
    a = alpha_values(T, H, beta)[0]
    shifted = mag_shift(Tensor(T, dtype=np.float64), Tensor(H, dtype=np.float64), beta).data[0]
    print(f"beta={beta:<5} alpha={a:.4f} shifted={shifted}")

# %% a zero displacement leaves the token untouched
print("H = 0:", mag_shift(Tensor(T), Tensor(np.zeros_like(H)), 1.0).data)

# %% region fusion: attention weights of 3 tokens over 4 regions
rng = np.random.default_rng(0)
d, x = 8, 6
p = {"W_Q": Tensor(rng.normal(size=(d, d))), "W_K": Tensor(rng.normal(size=(x, d))),
     "W_V": Tensor(rng.normal(size=(x, d))), "W_O": Tensor(rng.normal(size=(d, d)) * 0.1),
     "ln.g": Tensor(np.ones(d)), "ln.b": Tensor(np.zeros(d))}
text, regions = Tensor(rng.normal(size=(3, d))), rng.normal(size=(4, x))
F_A, w = fuse(text, Tensor(regions), p, h=2, return_weights=True)
np.set_printoptions(precision=3, suppress=True)
print("weights per head (tokens x regions):\n", w.data.reshape(2, 3, 4))

# %% shuffling the regions only shuffles the weights; the fused output is unchanged
perm = [2, 0, 3, 1]
F_B = fuse(text, Tensor(regions[perm]), p, h=2)
print("max change after shuffling regions:", np.abs(F_A.data - F_B.data).max())
