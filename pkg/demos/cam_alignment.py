"""Walk through how one target pixel finds its four latent corners.

Run: python demos/cam_alignment.py
"""
import numpy as np

from crm import cam

feat = (4, 5)  # latent grid
target = (9, 13)  # output grid

grid = cam.make_coord_grid(*target)
u, v = cam.project(grid, feat)
print("row projections onto the latent grid:", np.round(u, 3))

c = cam.corner_offsets_and_weights(u, v, feat)
y, x = 4, 6
print(f"\ntarget pixel ({y}, {x})")
for k in range(4):
    row, col = divmod(int(c.index[k, y, x]), feat[1])
    print(f"  corner {k}: latent cell ({row}, {col})  offset {np.round(c.rel[k, :, y, x], 3)}  weight {c.weight[k, y, x]:.4f}")
print("  weights sum to", c.weight[:, y, x].sum())

# border pixels reuse the edge cell, which amounts to replicate padding
print("\ntop-left pixel corner cells:", sorted({int(i) for i in c.index[:, 0, 0]}))
print("max deviation of weight sums from 1:", np.abs(c.weight.sum(axis=0) - 1).max())
