"""IoU versus boundary accuracy on a mask that is only wrong along its edge.

Run: python demos/mba_metric.py
"""
import numpy as np
from scipy import ndimage

from crm.metrics import band_radii, iou, mba

gt = np.zeros((256, 256), bool)
gt[64:192, 48:208] = True

print("band radii at 256x256:", band_radii(gt.shape))
for px in (1, 2, 4, 8):
    grown = ndimage.binary_dilation(gt, iterations=px)
    print(f"dilated by {px} px: IoU {iou(grown, gt):.4f}  mBA {mba(grown, gt):.4f}")

# a hole far from the boundary costs IoU but leaves boundary accuracy alone
holed = gt.copy()
holed[120:136, 120:136] = False
print(f"interior hole:      IoU {iou(holed, gt):.4f}  mBA {mba(holed, gt):.4f}")
