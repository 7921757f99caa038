"""Independent numpy evaluation of the hand-checkable example values frozen
into the C++ unit tests. Run: python3 tests/oracle/derive_values.py"""
import numpy as np


def bilinear(p, y, x):
    h, w = p.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    v = 0.0
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            if 0 <= yy < h and 0 <= xx < w:
                v += (1 - abs(y - yy)) * (1 - abs(x - xx)) * p[yy, xx]
    return v


plane = np.array([[1.0, 2.0], [3.0, 4.0]])

# Bilinear coordinate gradient at (0.5, 0.5) by central differences.
h = 1e-4
gy = (bilinear(plane, 0.5 + h, 0.5) - bilinear(plane, 0.5 - h, 0.5)) / (2 * h)
gx = (bilinear(plane, 0.5, 0.5 + h) - bilinear(plane, 0.5, 0.5 - h)) / (2 * h)
print("bilinear grad_pt (0.5,0.5):", round(gy, 8), round(gx, 8))

# Resize 2x2 -> 1x1 with the align-corners-false map.
print("resize 2x2->1x1:", bilinear(plane, 0.5 * 2 / 1 - 0.5, 0.5 * 2 / 1 - 0.5))

# Whole-map RoI (0,0)-(1,1), one bin, two samples per axis.
y1, x1, y2, x2, n = 0.0, 0.0, 1.0, 1.0, 2
pts = [(y1 + (iy + 0.5) * (y2 - y1) / n, x1 + (ix + 0.5) * (x2 - x1) / n) for iy in range(n) for ix in range(n)]
print("pool points:", pts)
print("pool whole map:", np.mean([bilinear(plane, y, x) for y, x in pts]))

# 4x4 ramp v = 4y + x, RoI right half (x 2..3, all rows), 2x2 output.
ramp = np.arange(16, dtype=float).reshape(4, 4)
rx1, ry1, rx2, ry2, oh, ow = 2, 0, 3, 3, 2, 2
out = np.zeros((oh, ow))
for i in range(oh):
    for j in range(ow):
        y = ry1 - 0.5 + (i + 0.5) * (ry2 - ry1 + 1) / oh
        x = rx1 - 0.5 + (j + 0.5) * (rx2 - rx1 + 1) / ow
        y = min(max(y, ry1), ry2)
        x = min(max(x, rx1), rx2)
        out[i, j] = bilinear(ramp, y, x)
print("crop ramp right half 2x2:", out.tolist())

# Dense conv: all-ones 3x3 input, 3x3 kernel of 1/9, pad 1.
x = np.ones((3, 3))
xp = np.pad(x, 1)
k = np.full((3, 3), 1 / 9)
o = np.array([[np.sum(xp[r:r + 3, c:c + 3] * k) for c in range(3)] for r in range(3)])
print("dense conv center/corner:", o[1, 1], o[0, 0], "4/9 =", 4 / 9)

# ERF of a 3x3 conv output at the center of a 7x7 image: |w| at the taps.
rng = np.random.default_rng(3)
w = rng.normal(size=(3, 3))
erf = np.zeros((7, 7))
erf[2:5, 2:5] = np.abs(w)
print("erf taps sum:", erf.sum(), "nonzero:", int((erf != 0).sum()))

# Tensor file: alloc((1,1,1,1), 2.5).
import struct
buf = b"DCN2TENS" + struct.pack("<4I", 1, 1, 1, 1) + struct.pack("<f", 2.5)
print("tensor bytes:", len(buf), "tail:", buf[-4:].hex(), "truncated error offset:", len(buf) - 1)
