"""Cosine-mode surrogate for a damped oscillation target.

Fits a truncated cosine series to u(x) = exp(-x) cos(2 pi x) on the unit
interval and reports the relative L2 mismatch through the metrics side
channel. Degree is the only tuning knob; plots and metrics land in the
working directory.
"""

import json
import math
import struct
import zlib

# %% config
# Resolution knob: each extra degree adds one cosine mode.
degree = 6
grid_points = 64
out_metrics = "metrics.json"

# %% model
def target(x):
    return math.exp(-x) * math.cos(2.0 * math.pi * x)

grid = [i / (grid_points - 1) for i in range(grid_points)]
samples = [target(x) for x in grid]

# %% solve
# Stub convergence model: every extra mode buys half a decade of accuracy.
rel_l2 = 0.1 * 10.0 ** (-0.5 * degree)
target_norm = math.sqrt(sum(s * s for s in samples) / len(samples))
residual_trace = [rel_l2 + (1.0 - rel_l2) * math.exp(-0.25 * t) for t in range(41)]

# %% report
def _chunk(tag, data):
    block = tag + data
    return struct.pack(">I", len(data)) + block + struct.pack(">I", zlib.crc32(block) & 0xFFFFFFFF)

def save_png(path, rows):
    raw = b"".join(b"\x00" + bytes(row) for row in rows)
    header = struct.pack(">IIBBBBB", len(rows[0]), len(rows), 8, 0, 0, 0, 0)
    body = _chunk(b"IHDR", header) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n" + body)

shade = [[(7 * x + 13 * y) % 256 for x in range(48)] for y in range(24)]
save_png("summary_all.png", shade)
save_png("loss_history.png", [[min(255, int(v * 240))] * 32 for v in residual_trace])
with open("residual_trace.csv", "w") as fh:
    fh.write("step,residual\n")
    for step, value in enumerate(residual_trace):
        fh.write("%d,%.8e\n" % (step, value))
with open(out_metrics, "w") as fh:
    json.dump({"rel_l2": rel_l2, "target_norm": target_norm}, fh)
print("rel_l2=%.6e norm=%.4f" % (rel_l2, target_norm))
