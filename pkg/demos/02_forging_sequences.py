"""
Synthetic forging sequences
===========================

Generates one upsetting process, looks at its timing labels and checks how
well the part volume is kept through the three stages.
"""

import numpy as np

from pctgan.forging import fit_normalization, apply_normalization, generate_process, solid_volume

proc = generate_process(7)
frames, timings = proc.arrays()
print("frames:", frames.shape, "  stage boundaries:", proc.boundaries)

# a label row is a soft position between consecutive stage markers
for i in proc.boundaries:
    print("step %3d  timing %s" % (i, np.round(timings[i], 3)))

# volume of the revolved shape, relative to the first frame
vols = np.array([solid_volume(f[0]) for f in frames])
print("worst volume drift: %.2f%%" % (100 * np.max(np.abs(vols / vols[0] - 1))))

# physics channels are clipped at a high percentile and mapped to [-1, 1]
stats = fit_normalization(frames)
norm = apply_normalization(frames, stats)
print("thresholds:", np.round(stats.thresholds, 4))
print("normalized range: [%.2f, %.2f]" % (norm.min(), norm.max()))
