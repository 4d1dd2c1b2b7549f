"""How a station's noise level moves its kriging weight.

Five stations around a target. We raise the nugget sd of station 2 step by
step and print every station's weight in the kriging mean. The noisier
station loses weight; the others pick up the slack.

Run:  python demos/03_kriging_weights.py
"""
import numpy as np

from crowdwind.gp.model import kriging_weights

lat = np.array([52.45, 52.60, 52.50, 52.35, 52.70])
lon = np.array([-7.60, -7.40, -7.52, -7.45, -7.70])
target = (52.5, -7.5)

print("nugget sd of s2 |" + "".join(f"   w_s{k}" for k in range(5)) + " |  sum")
for s in (0.1, 0.2, 0.3, 0.45, 0.6, 1.0):
    nug = np.full(5, 0.3)
    nug[2] = s
    w = kriging_weights(*target, lat, lon, phi=150.0, sigma_z=0.7, nugget_sd=nug)[0]
    print(f"{s:15.2f} |" + "".join(f"{v:8.3f}" for v in w) + f" | {w.sum():.3f}")
