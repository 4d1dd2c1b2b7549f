"""Why a separate noise variance per station group pays off.

Simulates the 49-station layout (23 MET, 19 reliable personal stations and 7
stations that carry no signal at all). It then cross-validates over the MET
stations with three fits: MET only, all stations with one shared nugget, and
one nugget per group. The grouped fit learns that the junk group is noise and
down-weights it; the pooled fit has to inflate its single nugget for everyone.

Run:  python demos/02_grouped_nugget.py [seed]
"""
import sys
import time

from crowdwind.evaluation import losocv
from crowdwind.simulation import SimulationConfig, simulate, strategy_spec

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
sim = simulate(SimulationConfig(seed=seed, sigma_pws1=0.4))
data = sim.to_gp_data()
print(f"{data.n_sites} stations x {data.n_times} hours; true noise sd MET 0.2, PWS-1 0.4, "
      f"PWS-2 pure noise (sd {sim.config.junk_scale})\n")

t0 = time.perf_counter()
specs = [strategy_spec(s, "igp") for s in ("reliable", "pooled", "grouped")]
for rep in losocv(data, specs):
    h = rep.full_fit.hyper
    nug = ", ".join(f"{g} {v:.2f}" for g, v in h.group_sd.items())
    print(f"{rep.model_id:9s} RMSE {rep.rmse:.3f}  CRPS {rep.crps_sqrt:.3f}  range {h.phi:5.0f} km  "
          f"sigma_z {h.sigma_z:.2f}  nugget sd: {nug}")
print(f"\n({time.perf_counter() - t0:.1f} s)")
