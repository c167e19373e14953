"""Plan the first leg of the demo line offline and look at the result.

Run: python demos/reference_leg.py
"""
import numpy as np

from trainmpc import TrainParams, TractionCondition, demo_map, leg_between
from trainmpc.dynamics import constraint_rows, simulate_open_loop
from trainmpc.refsolve import compute_reference

track = demo_map()
params = TrainParams()
leg = leg_between(track, 0)
print(f"Leg 0: {leg.length:.0f} m in {leg.duration:.0f} s "
      f"(mean speed {leg.length / leg.duration:.1f} m/s)")

for cond in (TractionCondition.GOOD, TractionCondition.BAD):
    ref = compute_reference(leg, track, cond, params)
    info = ref.info
    h = constraint_rows(ref.p, ref.v, ref.u, track, cond, params.masses, params)
    print(f"\n{cond.value} weather: {info['iterations']} SQP iterations, "
          f"max shooting defect {info['max_defect']:.1e}")
    print(f"  top speed {ref.v.max():.2f} m/s, stops {leg.end_pos - ref.p[-1]:.2f} m "
          f"short of the platform mark")
    print(f"  tightest traction row {h[:, 2:4].max():+.3f} m/s^2 (negative = margin left)")

    # The lever sequence alone, replayed on the nonlinear model, should land
    # the train at the station as well.
    traj = simulate_open_loop((leg.start_pos, 0.0), ref.lever_at, leg.departure_time,
                              leg.arrival_time, 0.1, params.m_nominal, track, params)
    print(f"  open-loop replay ends at {traj.p[-1]:.2f} m with v = {traj.v[-1]:.3f} m/s")

    # coarse text profile: speed every 10 s
    idx = np.arange(0, ref.t.size, 100)
    print("  t[s]  " + " ".join(f"{ref.t[i]:5.0f}" for i in idx))
    print("  v[m/s]" + " ".join(f"{ref.v[i]:5.1f}" for i in idx))
