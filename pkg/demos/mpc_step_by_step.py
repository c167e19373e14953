"""One controller step at a time, with a disturbed start.

The train leaves the second station 5 m behind the planned position and
1 m/s too slow; the printout shows how the correction decays.

Run: python demos/mpc_step_by_step.py
"""
from trainmpc import TractionCondition, TrainParams, demo_map
from trainmpc.ltv import sample_reference
from trainmpc.refsolve import solve_route
from trainmpc.trackmpc import MpcConfig, MpcState, Plant, mpc_step

track = demo_map()
params = TrainParams()
cfg = MpcConfig()
ref = solve_route(track, TractionCondition.GOOD, params, legs=[1])[0]
sref = sample_reference(ref, cfg.t_step, track, params)
mpc = MpcState(sref, track, params)

# start mid-leg, off the reference
j0 = 40
mpc.j = j0
x0 = sref.x(j0)
plant = Plant(track, params, params.masses.m_max, state=(x0[0] - 5.0, x0[1] - 1.0),
              t=sref.t[j0])
print(" t[s]   e_p[m]  e_v[m/s]  u_ref    u")
for _ in range(25):
    j = mpc.j
    x = plant.state
    u, info = mpc_step(mpc, x, TractionCondition.GOOD, cfg)
    print(f"{plant.t:5.0f} {x.p - sref.p[j]:8.3f} {x.v - sref.v[j]:8.3f} "
          f"{sref.u[j]:6.3f} {u:6.3f}")
    plant.advance(u, cfg.t_step)
