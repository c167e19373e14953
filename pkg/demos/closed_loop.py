"""Drive the whole demo line with the tracking controller.

Runs the three bundled scenarios (nominal, weather change after the first
station, 40 s late departure) and writes their traces to ``demo_runs/``.

Run: python demos/closed_loop.py [output_dir]
"""
import sys
from pathlib import Path

from trainmpc import TractionCondition, TrainParams, bundled_scenario, demo_map, run_scenario
from trainmpc.refsolve import solve_route
from trainmpc.simloop import write_results

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs")
track = demo_map()
params = TrainParams()

# References are planned once, for good weather, and shared by all runs.
refs = solve_route(track, TractionCondition.GOOD, params)

results = {}
for name in ("good", "weather", "delay"):
    res = run_scenario(bundled_scenario(name), track, params, refs=refs)
    write_results(res, out / name)
    results[name] = res.metrics
    m = res.metrics
    print(f"{name:8s} max|e_p| {m['max_abs_ep']:7.2f} m   max|e_v| {m['max_abs_ev']:5.2f} m/s   "
          f"max h {m['max_h']:+.1e}   delays " + " ".join(f"{d:4.1f}" for d in m["delays"]))

g, w = results["good"], results["weather"]
print(f"\nWeather change: the tightest adhesion row moves from {g['max_traction_h']:+.3f} "
      f"to {w['max_traction_h']:+.3f} m/s^2 but stays below zero.")
d = results["delay"]
print(f"Late departure: 40 s behind at the origin, {d['delays'][0]:.1f} s late at the first stop; "
      f"position error under 1 m from t = {d['recovery_time']:.0f} s on.")
print(f"\nTraces written to {out.resolve()}")
