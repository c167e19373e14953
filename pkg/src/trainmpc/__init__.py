"""Map-based model predictive control for train motion.

``trackmap`` holds the line description, ``dynamics`` the train model and
path constraints, ``refsolve`` the offline reference optimizer,
``ltv``/``trackmpc`` the online tracking controller and ``simloop`` the
closed-loop scenario harness.
"""
from .dynamics import MassInterval, State, TrainParams
from .qpcore import QpProblem, QpSolution, QpStatus, solve_qp
from .refsolve import InfeasibleLeg, NoConvergence, ReferenceTrajectory, SqpOptions, solve_route
from .simloop import Scenario, SimResult, bundled_scenario, run_scenario
from .trackmap import Map, TractionCondition, demo_map, leg_between, load_map
from .trackmpc import ControllerFault, MpcConfig

__all__ = [
    "MassInterval", "State", "TrainParams",
    "QpProblem", "QpSolution", "QpStatus", "solve_qp",
    "InfeasibleLeg", "NoConvergence", "ReferenceTrajectory", "SqpOptions", "solve_route",
    "Scenario", "SimResult", "bundled_scenario", "run_scenario",
    "Map", "TractionCondition", "demo_map", "leg_between", "load_map",
    "ControllerFault", "MpcConfig",
]
__version__ = "0.1.0"
