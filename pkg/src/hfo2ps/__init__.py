"""Online occupancy-measure policy search for adversarial linear mixture MDPs.

Modules:

* ``mdp``: linear mixture models, policies, occupancy measures, dynamic programming.
* ``instances``: instance generators and oblivious reward schedules.
* ``vtr``: confidence radius, variance-aware value-targeted regression, optimistic values.
* ``omd``: occupancy mirror descent over the realizable feasible set.
* ``projection``: generic Bregman projections and Dykstra's method.
* ``harness``: experiment driver, baselines, regret accounting and outputs.
* ``verify``: the invariant suite.
"""

from .harness import ExperimentConfig, RunResult, run_experiment, sweep
from .instances import make_basis_mixture, make_reward_schedule, make_tree_mdp
from .mdp import LinearMixtureModel, RewardFunction, StochasticPolicy
from .omd import build_feasible_set, extract_policy, omd_update
from .vtr import ConfidenceSet, MomentBank, confidence_radius, theory_defaults

__all__ = [
    "ConfidenceSet",
    "ExperimentConfig",
    "LinearMixtureModel",
    "MomentBank",
    "RewardFunction",
    "RunResult",
    "StochasticPolicy",
    "build_feasible_set",
    "confidence_radius",
    "extract_policy",
    "make_basis_mixture",
    "make_reward_schedule",
    "make_tree_mdp",
    "omd_update",
    "run_experiment",
    "sweep",
    "theory_defaults",
]

__version__ = "0.1.0"
