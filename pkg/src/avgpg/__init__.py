"""Projected policy gradient for average-reward tabular MDPs."""
from avgpg.mdp import GeneratorSpec, TabularMdp, generate_mdp, make_policy
from avgpg.evaluation import evaluate, average_reward
from avgpg.gradient import policy_gradient
from avgpg.optimizer import RunConfig, run_pga, project_policy
from avgpg.oracle import solve_optimal
from avgpg.complexity import assemble_constants

__all__ = [
    "GeneratorSpec", "TabularMdp", "generate_mdp", "make_policy", "evaluate", "average_reward",
    "policy_gradient", "RunConfig", "run_pga", "project_policy", "solve_optimal", "assemble_constants",
]
__version__ = "0.1.0"
