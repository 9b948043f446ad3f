"""Tree-search question answering over text-attributed graphs."""

from .environment import Action, EnvConfig, Environment, State, Step, Trajectory
from .graph_store import Graph, GraphSchema, RetrievalIndex, build_index, load_graph
from .mcts import HeuristicEvaluator, MctsConfig, search
from .policy import PolicyParams, ScriptedPolicy, SoftmaxPolicy, parse_action
from .reward import RewardBreakdown, total_reward

__version__ = "0.1.0"

__all__ = [
    "Action", "EnvConfig", "Environment", "Graph", "GraphSchema", "HeuristicEvaluator",
    "MctsConfig", "PolicyParams", "RetrievalIndex", "RewardBreakdown", "ScriptedPolicy",
    "SoftmaxPolicy", "State", "Step", "Trajectory", "build_index", "load_graph",
    "parse_action", "search", "total_reward",
]
