"""Deep Q-learning for compiler pass ordering."""

from .actions import ActionSpace, ActionSpec, Catalog, Invocation, build_space, decode, legal_actions
from .agent import Learner, TrainConfig, epsilon, greedy_action, select_action, td_loss
from .environment import BenchmarkPolicy, LlvmBackend, SyntheticBackend, measure_runtime, reward
from .estimator import PassOrderingAgent
from .network import QNetwork
from .orchestrator import RunConfig, evaluate, explore_step, init_run, rollout, run_policy, train
from .replay import ReplayMemory
from .state import ActionHistory, AgentState, StateEncoder, encode_state, fingerprint
from .store import Store

__version__ = "0.1.0"

__all__ = [
    "ActionHistory", "ActionSpace", "ActionSpec", "AgentState", "BenchmarkPolicy", "Catalog",
    "Invocation", "Learner", "LlvmBackend", "PassOrderingAgent", "QNetwork", "ReplayMemory",
    "RunConfig", "StateEncoder", "Store", "SyntheticBackend", "TrainConfig", "build_space",
    "decode", "encode_state", "epsilon", "evaluate", "explore_step", "fingerprint",
    "greedy_action", "init_run", "legal_actions", "measure_runtime", "reward", "rollout",
    "run_policy", "select_action", "td_loss", "train",
]
