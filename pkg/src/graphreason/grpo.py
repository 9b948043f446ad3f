"""Group-relative policy optimisation for the softmax-linear policy.

Objective for a group of N trajectories sampled under behaviour params::

    J(w) = 1/N sum_i 1/|tau_i| sum_t min(rho_it A_i, clip(rho_it, 1-eps, 1+eps) A_i)
           - beta * KL(pi_w || pi_ref)

with rho_it = exp(log pi_w(a_t|s_t) - stored behaviour log-prob) and the KL
averaged exactly over the candidate sets of every visited state.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .environment import Environment, State, Trajectory
from .mcts import HeuristicEvaluator, MctsConfig, search
from .policy import (
    PolicyParams,
    SoftmaxPolicy,
    feature_matrix,
    log_softmax_from_features,
)
from .reward import total_reward


class MissingLogProbsError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, last_good: PolicyParams, metrics: list[dict]):
        super().__init__(f"weights diverged at iteration {iteration}")
        self.iteration = iteration
        self.last_good = last_good
        self.metrics = metrics


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    learning_rate: float = 0.05
    iterations: int = 200
    norm_eps: float = 1e-8
    seed: int = 0
    mode: str = "rollout"  # or "mcts"
    divergence_limit: float = 1e6

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.iterations < 0 or self.learning_rate < 0:
            raise ValueError("iterations and learning_rate must be >= 0")
        if self.mode not in ("rollout", "mcts"):
            raise ValueError("mode must be 'rollout' or 'mcts'")


@dataclass
class TrajectoryGroup:
    query_id: str
    trajectories: list[Trajectory]
    rewards: list[float]
    behavior_params: PolicyParams | None = None
    gold: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.trajectories) < 2:
            raise ValueError("a group needs at least two trajectories")
        if len(self.rewards) != len(self.trajectories):
            raise ValueError("one reward per trajectory is required")


# ---------------------------------------------------------------------------
# scalar pieces


def advantages(rewards: Sequence[float], norm_eps: float = 1e-8) -> list[float]:
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("need at least two rewards")
    std = float(r.std())  # population std
    if std < norm_eps:
        return [0.0] * r.size
    return ((r - r.mean()) / std).tolist()


def importance_ratio(logp_new: float, logp_old: float) -> float:
    if not (math.isfinite(logp_new) and math.isfinite(logp_old)):
        raise ValueError("log-probs must be finite")
    return math.exp(logp_new - logp_old)


def _kl_rows(logp: np.ndarray, logq: np.ndarray) -> float:
    p = np.exp(logp)
    if np.any((p > 0) & ~np.isfinite(logq)):
        raise ValueError("reference assigns zero probability to a reachable action")
    return float(np.sum(p * (logp - logq)))


def kl_divergence(p_new: PolicyParams, p_ref: PolicyParams,
                  states: Sequence[State], env: Environment) -> float:
    """Exact mean categorical KL(pi_new || pi_ref) over the given states."""
    if not states:
        raise ValueError("states must be non-empty")
    total = 0.0
    for s in states:
        F = feature_matrix(s, env.candidate_actions(s), env)
        total += _kl_rows(log_softmax_from_features(p_new, F),
                          log_softmax_from_features(p_ref, F))
    return total / len(states)


# ---------------------------------------------------------------------------
# objective and gradient


@dataclass
class _StepTerm:
    traj: int
    feats: np.ndarray
    index: int
    logp_old: float


def _prepare(group: TrajectoryGroup, env: Environment) -> tuple[list[_StepTerm], list[int]]:
    terms: list[_StepTerm] = []
    lengths = []
    for i, t in enumerate(group.trajectories):
        if t.logps is None or len(t.logps) != len(t.steps) or any(x is None for x in t.logps):
            raise MissingLogProbsError(
                "trajectory lacks behaviour log-probs (LLM-sourced?); "
                "use export_group to hand it to an external trainer")
        states = t.states[: len(t.steps)] if len(t.states) >= len(t.steps) else \
            env.replay(t.query, t.steps)[:-1]
        for s, st, lp in zip(states, t.steps, t.logps):
            actions = env.candidate_actions(s)
            try:
                idx = actions.index(st.action)
            except ValueError:
                raise MissingLogProbsError(
                    f"{st.action} is not in the candidate set; the policy cannot score it") from None
            terms.append(_StepTerm(i, feature_matrix(s, actions, env), idx, float(lp)))
        lengths.append(len(t.steps))
    return terms, lengths


def _evaluate(group: TrajectoryGroup, p_new: PolicyParams, p_ref: PolicyParams,
              cfg: GrpoConfig, env: Environment, want_grad: bool):
    terms, lengths = _prepare(group, env)
    adv = advantages(group.rewards, cfg.norm_eps)
    n = len(group.trajectories)
    tau = p_new.temperature
    surrogate = 0.0
    kl = 0.0
    g_sur = np.zeros_like(p_new.weights)
    g_kl = np.zeros_like(p_new.weights)
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    for term in terms:
        L = lengths[term.traj]
        A = adv[term.traj]
        logp = log_softmax_from_features(p_new, term.feats)
        rho = math.exp(logp[term.index] - term.logp_old)
        unclipped = rho * A
        clipped = min(max(rho, lo), hi) * A
        surrogate += min(unclipped, clipped) / (n * L)
        logq = log_softmax_from_features(p_ref, term.feats)
        kl += _kl_rows(logp, logq)
        if want_grad:
            p = np.exp(logp)
            fbar = p @ term.feats
            # the clipped branch is constant in w; ties go to the unclipped one
            if unclipped <= clipped:
                score = (term.feats[term.index] - fbar) / tau
                g_sur += rho * A * score / (n * L)
            diff = logp - logq
            g_kl += (p * diff) @ (term.feats - fbar) / tau
    m = max(len(terms), 1)
    kl /= m
    g_kl /= m
    obj = surrogate - cfg.kl_beta * kl
    return obj, kl, g_sur - cfg.kl_beta * g_kl


def grpo_objective(group: TrajectoryGroup, p_new: PolicyParams, p_ref: PolicyParams,
                   cfg: GrpoConfig, env: Environment) -> float:
    return _evaluate(group, p_new, p_ref, cfg, env, want_grad=False)[0]


def grpo_gradient(group: TrajectoryGroup, p_new: PolicyParams, p_ref: PolicyParams,
                  cfg: GrpoConfig, env: Environment) -> np.ndarray:
    return _evaluate(group, p_new, p_ref, cfg, env, want_grad=True)[2]


# ---------------------------------------------------------------------------
# collection and training


def rollout(query: str, env: Environment, policy: SoftmaxPolicy,
            rng: np.random.Generator) -> Trajectory:
    s = env.reset(query)
    states, logps = [], []
    while not s.terminal:
        p = policy.sample(s, env, rng)
        states.append(s)
        logps.append(p.log_prob)
        s, _, _ = env.step(s, p.thought, p.action)
    return Trajectory.from_state(s, states, logps=logps)


def collect_group(query: str, gold: Sequence[str], env: Environment, params: PolicyParams,
                  n: int, *, rng: np.random.Generator, query_id: str = "",
                  mode: str = "rollout", mcts_cfg: MctsConfig | None = None) -> TrajectoryGroup:
    if n < 2:
        raise ValueError("n must be >= 2")
    policy = SoftmaxPolicy(params)
    trajs = []
    for _ in range(n):
        if mode == "rollout":
            t = rollout(query, env, policy, rng)
        elif mode == "mcts":
            base = mcts_cfg or MctsConfig(simulations_per_move=20, max_depth=env.cfg.max_depth)
            cfg = MctsConfig(**{**asdict(base), "seed": int(rng.integers(2**31))})
            t = search(query, env, policy, HeuristicEvaluator(), cfg).trajectory
            t.states = env.replay(query, t.steps)[:-1]
        else:
            raise ValueError(f"unknown mode {mode!r}")
        t.question_id = query_id
        t.reward = total_reward(t, gold)
        trajs.append(t)
    return TrajectoryGroup(query_id, trajs, [t.reward.total for t in trajs], params, list(gold))


def train(dataset: Sequence, env: Environment, cfg: GrpoConfig,
          init: PolicyParams | None = None,
          mcts_cfg: MctsConfig | None = None) -> tuple[PolicyParams, list[dict]]:
    """Sample a question, collect a group under the current params, take one
    gradient-ascent step. ``dataset`` holds QARecord-like objects."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    params = init or PolicyParams()
    ref = params
    qrng = random.Random(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    metrics: list[dict] = []
    for it in range(cfg.iterations):
        rec = dataset[qrng.randrange(len(dataset))]
        group = collect_group(rec.question, rec.answers, env, params, cfg.group_size,
                              rng=rng, query_id=rec.id, mode=cfg.mode, mcts_cfg=mcts_cfg)
        obj, kl, grad = _evaluate(group, params, ref, cfg, env, want_grad=True)
        new_w = params.weights + cfg.learning_rate * grad
        metrics.append({"iteration": it, "mean_reward": float(np.mean(group.rewards)),
                        "objective": obj, "kl": kl, "grad_norm": float(np.linalg.norm(grad))})
        if not np.all(np.isfinite(new_w)) or np.max(np.abs(new_w)) > cfg.divergence_limit:
            raise DivergenceError(it, params, metrics)
        params = params.with_weights(new_w)
    return params, metrics


# ---------------------------------------------------------------------------
# export / import


def export_group(group: TrajectoryGroup, path: str | Path) -> None:
    if not group.trajectories:
        raise ValueError("cannot export an empty group")
    adv = advantages(group.rewards)
    with open(path, "w", encoding="utf-8") as fh:
        header = {"group": {"query_id": group.query_id, "gold": group.gold,
                            "rewards": group.rewards, "advantages": adv,
                            "behavior_params": group.behavior_params.to_dict()
                            if group.behavior_params else None}}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for t, a in zip(group.trajectories, adv):
            d = t.to_dict()
            d["advantage"] = a
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def load_group(path: str | Path) -> TrajectoryGroup:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(x) for x in fh if x.strip()]
    if not lines or "group" not in lines[0]:
        raise ValueError(f"{path}: missing group header")
    h = lines[0]["group"]
    trajs = [Trajectory.from_dict(d) for d in lines[1:]]
    bp = h.get("behavior_params")
    group = TrajectoryGroup(h["query_id"], trajs, [float(r) for r in h["rewards"]],
                            PolicyParams.from_dict(bp) if bp else None, list(h.get("gold", [])))
    want = advantages(group.rewards)
    if any(abs(a - b) > 1e-9 for a, b in zip(want, h["advantages"])):
        raise ValueError(f"{path}: stored advantages do not match the rewards")
    return group
