"""Action proposers: text parser, scripted replay, softmax-linear policy, remote LLM."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .endpoint import ChatEndpoint
from .environment import (
    ACTION_KINDS,
    ARITY,
    DEGREE,
    FEATURE,
    FINISH,
    NEIGHBOURS,
    RETRIEVE,
    Action,
    Environment,
    State,
    render_scratchpad,
)
from .graph_store import GraphSchema
from .text import content_stem_set, stem_set

N_FEATURES = 9


# ---------------------------------------------------------------------------
# parsing


class ActionParseError(ValueError):
    pass


class UnknownActionError(ActionParseError):
    pass


class ArityError(ActionParseError):
    pass


class UnbalancedBracketsError(ActionParseError):
    pass


_PREFIX = re.compile(r"^\s*Action\s*\d*\s*:\s*", re.IGNORECASE)
_NAMES = {k.casefold(): k for k in ACTION_KINDS}
_NAMES["neighborcheck"] = NEIGHBOURS


def parse_action(text: str) -> Action:
    """Parse ``Name[arg]`` or ``Name[arg1, arg2]``, optionally prefixed by ``Action k:``.

    >>> parse_action("Action 2: NodeDegree[53f4, paper]")
    Action(kind='NodeDegree', args=('53f4', 'paper'))
    """
    body = _PREFIX.sub("", text.strip(), count=1).strip()
    open_at = body.find("[")
    if open_at < 0 or not body.endswith("]") or body.count("[") != body.count("]"):
        raise UnbalancedBracketsError(f"unbalanced brackets in {text!r}")
    name = body[:open_at].strip()
    kind = _NAMES.get(name.casefold())
    if kind is None:
        raise UnknownActionError(f"unknown function {name!r}")
    inner = body[open_at + 1:-1]
    if ARITY[kind] == 1:
        args = (inner.strip(),)
        if kind != FINISH and not args[0]:
            raise ArityError(f"{kind} expects 1 non-empty argument")
    else:
        first, sep, rest = inner.partition(",")
        if not sep or not first.strip() or not rest.strip():
            raise ArityError(f"{kind} expects 2 arguments, got {inner!r}")
        args = (first.strip(), rest.strip())
    return Action(kind, args)


# ---------------------------------------------------------------------------
# proposals and parameters


@dataclass(frozen=True)
class ActionProposal:
    thought: str
    action: Action
    log_prob: float | None = None
    malformed: bool = False

    def __post_init__(self):
        if self.log_prob is not None and self.log_prob > 1e-12:
            raise ValueError("log_prob must be <= 0")


@dataclass(frozen=True)
class PolicyParams:
    weights: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    temperature: float = 1.0

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if w.shape != (N_FEATURES,):
            raise ValueError(f"weights must have shape ({N_FEATURES},)")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def with_weights(self, w: np.ndarray) -> "PolicyParams":
        return PolicyParams(np.asarray(w, dtype=float), self.temperature)

    def to_dict(self) -> dict:
        return {"weights": [float(x) for x in self.weights], "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        return cls(np.asarray(d["weights"], dtype=float), float(d.get("temperature", 1.0)))


def default_thought(a: Action) -> str:
    if a.kind == RETRIEVE:
        return f"I need to locate the node for {a.args[0]} in the graph."
    if a.kind == FEATURE:
        return f"I should read the {a.args[1]} feature of node {a.args[0]}."
    if a.kind == NEIGHBOURS:
        return f"I should list the {a.args[1]} neighbors of node {a.args[0]}."
    if a.kind == DEGREE:
        return f"I should count the {a.args[1]} neighbors of node {a.args[0]}."
    if a.args[0]:
        return f"I have enough evidence to answer: {a.args[0]}."
    return "I could not find the answer."


# ---------------------------------------------------------------------------
# softmax-linear policy


def _referenced_node(s: State, a: Action, env: Environment) -> str | None:
    if a.kind == FINISH:
        return None
    if a.kind == RETRIEVE:
        return env.top_hit(a.args[0])
    return a.args[0]


def featurize(s: State, a: Action, env: Environment) -> np.ndarray:
    """Feature layout: kind one-hot (5), query/arg overlap on stemmed tokens,
    depth fraction, referenced-node-already-visited, bias."""
    f = np.zeros(N_FEATURES)
    f[ACTION_KINDS.index(a.kind)] = 1.0
    q = content_stem_set(s.query)
    arg_toks = stem_set(" ".join(a.args))
    f[5] = len(q & arg_toks) / len(q) if q else 0.0
    f[6] = s.depth / env.cfg.max_depth
    ref = _referenced_node(s, a, env)
    f[7] = 1.0 if ref is not None and ref in s.visited_nodes else 0.0
    f[8] = 1.0
    return f


def feature_matrix(s: State, actions: Sequence[Action], env: Environment) -> np.ndarray:
    return np.stack([featurize(s, a, env) for a in actions])


def softmax_from_features(p: PolicyParams, feats: np.ndarray) -> np.ndarray:
    logits = feats @ p.weights / p.temperature
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def log_softmax_from_features(p: PolicyParams, feats: np.ndarray) -> np.ndarray:
    logits = feats @ p.weights / p.temperature
    m = logits.max()
    return logits - m - np.log(np.exp(logits - m).sum())


class EmptyCandidateSetError(ValueError):
    pass


class ActionNotCandidateError(ValueError):
    pass


def propose_softmax(p: PolicyParams, s: State, env: Environment) -> list[tuple[Action, float]]:
    actions = env.candidate_actions(s)
    if not actions:
        raise EmptyCandidateSetError("no candidate actions")
    probs = softmax_from_features(p, feature_matrix(s, actions, env))
    return list(zip(actions, probs.tolist()))


def log_prob(p: PolicyParams, s: State, a: Action, env: Environment) -> float:
    actions = env.candidate_actions(s)
    try:
        i = actions.index(a)
    except ValueError:
        raise ActionNotCandidateError(f"{a} is not a candidate in this state") from None
    return float(log_softmax_from_features(p, feature_matrix(s, actions, env))[i])


class Policy:
    """Interface used by search, rollouts and the benchmark runner."""

    exposes_log_probs = False

    def candidates(self, s: State, env: Environment, rng: np.random.Generator) -> list[ActionProposal]:
        """Distinct proposals in preference order (used for expansion)."""
        raise NotImplementedError

    def sample(self, s: State, env: Environment, rng: np.random.Generator) -> ActionProposal:
        raise NotImplementedError

    def greedy(self, s: State, env: Environment) -> ActionProposal:
        raise NotImplementedError


class SoftmaxPolicy(Policy):
    exposes_log_probs = True

    def __init__(self, params: PolicyParams | None = None):
        self.params = params or PolicyParams()

    def distribution(self, s: State, env: Environment) -> tuple[list[Action], np.ndarray]:
        actions = env.candidate_actions(s)
        feats = feature_matrix(s, actions, env)
        return actions, log_softmax_from_features(self.params, feats)

    def candidates(self, s, env, rng=None):
        actions, logp = self.distribution(s, env)
        order = np.argsort(-logp, kind="stable")
        return [ActionProposal(default_thought(actions[i]), actions[i], float(logp[i]))
                for i in order]

    def sample(self, s, env, rng):
        actions, logp = self.distribution(s, env)
        probs = np.exp(logp)
        i = int(rng.choice(len(actions), p=probs / probs.sum()))
        return ActionProposal(default_thought(actions[i]), actions[i], float(logp[i]))

    def greedy(self, s, env):
        actions, logp = self.distribution(s, env)
        i = int(np.argmax(logp))  # first maximum = candidate order tie-break
        return ActionProposal(default_thought(actions[i]), actions[i], float(logp[i]))


# ---------------------------------------------------------------------------
# scripted policy


class ScriptedPolicy(Policy):
    """Replays a fixed (thought, action) script, then proposes ``Finish[]``."""

    def __init__(self, script: Sequence[tuple[str, Action]]):
        self.script = list(script)

    def _next(self, s: State) -> ActionProposal:
        if s.depth < len(self.script):
            thought, action = self.script[s.depth]
            return ActionProposal(thought, action)
        return ActionProposal("The script has no further steps.", Action(FINISH, ("",)))

    def candidates(self, s, env, rng=None):
        return [self._next(s)]

    def sample(self, s, env, rng=None):
        return self._next(s)

    def greedy(self, s, env):
        return self._next(s)

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "ScriptedPolicy":
        return cls([(r["thought"], parse_action(r["action"])) for r in records])


# ---------------------------------------------------------------------------
# remote LLM policy


class AllSamplesMalformedError(RuntimeError):
    def __init__(self, proposals: list[ActionProposal]):
        super().__init__("every sampled completion was malformed")
        self.proposals = proposals


_ACTION_LINE = re.compile(r"^\s*Action\s*\d*\s*:", re.IGNORECASE)
_THOUGHT_LINE = re.compile(r"^\s*Thought\s*\d*\s*:\s*", re.IGNORECASE)


def extract_proposal(completion: str) -> ActionProposal:
    """Take the last Action line and the last Thought line before it."""
    lines = completion.splitlines()
    action_at = max((i for i, ln in enumerate(lines) if _ACTION_LINE.match(ln)), default=None)
    thought = ""
    upto = action_at if action_at is not None else len(lines)
    for ln in reversed(lines[:upto]):
        if _THOUGHT_LINE.match(ln):
            thought = _THOUGHT_LINE.sub("", ln).strip()
            break
    if action_at is None:
        return ActionProposal(thought, Action(FINISH, ("",)), malformed=True)
    try:
        action = parse_action(lines[action_at])
    except (ActionParseError, ValueError):
        return ActionProposal(thought, Action(FINISH, ("",)), malformed=True)
    return ActionProposal(thought, action)


def propose_llm(endpoint: ChatEndpoint, s: State, schema: GraphSchema, n: int,
                temp: float) -> list[ActionProposal]:
    if n < 1:
        raise ValueError("n must be >= 1")
    k = s.depth + 1
    prompt = render_scratchpad(s, schema)
    prompt = (prompt + "\n" if not prompt.endswith("\n") else prompt) + f"Thought {k}:"
    completions = endpoint.complete([{"role": "user", "content": prompt}],
                                    n=n, temperature=temp, stop=["Observation"])
    proposals = [extract_proposal(f"Thought {k}: {c}") for c in completions]
    if proposals and all(p.malformed for p in proposals):
        raise AllSamplesMalformedError(proposals)
    return proposals


class LLMPolicy(Policy):
    def __init__(self, endpoint: ChatEndpoint, n: int = 3, temperature: float = 1.0):
        self.endpoint = endpoint
        self.n = n
        self.temperature = temperature

    def _propose(self, s, env, n):
        try:
            return propose_llm(self.endpoint, s, env.schema, n, self.temperature)
        except AllSamplesMalformedError as exc:
            return exc.proposals

    def candidates(self, s, env, rng=None):
        seen, out = set(), []
        for p in self._propose(s, env, self.n):
            if p.action not in seen:
                seen.add(p.action)
                out.append(p)
        return out

    def sample(self, s, env, rng=None):
        return self._propose(s, env, 1)[0]

    def greedy(self, s, env):
        try:
            return propose_llm(self.endpoint, s, env.schema, 1, 0.0)[0]
        except AllSamplesMalformedError as exc:
            return exc.proposals[0]
