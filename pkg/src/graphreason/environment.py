"""Episode state machine: executes graph actions and records the reasoning history."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .graph_store import (
    DEFAULT_NEIGHBOR_CAP,
    EmptyQueryError,
    Graph,
    GraphError,
    GraphSchema,
    RetrievalIndex,
    UnknownEdgeTypeError,
    UnknownFeatureError,
    UnknownNodeError,
    build_index,
)
from .text import STOPWORDS, is_number, words_with_case

RETRIEVE = "RetrieveNode"
FEATURE = "NodeFeature"
NEIGHBOURS = "NeighbourCheck"
DEGREE = "NodeDegree"
FINISH = "Finish"

ACTION_KINDS = (RETRIEVE, FEATURE, NEIGHBOURS, DEGREE, FINISH)
ARITY = {RETRIEVE: 1, FEATURE: 2, NEIGHBOURS: 2, DEGREE: 2, FINISH: 1}
GRAPH_KINDS = frozenset(ACTION_KINDS[:4])


class TerminalStateError(RuntimeError):
    """Raised when stepping or expanding a finished episode."""


@dataclass(frozen=True)
class Action:
    kind: str
    args: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in ARITY:
            raise ValueError(f"unknown action kind {self.kind!r}")
        args = tuple(str(a).strip() for a in self.args)
        if len(args) != ARITY[self.kind]:
            raise ValueError(f"{self.kind} takes {ARITY[self.kind]} argument(s), got {len(args)}")
        # Finish[] is the explicit give-up answer
        if self.kind != FINISH and not all(args):
            raise ValueError(f"{self.kind} arguments must be non-empty")
        object.__setattr__(self, "args", args)

    @classmethod
    def of(cls, kind: str, *args: str) -> "Action":
        return cls(kind, tuple(args))

    def render(self) -> str:
        return f"{self.kind}[{', '.join(self.args)}]"

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class Step:
    index: int
    thought: str
    action: Action
    observation: str
    env_error: str | None = None
    malformed: bool = False
    # top-k retrieval hits, kept for diagnostics only
    retrieval: tuple[tuple[str, float], ...] = ()

    def to_dict(self) -> dict:
        d = {
            "thought": self.thought,
            "action": self.action.render(),
            "observation": self.observation,
            "env_error": self.env_error,
        }
        if self.malformed:
            d["malformed"] = True
        if self.retrieval:
            d["retrieval"] = [[nid, score] for nid, score in self.retrieval]
        return d


@dataclass(frozen=True)
class State:
    query: str
    steps: tuple[Step, ...] = ()
    visited_nodes: tuple[str, ...] = ()
    current_node: str | None = None
    terminal: bool = False
    final_answer: str | None = None
    depth_exhausted: bool = False

    @property
    def depth(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class EnvConfig:
    max_depth: int = 10
    neighbor_cap: int = DEFAULT_NEIGHBOR_CAP
    retrieval_k: int = 1
    retrieve_always: bool = False
    keyword_cap: int = 4

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.neighbor_cap < 1 or self.retrieval_k < 1:
            raise ValueError("neighbor_cap and retrieval_k must be >= 1")


def query_spans(query: str, cap: int) -> list[str]:
    """Maximal runs of consecutive non-stopword words, original casing kept.

    When there are more than ``cap`` runs the longest ones are kept (earlier
    runs win ties); the result is in query order.
    """
    spans: list[list[str]] = []
    run: list[str] = []
    for w in words_with_case(query):
        if w.casefold() in STOPWORDS:
            if run:
                spans.append(run)
                run = []
        else:
            run.append(w)
    if run:
        spans.append(run)
    ranked = sorted(range(len(spans)), key=lambda i: (-len(spans[i]), i))[:cap]
    return [" ".join(spans[i]) for i in sorted(ranked)]


class Environment:
    """Deterministic transition function over an immutable graph."""

    def __init__(self, graph: Graph, cfg: EnvConfig | None = None,
                 index: RetrievalIndex | None = None):
        self.graph = graph
        self.cfg = cfg or EnvConfig()
        self.index = index if index is not None else build_index(graph)
        self._top_hits: dict[str, str | None] = {}

    def top_hit(self, text: str) -> str | None:
        """Best retrieval match for ``text`` (memoized; the index is immutable)."""
        if text not in self._top_hits:
            try:
                hits = self.index.retrieve(text, 1)
            except ValueError:
                hits = []
            self._top_hits[text] = hits[0][0] if hits else None
        return self._top_hits[text]

    @property
    def schema(self) -> GraphSchema:
        return self.graph.schema

    def reset(self, query: str) -> State:
        if not query or not query.strip():
            raise ValueError("query must be non-empty")
        return State(query=query)

    def step(self, s: State, thought: str, a: Action, *,
             malformed: bool = False) -> tuple[State, str, bool]:
        if s.terminal:
            raise TerminalStateError("cannot step a terminal state")
        index = s.depth + 1
        visited = list(s.visited_nodes)
        current = s.current_node
        error = None
        retrieval: tuple[tuple[str, float], ...] = ()
        final_answer = None
        finished = False

        def focus(nid: str, visit: bool = True) -> None:
            # visited = subject of a successful action; walking onto a node is not a visit
            nonlocal current
            current = nid
            if visit and nid not in visited:
                visited.append(nid)

        try:
            if a.kind == RETRIEVE:
                hits = self.index.retrieve(a.args[0], max(self.cfg.retrieval_k, 1))
                retrieval = tuple(hits)
                if not hits:
                    raise LookupError(f"no node matches {a.args[0]!r}")
                focus(hits[0][0])
                obs = f"The ID of this retrieval target node is {hits[0][0]}."
            elif a.kind == FEATURE:
                nid, key = a.args
                text = self.graph.node_feature(nid, key)
                focus(nid)
                obs = text if text else f"The {key} of {nid} is empty."
            elif a.kind == NEIGHBOURS:
                nid, etype = a.args
                ids, truncated = self.graph.neighbors_page(nid, etype, self.cfg.neighbor_cap)
                focus(nid)
                obs = self._render_neighbours(nid, etype, ids, truncated)
                if len(ids) == 1:
                    focus(ids[0], visit=False)
            elif a.kind == DEGREE:
                nid, etype = a.args
                obs = str(self.graph.degree(nid, etype))
                focus(nid)
            else:
                final_answer = a.args[0]
                finished = True
                obs = f"Final answer: {final_answer}" if final_answer else "No answer given."
        except UnknownNodeError as exc:
            error, obs = "unknown_node", f"Error: {exc}"
        except UnknownFeatureError as exc:
            error, obs = "unknown_feature", f"Error: {exc}"
        except UnknownEdgeTypeError as exc:
            error, obs = "unknown_edge_type", f"Error: {exc}"
        except EmptyQueryError:
            error, obs = "empty_query", f"Error: the keyword {a.args[0]!r} has no searchable words"
        except (LookupError, GraphError) as exc:
            error, obs = "no_match", f"Error: {exc}"
        if error is not None:
            current, visited = s.current_node, list(s.visited_nodes)

        step = Step(index=index, thought=thought, action=a, observation=obs,
                    env_error=error, malformed=malformed, retrieval=retrieval)
        exhausted = not finished and index >= self.cfg.max_depth
        new = State(
            query=s.query,
            steps=s.steps + (step,),
            visited_nodes=tuple(visited),
            current_node=current,
            terminal=finished or exhausted,
            final_answer=final_answer,
            depth_exhausted=exhausted,
        )
        return new, obs, new.terminal

    def _render_neighbours(self, nid: str, etype: str, ids: list[str], truncated: bool) -> str:
        if not ids:
            return f"{nid} has no {etype} neighbors."
        shown = []
        for x in ids:
            name = self.graph.primary_name(x)
            shown.append(f"{x} ({name})" if name else x)
        obs = f"The {etype} neighbors of {nid} are: {'; '.join(shown)}."
        if truncated:
            total = self.graph.degree(nid, etype)
            obs += f" [truncated: showing {len(ids)} of {total}]"
        return obs

    def candidate_actions(self, s: State, keyword_cap: int | None = None) -> list[Action]:
        """Finite, ordered, duplicate-free action menu for a non-terminal state."""
        if s.terminal:
            raise TerminalStateError("terminal states have no actions")
        cap = self.cfg.keyword_cap if keyword_cap is None else keyword_cap
        retrieve, feature, neigh, degree, finish = [], [], [], [], []
        if s.current_node is None or self.cfg.retrieve_always:
            retrieve = [Action(RETRIEVE, (p,)) for p in query_spans(s.query, cap)]
        if s.current_node is not None:
            nid = s.current_node
            node = self.graph.node(nid)
            feature = [Action(FEATURE, (nid, k)) for k in node.features]
            for etype in self.graph.incident_edge_types(nid):
                neigh.append(Action(NEIGHBOURS, (nid, etype)))
                degree.append(Action(DEGREE, (nid, etype)))
            finish = [Action(FINISH, (v,)) for v in node.features.values() if v.strip()]
        if s.steps and not s.steps[-1].env_error and s.steps[-1].action.kind != FINISH:
            last = s.steps[-1].observation.strip()
            if is_number(last):
                finish.append(Action(FINISH, (last,)))
        out: list[Action] = []
        seen = set()
        for group in (retrieve, feature, neigh, degree, finish):
            for a in sorted(group, key=lambda a: a.args):
                if a not in seen:
                    seen.add(a)
                    out.append(a)
        if not out:
            out.append(Action(FINISH, ("",)))
        return out

    def replay(self, query: str, steps: Iterable[Step]) -> list[State]:
        """Re-execute recorded steps; returns the pre-step states plus the final state."""
        s = self.reset(query)
        states = [s]
        for st in steps:
            s, _, _ = self.step(s, st.thought, st.action, malformed=st.malformed)
            states.append(s)
        return states


# ---------------------------------------------------------------------------
# prompt rendering

PROMPT_TEMPLATE = """\
Answer the question by alternating Thought, Action and Observation steps over a graph.
Thought: reason about which information is still missing.
Action: call exactly one graph function:
  RetrieveNode[keyword] finds the node that best matches the keyword.
  NodeFeature[node_id, feature] reads one textual feature of a node.
  NodeDegree[node_id, neighbor_type] counts the node's neighbors of that type.
  NeighbourCheck[node_id, neighbor_type] lists the node's neighbors of that type.
  Finish[answer] stops and returns the answer.
Observation: the graph's reply to the action.
Give the answer as the node's main feature (such as its name), never its ID.

Graph definition: {graph_definition}
Question: {question}
{scratchpad}"""


def render_steps(steps: Iterable[Step]) -> str:
    lines = []
    for st in steps:
        lines.append(f"Thought {st.index}: {st.thought}")
        lines.append(f"Action {st.index}: {st.action.render()}")
        if st.action.kind != FINISH:
            lines.append(f"Observation {st.index}: {st.observation}")
    return "\n".join(lines)


def render_scratchpad(s: State, schema: GraphSchema) -> str:
    return PROMPT_TEMPLATE.format(
        graph_definition=schema.description,
        question=s.query,
        scratchpad=render_steps(s.steps),
    )


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """One episode: the steps taken, the answer, and optional behavior log-probs."""

    query: str
    steps: list[Step]
    final_answer: str | None
    question_id: str = ""
    logps: list[float] | None = None
    reward: object | None = None  # RewardBreakdown, attached by the reward module
    states: list[State] = field(default_factory=list, compare=False, repr=False)

    @classmethod
    def from_state(cls, final: State, states: list[State] | None = None, **kw) -> "Trajectory":
        return cls(query=final.query, steps=list(final.steps),
                   final_answer=final.final_answer, states=list(states or []), **kw)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def terminal_reason(self) -> str:
        if self.final_answer is not None:
            return "finish"
        return "depth" if self.steps else "none"

    def to_dict(self) -> dict:
        d = {
            "question_id": self.question_id,
            "query": self.query,
            "steps": [st.to_dict() for st in self.steps],
            "final_answer": self.final_answer,
            "reward": self.reward.to_dict() if self.reward is not None else None,
        }
        if self.logps is not None:
            d["logps"] = list(self.logps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        from .policy import parse_action
        from .reward import RewardBreakdown

        steps = []
        for i, sd in enumerate(d["steps"], start=1):
            steps.append(Step(
                index=i,
                thought=sd["thought"],
                action=parse_action(sd["action"]),
                observation=sd["observation"],
                env_error=sd.get("env_error"),
                malformed=sd.get("malformed", False),
                retrieval=tuple((nid, float(sc)) for nid, sc in sd.get("retrieval", ())),
            ))
        rw = d.get("reward")
        return cls(
            query=d.get("query", ""),
            steps=steps,
            final_answer=d.get("final_answer"),
            question_id=d.get("question_id", ""),
            logps=d.get("logps"),
            reward=RewardBreakdown(**rw) if rw else None,
        )


def write_trajectory_log(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def read_trajectory_log(path: str | Path) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return [Trajectory.from_dict(json.loads(line)) for line in fh if line.strip()]
