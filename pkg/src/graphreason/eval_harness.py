"""Benchmark runner: ROUGE-L, agents, dataset IO and a synthetic academic suite."""

from __future__ import annotations

import hashlib
import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .environment import (
    DEGREE,
    FINISH,
    NEIGHBOURS,
    RETRIEVE,
    Action,
    EnvConfig,
    Environment,
    Trajectory,
)
from .graph_store import Graph, GraphSchema, Node
from .mcts import HeuristicEvaluator, MctsConfig, search
from .policy import Policy, ScriptedPolicy, SoftmaxPolicy, parse_action
from .reward import answer_matches, normalize_answer, total_reward

# ---------------------------------------------------------------------------
# metrics


def lcs_length(a: Sequence, b: Sequence) -> int:
    """LCS length by the row-by-row DP, with each row's increments packed
    into the bits of an int (Allison-Dix / Hyyro form)."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return 0
    match: dict = {}
    for j, y in enumerate(b):
        match[y] = match.get(y, 0) | (1 << j)
    full = (1 << len(b)) - 1
    v = full  # zero bits mark columns where the DP row steps up
    for x in a:
        u = v & match.get(x, 0)
        v = ((v + u) | (v - u)) & full
    return len(b) - bin(v).count("1")


def rouge_l(prediction: str, reference: str) -> float:
    """ROUGE-L F1 over whitespace tokens of the normalized strings."""
    p = normalize_answer(prediction).split()
    r = normalize_answer(reference).split()
    if not p or not r:
        return 0.0
    lcs = lcs_length(p, r)
    if lcs == 0:
        return 0.0
    prec, rec = lcs / len(p), lcs / len(r)
    return 2 * prec * rec / (prec + rec)


class AnswerJudge(Protocol):
    """Model-based correctness check; no implementation ships with the package."""

    def judge(self, prediction: str, gold: Sequence[str], question: str) -> bool: ...


# ---------------------------------------------------------------------------
# datasets


class DatasetError(ValueError):
    pass


@dataclass
class QARecord:
    id: str
    question: str
    answers: list[str]
    topic_node: str | None = None
    gold_path: list[dict] | None = None
    template: str | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "question": self.question, "answers": list(self.answers),
             "topic_node": self.topic_node}
        if self.gold_path is not None:
            d["gold_path"] = self.gold_path
        if self.template is not None:
            d["template"] = self.template
        return d


def _read_jsonl(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                yield lineno, json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from None


def load_dataset(path: str | Path) -> list[QARecord]:
    out = []
    for lineno, d in _read_jsonl(path):
        try:
            answers = d["answers"]
            if not isinstance(answers, list) or not answers:
                raise DatasetError(f"line {lineno}: answers must be a non-empty list")
            out.append(QARecord(id=str(d["id"]), question=d["question"],
                                answers=[str(a) for a in answers],
                                topic_node=d.get("topic_node"),
                                gold_path=d.get("gold_path"), template=d.get("template")))
        except (KeyError, TypeError):
            raise DatasetError(f"line {lineno}: record needs id, question, answers") from None
    return out


def save_dataset(path: str | Path, records: Sequence[QARecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_grbench_records(path: str | Path) -> list[QARecord]:
    """Read GRBENCH-style ``{"qid"?, "question", "answer"}`` JSON lines."""
    out = []
    for lineno, d in _read_jsonl(path):
        if not isinstance(d, dict) or "question" not in d or "answer" not in d:
            raise DatasetError(f"line {lineno}: record needs question and answer")
        qid = d.get("qid", d.get("id", f"q{len(out)}"))
        out.append(QARecord(id=str(qid), question=str(d["question"]),
                            answers=[str(d["answer"])]))
    return out


# ---------------------------------------------------------------------------
# synthetic academic suite

_FIRST = """Ada Boris Chiara Dmitri Elena Farid Greta Hiroshi Ines Jonas Kavya Lior Mira
Nikolai Oona Pavel Quinn Rosa Soren Talia Umar Vera Wendell Ximena Yusuf Zora""".split()
_LAST = """Abbott Brandt Castillo Dorsey Eklund Fujita Galloway Horvat Ibarra Jankowski
Kowalczyk Lindqvist Moreau Nakamura Okafor Petrov Quist Romano Sandoval Takeda Ueda
Varga Whitfield Xu Yilmaz Zeller""".split()
_TITLE_WORDS = """adaptive sparse neural spectral robust latent causal temporal
graph kernel attention diffusion contrastive bayesian federated hierarchical
quantum stochastic convex manifold transformer embedding inference retrieval
reasoning clustering segmentation protein molecular climate traffic
recommendation compression alignment planning control sensing""".split()
_VENUE_WORDS = """Northern Pacific Alpine Coastal Central Atlantic Meridian Boreal
Continental Highland""".split()
_VENUE_KINDS = ["Symposium", "Conference", "Workshop", "Journal"]

SYNTHETIC_SCHEMA = GraphSchema(
    node_types=("author", "paper", "venue"),
    edge_types=("author", "cites", "paper", "venue"),
    feature_keys_per_node_type={"author": ("name",), "paper": ("title",),
                                "venue": ("name",)},
    primary_feature_key_per_node_type={"author": "name", "paper": "title", "venue": "name"},
    description=(
        "An academic graph. Author nodes have a 'name'; paper nodes have a 'title'; "
        "venue nodes have a 'name'. Edge types: 'paper' (author or venue to "
        "paper), 'author' (paper to author), 'venue' (paper to venue), 'cites' (paper "
        "to a paper it cites)."
    ),
)

TEMPLATES = ("count_papers", "venue_of_paper", "cited_paper_by_author")


@dataclass
class SuiteParams:
    n_authors: int = 8
    n_papers: int = 14
    n_venues: int = 3
    n_questions: int = 6
    templates: tuple[str, ...] = TEMPLATES


def _step(thought: str, action: Action) -> dict:
    return {"thought": thought, "action": action.render()}


def generate_synthetic_suite(params: SuiteParams | None = None,
                             seed: int = 0) -> tuple[Graph, list[QARecord]]:
    """Build a small author/paper/venue graph and template questions over it.

    Every question's gold path has at most three actions and replays to the
    gold answer.
    """
    p = params or SuiteParams()
    if p.n_papers < 2 * p.n_venues or p.n_authors < 1:
        raise ValueError("need at least two papers per venue and one author")
    rng = random.Random(seed)

    def new_id(used: set[str]) -> str:
        while True:
            x = f"{rng.getrandbits(48):012x}"
            if x not in used:
                used.add(x)
                return x

    used: set[str] = set()
    names = rng.sample([f"{f} {l}" for f in _FIRST for l in _LAST], p.n_authors)
    titles: list[str] = []
    seen_sets: set[frozenset] = set()
    while len(titles) < p.n_papers:
        words = rng.sample(_TITLE_WORDS, 3)
        key = frozenset(words)
        if key not in seen_sets:
            seen_sets.add(key)
            titles.append(" ".join(w.capitalize() for w in words))
    venues = rng.sample([f"{w} {k}" for w in _VENUE_WORDS for k in _VENUE_KINDS], p.n_venues)

    authors = [Node(new_id(used), "author", {"name": n}) for n in names]
    papers = [Node(new_id(used), "paper", {"title": t}) for t in titles]
    venue_nodes = [Node(new_id(used), "venue", {"name": v}) for v in venues]

    edges: list[tuple[str, str, str]] = []
    written: dict[int, set[int]] = {i: set() for i in range(p.n_papers)}
    for ai in range(p.n_authors):
        for pi in rng.sample(range(p.n_papers), min(p.n_papers, rng.randint(2, 3))):
            written[pi].add(ai)
    for pi in range(p.n_papers):
        if not written[pi]:
            written[pi].add(rng.randrange(p.n_authors))
        for ai in sorted(written[pi]):
            edges.append((authors[ai].id, papers[pi].id, "paper"))
            edges.append((papers[pi].id, authors[ai].id, "author"))
    order = list(range(p.n_papers))
    rng.shuffle(order)
    venue_of = {pi: venue_nodes[k % p.n_venues] for k, pi in enumerate(order)}
    for pi, v in venue_of.items():
        edges.append((papers[pi].id, v.id, "venue"))
        edges.append((v.id, papers[pi].id, "paper"))
    cites: dict[int, list[int]] = {}
    for pi in range(p.n_papers):
        others = [x for x in range(p.n_papers) if x != pi]
        cites[pi] = sorted(rng.sample(others, min(len(others), rng.choice([0, 1, 1, 2]))))
        for ci in cites[pi]:
            edges.append((papers[pi].id, papers[ci].id, "cites"))

    graph = Graph.build(SYNTHETIC_SCHEMA, authors + papers + venue_nodes, edges)

    pools: dict[str, list] = {
        "count_papers": [ai for ai in range(p.n_authors)
                         if sum(ai in w for w in written.values()) >= 2],
        "venue_of_paper": list(range(p.n_papers)),
        "cited_paper_by_author": [(pi, cites[pi][0]) for pi in range(p.n_papers)
                                  if len(cites[pi]) == 1],
    }
    for v in pools.values():
        rng.shuffle(v)
    records: list[QARecord] = []
    k = 0
    templates = [t for t in p.templates if pools.get(t)]
    while len(records) < p.n_questions and any(pools[t] for t in templates):
        t = templates[k % len(templates)]
        k += 1
        if not pools[t]:
            continue
        item = pools[t].pop()
        qid = f"s{seed}-{len(records)}"
        if t == "count_papers":
            a = authors[item]
            n = graph.degree(a.id, "paper")
            name = a.features["name"]
            rec = QARecord(qid, f"How many papers are written by author {name}?", [str(n)],
                           topic_node=a.id, template=t, gold_path=[
                               _step(f"I need to find the author {name}.",
                                     Action(RETRIEVE, (name,))),
                               _step("I need the number of paper neighbors of this author.",
                                     Action(DEGREE, (a.id, "paper"))),
                               _step(f"The author wrote {n} papers.", Action(FINISH, (str(n),))),
                           ])
        elif t == "venue_of_paper":
            pn = papers[item]
            title = pn.features["title"]
            venue = venue_of[item].features["name"]
            rec = QARecord(qid, f"Which venue published the paper {title}?", [venue],
                           topic_node=pn.id, template=t, gold_path=[
                               _step(f"I need to find the paper {title}.",
                                     Action(RETRIEVE, (title,))),
                               _step("I need the venue neighbor of this paper.",
                                     Action(NEIGHBOURS, (pn.id, "venue"))),
                               _step(f"The venue is {venue}.", Action(FINISH, (venue,))),
                           ])
        else:
            pi, ci = item
            y, z = papers[pi], papers[ci]
            ai = min(written[ci])
            name = authors[ai].features["name"]
            ytitle, ztitle = y.features["title"], z.features["title"]
            rec = QARecord(qid, f"Which paper cited by {ytitle} was written by {name}?",
                           [ztitle], topic_node=y.id, template=t, gold_path=[
                               _step(f"I need to find the paper {ytitle}.",
                                     Action(RETRIEVE, (ytitle,))),
                               _step("I need the papers it cites.",
                                     Action(NEIGHBOURS, (y.id, "cites"))),
                               _step(f"The cited paper is {ztitle}.", Action(FINISH, (ztitle,))),
                           ])
        records.append(rec)
    return graph, records


def gold_script(rec: QARecord) -> ScriptedPolicy:
    if not rec.gold_path:
        raise DatasetError(f"question {rec.id} has no gold path")
    return ScriptedPolicy.from_records(rec.gold_path)


# ---------------------------------------------------------------------------
# runner


@dataclass
class QuestionResult:
    id: str
    question: str
    prediction: str
    gold: list[str]
    rouge_l: float
    exact_match: bool
    steps_used: int
    terminal_reason: str
    reward: float
    error: str | None = None


@dataclass
class EvalReport:
    records: list[QuestionResult]
    aggregates: dict[str, float]
    config_fingerprint: str
    seed: int
    agent: str = ""

    @staticmethod
    def compute_aggregates(records: Sequence[QuestionResult]) -> dict[str, float]:
        n = len(records)
        if n == 0:
            return {"n": 0, "mean_rouge_l": 0.0, "exact_match_rate": 0.0,
                    "mean_steps": 0.0, "mean_reward": 0.0}
        return {
            "n": n,
            "mean_rouge_l": sum(r.rouge_l for r in records) / n,
            "exact_match_rate": sum(r.exact_match for r in records) / n,
            "mean_steps": sum(r.steps_used for r in records) / n,
            "mean_reward": sum(r.reward for r in records) / n,
        }

    def check(self) -> None:
        want = self.compute_aggregates(self.records)
        for k, v in want.items():
            if abs(self.aggregates.get(k, float("nan")) - v) > 1e-9:
                raise ValueError(f"aggregate {k} is inconsistent with the records")

    def to_json(self) -> str:
        self.check()
        return json.dumps({
            "agent": self.agent,
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
            "aggregates": self.aggregates,
            "records": [asdict(r) for r in self.records],
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        rep = cls([QuestionResult(**r) for r in d["records"]], d["aggregates"],
                  d["config_fingerprint"], d["seed"], d.get("agent", ""))
        rep.check()
        return rep

    def summary_table(self) -> str:
        a = self.aggregates
        lines = [
            f"{'agent':<10}{'n':>6}{'ROUGE-L':>10}{'EM':>8}{'steps':>8}{'reward':>9}",
            f"{self.agent:<10}{a['n']:>6}{a['mean_rouge_l']:>10.4f}"
            f"{a['exact_match_rate']:>8.4f}{a['mean_steps']:>8.2f}{a['mean_reward']:>9.4f}",
        ]
        return "\n".join(lines)


@dataclass
class AgentBundle:
    """Everything an agent needs besides the graph and the question."""

    agent: str = "mcts"
    policy: Policy = field(default_factory=SoftmaxPolicy)
    evaluator: object = field(default_factory=HeuristicEvaluator)
    mcts: MctsConfig = field(default_factory=MctsConfig)
    seed: int = 0

    def fingerprint(self, env_cfg: EnvConfig) -> str:
        desc = {"agent": self.agent, "mcts": asdict(self.mcts), "env": asdict(env_cfg),
                "policy": type(self.policy).__name__, "seed": self.seed,
                "evaluator": type(self.evaluator).__name__}
        if isinstance(self.policy, SoftmaxPolicy):
            desc["params"] = self.policy.params.to_dict()
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


def run_greedy(query: str, env: Environment, policy: Policy) -> Trajectory:
    s = env.reset(query)
    while not s.terminal:
        p = policy.greedy(s, env)
        s, _, _ = env.step(s, p.thought, p.action, malformed=p.malformed)
    return Trajectory.from_state(s)


def run_agent(rec: QARecord, env: Environment, bundle: AgentBundle, seed: int) -> Trajectory:
    if bundle.agent == "mcts":
        cfg = MctsConfig(**{**asdict(bundle.mcts), "seed": seed})
        return search(rec.question, env, bundle.policy, bundle.evaluator, cfg).trajectory
    if bundle.agent == "greedy":
        return run_greedy(rec.question, env, bundle.policy)
    if bundle.agent == "scripted":
        return run_greedy(rec.question, env, gold_script(rec))
    raise ValueError(f"unknown agent {bundle.agent!r}")


def _evaluate_one(i: int, rec: QARecord, env: Environment, bundle: AgentBundle) -> QuestionResult:
    try:
        traj = run_agent(rec, env, bundle, bundle.seed + i)
    except Exception as exc:  # recorded per question, never aborts the run
        return QuestionResult(rec.id, rec.question, "", list(rec.answers), 0.0, False, 0,
                              "error", 0.0, error=f"{type(exc).__name__}: {exc}")
    pred = traj.final_answer or ""
    return QuestionResult(
        id=rec.id,
        question=rec.question,
        prediction=pred,
        gold=list(rec.answers),
        rouge_l=max(rouge_l(pred, g) for g in rec.answers),
        exact_match=traj.final_answer is not None and answer_matches(pred, rec.answers),
        steps_used=len(traj.steps),
        terminal_reason=traj.terminal_reason,
        reward=total_reward(traj, rec.answers).total,
    )


def run_benchmark(dataset: Sequence[QARecord], env: Environment, bundle: AgentBundle,
                  jobs: int = 1) -> EvalReport:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda ir: _evaluate_one(ir[0], ir[1], env, bundle),
                                    enumerate(dataset)))
    else:
        results = [_evaluate_one(i, r, env, bundle) for i, r in enumerate(dataset)]
    return EvalReport(results, EvalReport.compute_aggregates(results),
                      bundle.fingerprint(env.cfg), bundle.seed, bundle.agent)


def bootstrap_mean_ci(diffs: Sequence[float], n_boot: int = 2000, level: float = 0.95,
                      seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``diffs``."""
    rng = np.random.default_rng(seed)
    x = np.asarray(diffs, dtype=float)
    means = rng.choice(x, size=(n_boot, len(x)), replace=True).mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


__all__ = [
    "AgentBundle", "AnswerJudge", "DatasetError", "EvalReport", "QARecord", "QuestionResult",
    "SuiteParams", "bootstrap_mean_ci", "gold_script", "generate_synthetic_suite",
    "lcs_length", "load_dataset", "load_grbench_records", "parse_action", "rouge_l",
    "run_benchmark", "run_greedy", "save_dataset",
]
