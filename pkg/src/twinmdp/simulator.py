"""Fault-propagation diagnosis simulator.

Scenarios embed a directed propagation chain (root cause -> ... -> symptom)
in a random weakly connected graph. A scripted, deliberately noisy base
agent explores the graph from the symptom with a queue of candidate
entities: each turn it picks a candidate, collects a noisy anomaly signal,
updates its cumulative assessments, and enqueues unexplored neighbors.

A policy plus intervention config can be attached to an episode:
suggestions bias the pick, pruning filters what gets enqueued, and
prioritization replaces the agent's queue ordering. The judge scores
episodes against the ground-truth chain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .abstraction import SchemeSpec, TopologyFeaturizer, vocab_state_vector
from .context import CeConfig, Intervention, intervene
from .errors import EntityNotInVocabulary, InfeasibleConfig, IoFailure
from .hmm import Hmm, viterbi_decode
from .offline_rl import QPolicy
from .topology import TopologyGraph, graph_from_json, graph_to_json, make_graph
from .trajectories import Entity, JudgeScores, RawStep, RawTrajectory

NODE_TYPES = ("Pod", "Service", "Deployment", "Node", "ConfigMap")


@dataclass(frozen=True)
class SimScenario:
    scenario_id: str
    graph: TopologyGraph
    root_cause: Entity
    chain: tuple[Entity, ...]
    symptom: Entity
    evidence_noise: float
    seed: int

    def __post_init__(self):
        if self.chain[0] != self.root_cause or self.chain[-1] != self.symptom:
            raise InfeasibleConfig("chain must run from root cause to symptom")
        edges = self.graph.edges
        for u, v in zip(self.chain[:-1], self.chain[1:]):
            if (u, v) not in edges:
                raise InfeasibleConfig(f"chain edge ({u}, {v}) missing from graph")


@dataclass(frozen=True)
class ScenarioConfig:
    n_nodes: int = 12
    edge_density: float = 0.08
    chain_length: int = 4
    evidence_noise: float = 0.1


@dataclass(frozen=True)
class EpisodeConfig:
    max_turns: int = 12
    epsilon: float = 0.3            # chance the agent ignores ordering entirely
    suggestion_uptake: float = 0.8  # chance a prompt suggestion beats the heuristic


@dataclass
class CePlan:
    """Everything needed to intervene during an episode."""

    policy: QPolicy
    config: CeConfig
    scheme: SchemeSpec
    hmm: Hmm | None = None


@dataclass
class EpisodeResult:
    trajectory: RawTrajectory
    identified_root: Entity | None
    turns_used: int
    entities_explored: int
    scores: JudgeScores
    audit: list[dict] = field(default_factory=list)


def generate_scenario(cfg: ScenarioConfig, seed: int,
                      scenario_id: str | None = None) -> SimScenario:
    """Seeded scenario: weakly connected digraph with an embedded chain."""
    if cfg.chain_length < 2:
        raise InfeasibleConfig("chain_length must be >= 2")
    if cfg.n_nodes < cfg.chain_length:
        raise InfeasibleConfig("n_nodes must be >= chain_length")
    rng = np.random.default_rng(seed)
    nodes = [
        Entity(name=f"svc-{i:02d}", etype=NODE_TYPES[i % len(NODE_TYPES)])
        for i in range(cfg.n_nodes)
    ]
    chain_idx = rng.choice(cfg.n_nodes, size=cfg.chain_length, replace=False)
    chain = tuple(nodes[i] for i in chain_idx)
    edges = {(u, v) for u, v in zip(chain[:-1], chain[1:])}

    for i in range(cfg.n_nodes):
        for j in range(cfg.n_nodes):
            if i == j:
                continue
            pair = (nodes[i], nodes[j])
            if pair in edges:
                continue
            if rng.random() < cfg.edge_density:
                edges.add(pair)

    # stitch stray components onto the chain's component
    adjacency: dict[Entity, set[Entity]] = {n: set() for n in nodes}
    for u, v in edges:
        adjacency[u].add(v)
        adjacency[v].add(u)
    seen: set[Entity] = set()
    components: list[list[Entity]] = []
    for n in nodes:
        if n in seen:
            continue
        comp = []
        stack = [n]
        seen.add(n)
        while stack:
            cur = stack.pop()
            comp.append(cur)
            for nb in sorted(adjacency[cur]):
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        components.append(sorted(comp))
    main_idx = next(i for i, c in enumerate(components) if chain[0] in c)
    main = components[main_idx]
    for i, comp in enumerate(components):
        if i == main_idx:
            continue
        u = main[rng.integers(len(main))]
        v = comp[rng.integers(len(comp))]
        edges.add((u, v))
        main = sorted(set(main) | set(comp))

    return SimScenario(
        scenario_id=scenario_id or f"scn-{seed}",
        graph=make_graph(nodes, edges),
        root_cause=chain[0],
        chain=chain,
        symptom=chain[-1],
        evidence_noise=cfg.evidence_noise,
        seed=seed,
    )


# --- judging ----------------------------------------------------------------------

def judge(identified_root: Entity | None, assessments: dict[Entity, str],
          scn: SimScenario) -> JudgeScores:
    """Exact ground-truth scoring.

    Root-cause identification is all-or-nothing. Chain accuracy is the F1
    between the entities flagged primary-or-cascading and the true chain
    entity set; an empty prediction scores zero.
    """
    rce = 100.0 if identified_root == scn.root_cause else 0.0
    predicted = {e for e, label in assessments.items() if label in ("primary", "cascading")}
    truth = set(scn.chain)
    if not predicted:
        return JudgeScores(fpc_accuracy=0.0, rce_identification=rce)
    overlap = len(predicted & truth)
    precision = overlap / len(predicted)
    recall = overlap / len(truth)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return JudgeScores(fpc_accuracy=100.0 * f1, rce_identification=rce)


# --- runtime feature assembly --------------------------------------------------------

class _SchemeRuntime:
    """Builds the policy's state and candidate representations during a run.

    Topology features always come from the scenario's own graph (the scheme
    fixes the sentinel and the hub/hidden-state flags); vocabulary schemes
    use the scheme's vocabulary.
    """

    def __init__(self, plan: CePlan, scn: SimScenario):
        self.plan = plan
        self.scheme = plan.scheme
        if self.scheme.kind == "topology":
            self.featurizer = TopologyFeaturizer(
                scn.graph, self.scheme.unreachable_sentinel, self.scheme.with_hubs
            )
            self.observations: list[np.ndarray] = []
        else:
            self.vocab_index = {key: i for i, key in enumerate(self.scheme.vocabulary)}

    def state(self, scn: SimScenario, assessments) -> np.ndarray:
        if self.scheme.kind != "topology":
            return vocab_state_vector(self.scheme.vocabulary, self.scheme.kind,
                                      assessments)
        base = self.featurizer.state_features(scn.symptom, assessments)
        if not self.scheme.with_hmm:
            return base
        return np.concatenate([base, self._hidden_state_onehot()])

    def _hidden_state_onehot(self) -> np.ndarray:
        """Online stand-in for the decoded hidden state.

        Training-time augmentation decodes complete sequences; mid-episode we
        decode the observed prefix and step the most likely transition.
        """
        hmm = self.plan.hmm
        onehot = np.zeros(hmm.n_states)
        if not self.observations:
            z = int(np.argmax(hmm.initial))
        else:
            prefix = np.stack(self.observations)
            z_prev = viterbi_decode(hmm, prefix)[-1]
            z = int(np.argmax(hmm.transition[z_prev]))
        onehot[z] = 1.0
        return onehot

    def candidate_repr(self, c: Entity, previous: Entity | None,
                       scn: SimScenario, assessments):
        if self.scheme.kind == "topology":
            return self.featurizer.action_features(c, previous, scn.symptom, assessments)
        key = c.name if self.scheme.kind == "name" else (c.name, c.etype)
        if key not in self.vocab_index:
            raise EntityNotInVocabulary(f"{c} not in policy vocabulary")
        return self.vocab_index[key]

    def record_turn(self, pre_state: np.ndarray, chosen_repr) -> None:
        """Log the (pre-action state, action) observation the HMM was fit on."""
        if self.scheme.kind == "topology" and self.scheme.with_hmm:
            self.observations.append(
                np.concatenate([pre_state[:2], np.asarray(chosen_repr, dtype=float)])
            )


# --- episode loop ---------------------------------------------------------------------

def run_episode(
    scn: SimScenario,
    ce: CePlan | None,
    cfg: EpisodeConfig,
    seed: int,
    trajectory_id: str | None = None,
) -> EpisodeResult:
    """Simulate one diagnosis episode; fully determined by (scn, ce, cfg, seed).

    The agent asserts a root cause once some entity has been labeled primary
    at the end of two consecutive turns, or immediately when its queue runs
    dry while a primary is on record. On budget exhaustion it answers with
    its strongest primary finding, if any.
    """
    rng = np.random.default_rng(seed)
    runtime = _SchemeRuntime(ce, scn) if ce is not None else None

    chain_set = set(scn.chain)
    explored: set[Entity] = set()
    queued: set[Entity] = {scn.symptom}
    queue: list[Entity] = [scn.symptom]
    assessments: dict[Entity, str] = {}
    streak: dict[Entity, int] = {}
    steps: list[RawStep] = []
    audit: list[dict] = []
    previous: Entity | None = None
    identified: Entity | None = None

    for turn in range(cfg.max_turns):
        if not queue:
            fallback = _fallback_entity(steps, assessments, scn)
            queue = [fallback]
            queued.add(fallback)

        candidates = list(queue)
        selection_iv: Intervention | None = None
        repr_of: dict[Entity, object] = {}
        state_vec = None
        if runtime is not None:
            state_vec = runtime.state(scn, assessments)
            repr_of = {
                c: runtime.candidate_repr(c, previous, scn, assessments)
                for c in candidates
            }
            selection_cfg = _selection_config(ce.config)
            if selection_cfg is not None:
                selection_iv = intervene(
                    ce.policy, state_vec, [(c, repr_of[c]) for c in candidates],
                    selection_cfg,
                )

        chosen = _select(candidates, assessments, scn, rng, cfg, ce, selection_iv)

        # collect noisy evidence and update the cumulative assessment
        explored.add(chosen)
        on_chain = chosen in chain_set
        anomalous = on_chain != (rng.random() < scn.evidence_noise)
        if anomalous:
            is_root = (chosen == scn.root_cause) != (rng.random() < scn.evidence_noise)
            label = "primary" if is_root else "cascading"
        else:
            label = "normal"
        assessments[chosen] = label

        if runtime is not None:
            runtime.record_turn(state_vec, repr_of[chosen])

        queue = [c for c in queue if c != chosen]

        # push unexplored neighbors, optionally pruned by the policy
        push = [
            n for n in scn.graph.neighbors(chosen)
            if n not in explored and n not in queued
        ]
        pruned: list[Entity] = []
        if runtime is not None and ce.config.enabled("prune") and push:
            push_state = runtime.state(scn, assessments)
            push_reprs = [
                (c, runtime.candidate_repr(c, chosen, scn, assessments)) for c in push
            ]
            push_iv = intervene(ce.policy, push_state, push_reprs,
                                _prune_only_config(ce.config))
            pruned = [e for e in push if e not in push_iv.retained]
            push = [e for e in push if e in push_iv.retained]
        queue.extend(push)
        queued.update(push)

        steps.append(
            RawStep(
                turn_index=turn,
                chosen_entity=chosen,
                candidate_entities=tuple(candidates),
                assessments=dict(assessments),
            )
        )
        if selection_iv is not None:
            audit.append(
                {
                    "turn": turn,
                    "candidates": [(c.name, c.etype) for c in candidates],
                    "probs": {c.name: selection_iv.probs[c] for c in candidates},
                    "suggestions": [e.name for e in selection_iv.suggestions],
                    "ordering": [e.name for e in selection_iv.ordering],
                    "pruned": [e.name for e in pruned],
                }
            )

        # streak bookkeeping over end-of-turn snapshots
        for e in list(streak):
            if assessments.get(e) != "primary":
                streak[e] = 0
        for e, lab in assessments.items():
            if lab == "primary":
                streak[e] = streak.get(e, 0) + 1
        asserted = [e for e, s in streak.items() if s >= 2]
        if asserted:
            identified = min(asserted, key=lambda e: (-streak[e], e.name, e.etype))
            break
        if not queue:
            primaries = [e for e, lab in assessments.items() if lab == "primary"]
            if primaries:
                identified = min(
                    primaries, key=lambda e: (-streak.get(e, 0), e.name, e.etype)
                )
                break
        previous = chosen

    if identified is None:
        primaries = [e for e, lab in assessments.items() if lab == "primary"]
        if primaries:
            identified = min(
                primaries, key=lambda e: (-streak.get(e, 0), e.name, e.etype)
            )

    scores = judge(identified, assessments, scn)
    trajectory = RawTrajectory(
        trajectory_id=trajectory_id or f"{scn.scenario_id}-ep{seed}",
        scenario_id=scn.scenario_id,
        symptom_entity=scn.symptom,
        steps=tuple(steps),
        scores=scores,
        final_root_cause=identified,
    )
    return EpisodeResult(
        trajectory=trajectory,
        identified_root=identified,
        turns_used=len(steps),
        entities_explored=len(explored),
        scores=scores,
        audit=audit,
    )


def _selection_config(cfg: CeConfig) -> CeConfig | None:
    """Pruning acts on queue pushes, not picks; drop it at selection time."""
    kept = tuple(s for s in cfg.strategies if s != "prune")
    if not kept:
        return None
    return CeConfig(strategies=kept, suggest_percentile=cfg.suggest_percentile,
                    prune_percentile=cfg.prune_percentile)


def _prune_only_config(cfg: CeConfig) -> CeConfig:
    return CeConfig(strategies=("prune",), suggest_percentile=cfg.suggest_percentile,
                    prune_percentile=cfg.prune_percentile)


def _fallback_entity(steps, assessments, scn: SimScenario) -> Entity:
    """With an empty queue the agent re-verifies its latest anomalous finding."""
    for step in reversed(steps):
        label = assessments.get(step.chosen_entity)
        if label in ("primary", "cascading"):
            return step.chosen_entity
    return scn.symptom


def _heuristic_order(candidates, assessments, scn: SimScenario,
                     suggested: set[Entity]) -> list[Entity]:
    """Greedy anomaly-adjacency: candidates bordering flagged entities first.

    Suggested entities win ties. Queue position breaks remaining ties, so the
    order is stable.
    """
    flagged = {e for e, lab in assessments.items() if lab in ("primary", "cascading")}
    flagged_neighbors: set[Entity] = set()
    for e in flagged:
        flagged_neighbors.update(scn.graph.neighbors(e))

    def key(pair):
        pos, c = pair
        return (-(c in flagged_neighbors), -(c in suggested), pos)

    return [c for _, c in sorted(enumerate(candidates), key=key)]


def _select(candidates, assessments, scn, rng, cfg: EpisodeConfig,
            ce: CePlan | None, iv: Intervention | None) -> Entity:
    suggested = set(iv.suggestions) if iv is not None else set()
    if ce is not None and ce.config.enabled("prioritize") and iv is not None:
        # the reordered queue replaces the agent's own ordering step, so the
        # agent's epsilon-noise does not apply here
        order = list(iv.ordering)
    elif rng.random() < cfg.epsilon:
        order = [candidates[i] for i in rng.permutation(len(candidates))]
    else:
        order = _heuristic_order(candidates, assessments, scn, suggested)

    if iv is not None and ce.config.enabled("suggest") and suggested:
        if rng.random() < cfg.suggestion_uptake:
            return min(suggested, key=lambda e: (-iv.probs[e], e.name, e.etype))
    return order[0]


# --- batches and persistence -------------------------------------------------------

def run_batch(scenarios, ce: CePlan | None, cfg: EpisodeConfig, trials: int,
              master_seed: int, method_id: str = "baseline") -> list[dict]:
    """Run ``trials`` episodes per scenario; returns result-table rows.

    Episode seeds derive from (master_seed, scenario index, trial), so two
    batches over the same scenarios pair up seed-for-seed regardless of the
    intervention attached.
    """
    rows = []
    for s_idx, scn in enumerate(scenarios):
        for trial in range(trials):
            seed = int(
                np.random.SeedSequence([master_seed, s_idx, trial]).generate_state(1)[0]
            )
            res = run_episode(
                scn, ce, cfg, seed,
                trajectory_id=f"{scn.scenario_id}-{method_id}-t{trial}",
            )
            rows.append(
                {
                    "scenario_id": scn.scenario_id,
                    "method_id": method_id,
                    "trial": trial,
                    "rce_identification": res.scores.rce_identification,
                    "fpc_accuracy": res.scores.fpc_accuracy,
                    "turns_used": res.turns_used,
                    "entities_explored": res.entities_explored,
                    "result": res,
                }
            )
    return rows


def scenario_to_json(scn: SimScenario) -> dict:
    return {
        "scenario_id": scn.scenario_id,
        "graph": graph_to_json(scn.graph),
        "root_cause": {"name": scn.root_cause.name, "etype": scn.root_cause.etype},
        "chain": [{"name": e.name, "etype": e.etype} for e in scn.chain],
        "symptom": {"name": scn.symptom.name, "etype": scn.symptom.etype},
        "evidence_noise": scn.evidence_noise,
        "seed": scn.seed,
    }


def scenario_from_json(obj) -> SimScenario:
    graph = graph_from_json(obj["graph"])
    by_key = {(e.name, e.etype): e for e in graph.nodes}

    def ent(o):
        return by_key[(o["name"], o["etype"])]

    return SimScenario(
        scenario_id=obj["scenario_id"],
        graph=graph,
        root_cause=ent(obj["root_cause"]),
        chain=tuple(ent(e) for e in obj["chain"]),
        symptom=ent(obj["symptom"]),
        evidence_noise=obj["evidence_noise"],
        seed=obj["seed"],
    )


def save_scenarios(scenarios, path: str | Path) -> None:
    try:
        with Path(path).open("w") as fh:
            for scn in scenarios:
                fh.write(json.dumps(scenario_to_json(scn), sort_keys=True))
                fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write scenarios {path}: {exc}") from exc


def load_scenarios(path: str | Path) -> list[SimScenario]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read scenarios {path}: {exc}") from exc
    return [scenario_from_json(json.loads(line)) for line in lines if line.strip()]
