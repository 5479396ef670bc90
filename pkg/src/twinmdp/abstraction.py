"""Deterministic abstraction of raw trajectories into finite MDP views.

Three representation schemes:

* ``name``      - state: assessment code (2 primary / 1 cascading / 0 other)
                  per entity name; action: vocabulary index of the chosen name.
* ``nametype``  - same, keyed by (name, etype) pairs.
* ``topology``  - relativized features from the propagation graph: shortest
                  path distances between the acted-on entity, the previously
                  explored entity, the symptom, and the currently flagged
                  failure fronts; optionally a hub score and a decoded hidden
                  state appended by an HMM fitted on the feature sequences.

The state at turn t reflects the agent's knowledge *before* acting, i.e. the
cumulative assessments recorded at turn t-1 (empty at t = 0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TypeAlias, Union

import numpy as np

from .errors import (
    DimensionMismatch,
    EntityNotInGraph,
    EntityNotInVocabulary,
    IoFailure,
    MalformedRecord,
    SchemeMismatch,
)
from .hmm import Hmm, viterbi_decode
from .topology import DistanceIndex, TopologyGraph, hubs_scores
from .trajectories import Entity, JudgeScores, RawTrajectory

ASSESSMENT_CODE = {"primary": 2.0, "cascading": 1.0, "normal": 0.0}

SCHEME_KINDS = ("name", "nametype", "topology")

# an action is either a vocabulary index or a feature vector
ActionRepr: TypeAlias = Union[int, np.ndarray]


@dataclass(frozen=True)
class SchemeSpec:
    """Configuration of one abstraction scheme."""

    kind: str
    vocabulary: tuple = ()               # names or (name, etype) pairs
    graph: TopologyGraph | None = None   # topology only
    with_hubs: bool = False              # topology only
    with_hmm: bool = False               # topology only
    hmm_states: int = 4
    unreachable_sentinel: float | None = None  # default: graph diameter + 1

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise MalformedRecord(f"unknown scheme kind {self.kind!r}")
        if self.kind != "topology" and (self.with_hubs or self.with_hmm):
            raise MalformedRecord("with_hubs/with_hmm require the topology scheme")
        if self.kind != "topology" and len(set(self.vocabulary)) != len(self.vocabulary):
            raise MalformedRecord("vocabulary entries must be unique")

    @property
    def action_dim(self) -> int:
        """Width of the action representation fed to networks."""
        if self.kind == "topology":
            return 5 if self.with_hubs else 4
        return len(self.vocabulary)


def build_vocabulary(trajs, kind: str, graphs=()) -> tuple:
    """Collect the sorted entity vocabulary for the name/nametype schemes."""
    if kind not in ("name", "nametype"):
        raise SchemeMismatch("vocabularies apply to name/nametype schemes")
    keys = set()

    def add(e: Entity):
        keys.add(e.name if kind == "name" else (e.name, e.etype))

    for traj in trajs:
        add(traj.symptom_entity)
        for step in traj.steps:
            add(step.chosen_entity)
            for c in step.candidate_entities:
                add(c)
            for e in step.assessments:
                add(e)
    for g in graphs:
        for e in g.nodes:
            add(e)
    return tuple(sorted(keys))


@dataclass
class AbstractStep:
    state: np.ndarray
    action: "int | np.ndarray"
    reward: float
    candidates: list  # ActionRepr per candidate, same order as the raw step


@dataclass
class AbstractTrajectory:
    trajectory_id: str
    scenario_id: str
    scheme: str
    steps: list[AbstractStep]
    scores: JudgeScores

    @property
    def state_dim(self) -> int:
        return int(self.steps[0].state.shape[0])


class TopologyFeaturizer:
    """Shared distance/hub feature computation for one graph.

    Used both when abstracting logged trajectories and when scoring live
    candidates during an episode, so the two paths cannot drift apart.
    """

    def __init__(self, graph: TopologyGraph, sentinel: float | None = None,
                 with_hubs: bool = False):
        self.graph = graph
        self._nodes = set(graph.nodes)
        self.dist = DistanceIndex(graph)
        self.sentinel = float(sentinel) if sentinel is not None else float(
            self.dist.diameter() + 1
        )
        if self.sentinel <= self.dist.diameter():
            raise MalformedRecord(
                f"unreachable sentinel {self.sentinel} must exceed graph diameter "
                f"{self.dist.diameter()}"
            )
        self.hubs = hubs_scores(graph) if with_hubs else None

    def _check(self, e: Entity) -> None:
        if e not in self._nodes:
            raise EntityNotInGraph(f"{e} not in graph")

    def _dist_or_sentinel(self, src: Entity, dst: Entity | None) -> float:
        if dst is None:
            return self.sentinel
        d = self.dist.distance(src, dst)
        return float(d) if d is not None else self.sentinel

    def _min_dist_to_label(self, src: Entity, assessments, label: str) -> float:
        dists = []
        for e, lab in assessments.items():
            if lab != label:
                continue
            self._check(e)
            d = self.dist.distance(src, e)
            if d is not None:
                dists.append(d)
        return float(min(dists)) if dists else self.sentinel

    def action_features(self, target: Entity, previous: Entity | None,
                        symptom: Entity, assessments) -> np.ndarray:
        self._check(target)
        feats = [
            self._dist_or_sentinel(target, previous),
            self._dist_or_sentinel(target, symptom),
            self._min_dist_to_label(target, assessments, "primary"),
            self._min_dist_to_label(target, assessments, "cascading"),
        ]
        if self.hubs is not None:
            feats.append(self.hubs[target])
        return np.array(feats, dtype=float)

    def state_features(self, symptom: Entity, assessments) -> np.ndarray:
        self._check(symptom)
        return np.array(
            [
                self._min_dist_to_label(symptom, assessments, "primary"),
                self._min_dist_to_label(symptom, assessments, "cascading"),
            ],
            dtype=float,
        )


def _vocab_key(e: Entity, kind: str):
    return e.name if kind == "name" else (e.name, e.etype)


def _vocab_state(vocab_index: dict, kind: str, assessments, dim: int) -> np.ndarray:
    state = np.zeros(dim)
    for e, label in assessments.items():
        key = _vocab_key(e, kind)
        if key not in vocab_index:
            raise EntityNotInVocabulary(f"{e} not in vocabulary")
        # identical names with different types collapse under the name
        # scheme; keep the most severe code
        state[vocab_index[key]] = max(state[vocab_index[key]], ASSESSMENT_CODE[label])
    return state


def vocab_state_vector(vocabulary, kind: str, assessments) -> np.ndarray:
    """Assessment-coded state vector over a name/nametype vocabulary."""
    index = {key: i for i, key in enumerate(vocabulary)}
    return _vocab_state(index, kind, assessments, len(vocabulary))


def abstract(raw: RawTrajectory, spec: SchemeSpec,
             featurizer: TopologyFeaturizer | None = None) -> AbstractTrajectory:
    """Map a raw trajectory into its abstract (state, action, reward) view.

    Rewards initialize to 0; reward learning relabels them later. Pure and
    deterministic: identical inputs produce identical outputs.
    """
    if spec.kind == "topology":
        if featurizer is None:
            if spec.graph is None:
                raise MalformedRecord("topology abstraction needs a graph or featurizer")
            featurizer = TopologyFeaturizer(
                spec.graph, spec.unreachable_sentinel, spec.with_hubs
            )
        steps = []
        previous = None
        assessments: dict[Entity, str] = {}
        for step in raw.steps:
            state = featurizer.state_features(raw.symptom_entity, assessments)
            cands = [
                featurizer.action_features(c, previous, raw.symptom_entity, assessments)
                for c in step.candidate_entities
            ]
            action = cands[step.candidate_entities.index(step.chosen_entity)]
            steps.append(AbstractStep(state=state, action=action, reward=0.0,
                                      candidates=cands))
            previous = step.chosen_entity
            assessments = dict(step.assessments)
        return AbstractTrajectory(
            trajectory_id=raw.trajectory_id,
            scenario_id=raw.scenario_id,
            scheme="topology",
            steps=steps,
            scores=raw.scores,
        )

    vocab_index = {key: i for i, key in enumerate(spec.vocabulary)}
    dim = len(spec.vocabulary)
    steps = []
    assessments = {}
    for step in raw.steps:
        state = _vocab_state(vocab_index, spec.kind, assessments, dim)
        cands = []
        for c in step.candidate_entities:
            key = _vocab_key(c, spec.kind)
            if key not in vocab_index:
                raise EntityNotInVocabulary(f"{c} not in vocabulary")
            cands.append(vocab_index[key])
        action = cands[step.candidate_entities.index(step.chosen_entity)]
        steps.append(AbstractStep(state=state, action=action, reward=0.0,
                                  candidates=cands))
        assessments = dict(step.assessments)
    return AbstractTrajectory(
        trajectory_id=raw.trajectory_id,
        scenario_id=raw.scenario_id,
        scheme=spec.kind,
        steps=steps,
        scores=raw.scores,
    )


# --- HMM hidden-state feature -------------------------------------------------

def hmm_observations(traj: AbstractTrajectory) -> np.ndarray:
    """Per-step observation for HMM fitting: state ++ action features.

    Only meaningful for the topology scheme, whose actions are real vectors.
    """
    if traj.scheme != "topology":
        raise SchemeMismatch("HMM observations require the topology scheme")
    return np.stack(
        [np.concatenate([s.state, np.asarray(s.action, dtype=float)])
         for s in traj.steps]
    )


def augment_with_hmm(traj: AbstractTrajectory, hmm: Hmm) -> AbstractTrajectory:
    """Append a 1-hot of the decoded hidden state to each step's state."""
    obs = hmm_observations(traj)
    if obs.shape[1] != hmm.n_features:
        raise DimensionMismatch(
            f"trajectory features ({obs.shape[1]}) do not match HMM emissions "
            f"({hmm.n_features})"
        )
    path = viterbi_decode(hmm, obs)
    steps = []
    for step, z in zip(traj.steps, path):
        onehot = np.zeros(hmm.n_states)
        onehot[z] = 1.0
        steps.append(replace(step, state=np.concatenate([step.state, onehot])))
    return AbstractTrajectory(
        trajectory_id=traj.trajectory_id,
        scenario_id=traj.scenario_id,
        scheme=traj.scheme,
        steps=steps,
        scores=traj.scores,
    )


# --- serialization --------------------------------------------------------------

def _action_to_json(action) -> dict:
    if isinstance(action, (int, np.integer)):
        return {"index": int(action)}
    return {"features": np.asarray(action, dtype=float).tolist()}


def _action_from_json(obj):
    if "index" in obj:
        return int(obj["index"])
    return np.asarray(obj["features"], dtype=float)


def abstract_to_json(traj: AbstractTrajectory) -> dict:
    return {
        "trajectory_id": traj.trajectory_id,
        "scenario_id": traj.scenario_id,
        "scheme": traj.scheme,
        "scores": {
            "fpc_accuracy": traj.scores.fpc_accuracy,
            "rce_identification": traj.scores.rce_identification,
        },
        "steps": [
            {
                "state": s.state.tolist(),
                "action": _action_to_json(s.action),
                "reward": s.reward,
                "candidates": [_action_to_json(c) for c in s.candidates],
            }
            for s in traj.steps
        ],
    }


def abstract_from_json(obj) -> AbstractTrajectory:
    steps = [
        AbstractStep(
            state=np.asarray(s["state"], dtype=float),
            action=_action_from_json(s["action"]),
            reward=float(s["reward"]),
            candidates=[_action_from_json(c) for c in s["candidates"]],
        )
        for s in obj["steps"]
    ]
    return AbstractTrajectory(
        trajectory_id=obj["trajectory_id"],
        scenario_id=obj["scenario_id"],
        scheme=obj["scheme"],
        steps=steps,
        scores=JudgeScores(
            fpc_accuracy=obj["scores"]["fpc_accuracy"],
            rce_identification=obj["scores"]["rce_identification"],
        ),
    )


def save_abstract_corpus(trajs, path: str | Path) -> None:
    try:
        with Path(path).open("w") as fh:
            for traj in trajs:
                fh.write(json.dumps(abstract_to_json(traj), sort_keys=True))
                fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write abstract corpus {path}: {exc}") from exc


def load_abstract_corpus(path: str | Path) -> list[AbstractTrajectory]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read abstract corpus {path}: {exc}") from exc
    out = []
    for line in lines:
        if line.strip():
            out.append(abstract_from_json(json.loads(line)))
    return out
