"""Offline policy induction: conservative Q-learning and behavior cloning.

Two Q-function forms exist. The tabular form hashes exact state vectors and
is meant for the small discrete name/nametype schemes; the network form
scores (state, action-representation) rows with a small MLP and is required
for the topology scheme, whose actions are feature vectors.

The conservative penalty and the Bellman backup both range over the
candidate actions recorded at each turn (or the full vocabulary, when the
action space says so), mirroring how the deployed policy only ever scores
the current turn's candidates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .abstraction import AbstractTrajectory
from .errors import (
    DimensionMismatch,
    EmptyData,
    IoFailure,
    MalformedRecord,
    MissingCandidateSets,
)
from .nets import Adam, Mlp, grouped_max, grouped_softmax

POLICY_FORMAT_VERSION = 1


# --- action spaces ---------------------------------------------------------------

@dataclass(frozen=True)
class FullVocabulary:
    """Every vocabulary index is available at every state."""

    size: int


@dataclass(frozen=True)
class CandidateSet:
    """Only the candidates recorded at each turn are available."""


# --- transition table -------------------------------------------------------------

@dataclass
class TransitionTable:
    """Flat view over trajectory steps for vectorized training.

    Candidate actions are stored flattened with offsets; entry i of a
    transition's candidate slice corresponds to the raw step's i-th
    candidate.
    """

    states: np.ndarray            # (N, S)
    actions: list                 # per-transition action repr
    action_pos: np.ndarray        # (N,) index of the taken action in its candidate slice
    rewards: np.ndarray           # (N,)
    terminal: np.ndarray          # (N,) bool
    next_step: np.ndarray         # (N,) transition index of the following step, -1 at end
    cand_offsets: np.ndarray      # (N+1,)
    cands: list                   # flattened candidate reprs
    episode_starts: np.ndarray    # (n_episodes,) transition index of each first step
    index_actions: bool = field(default=False)

    @property
    def n(self) -> int:
        return len(self.rewards)

    def cand_slice(self, i: int):
        return self.cands[self.cand_offsets[i] : self.cand_offsets[i + 1]]


def build_transitions(trajs: list[AbstractTrajectory]) -> TransitionTable:
    if not trajs:
        raise EmptyData("no trajectories")
    states, actions, action_pos, rewards, terminal, next_step = [], [], [], [], [], []
    cands: list = []
    offsets = [0]
    starts = []
    idx = 0
    index_actions = isinstance(trajs[0].steps[0].action, (int, np.integer))
    for traj in trajs:
        starts.append(idx)
        for t, step in enumerate(traj.steps):
            if not step.candidates:
                raise MissingCandidateSets(
                    f"trajectory {traj.trajectory_id} turn {t} has no candidates"
                )
            states.append(np.asarray(step.state, dtype=float))
            actions.append(step.action)
            pos = _find_action(step.candidates, step.action)
            action_pos.append(pos)
            rewards.append(step.reward)
            last = t == len(traj.steps) - 1
            terminal.append(last)
            next_step.append(-1 if last else idx + 1)
            cands.extend(step.candidates)
            offsets.append(len(cands))
            idx += 1
    return TransitionTable(
        states=np.stack(states),
        actions=actions,
        action_pos=np.asarray(action_pos),
        rewards=np.asarray(rewards, dtype=float),
        terminal=np.asarray(terminal, dtype=bool),
        next_step=np.asarray(next_step),
        cand_offsets=np.asarray(offsets),
        cands=cands,
        episode_starts=np.asarray(starts),
        index_actions=index_actions,
    )


def _find_action(candidates, action) -> int:
    if isinstance(action, (int, np.integer)):
        for i, c in enumerate(candidates):
            if int(c) == int(action):
                return i
    else:
        for i, c in enumerate(candidates):
            if np.array_equal(np.asarray(c, dtype=float), np.asarray(action, dtype=float)):
                return i
    raise MalformedRecord("taken action missing from its candidate set")


# --- Q functions -------------------------------------------------------------------

class TabularQ:
    """Exact state-vector table over a fixed index action space."""

    def __init__(self, state_index: dict, q: np.ndarray, gamma: float):
        self.state_index = state_index
        self.q = q
        self.gamma = gamma

    @property
    def n_actions(self) -> int:
        return self.q.shape[1]

    def state_id(self, state: np.ndarray) -> int | None:
        return self.state_index.get(tuple(np.asarray(state, dtype=float).tolist()))

    def values(self, state: np.ndarray, candidates) -> np.ndarray:
        sid = self.state_id(state)
        if sid is None:
            return np.zeros(len(candidates))
        return self.q[sid, np.asarray(candidates, dtype=int)]


class NetworkQ:
    """MLP over concatenated (state, action representation) rows."""

    def __init__(self, net: Mlp, state_dim: int, action_encoding: dict, gamma: float):
        self.net = net
        self.state_dim = state_dim
        self.action_encoding = dict(action_encoding)
        self.gamma = gamma

    def encode(self, state: np.ndarray, candidates) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if state.shape[0] != self.state_dim:
            raise DimensionMismatch(
                f"state dim {state.shape[0]} != expected {self.state_dim}"
            )
        rows = np.empty((len(candidates), self.net.input_dim))
        for i, c in enumerate(candidates):
            rows[i] = np.concatenate([state, encode_action(c, self.action_encoding)])
        return rows

    def values(self, state: np.ndarray, candidates) -> np.ndarray:
        return self.net.forward(self.encode(state, candidates))


def encode_action(action, encoding: dict) -> np.ndarray:
    if encoding["kind"] == "onehot":
        vec = np.zeros(encoding["size"])
        vec[int(action)] = 1.0
        return vec
    feats = np.asarray(action, dtype=float)
    if feats.shape[0] != encoding["dim"]:
        raise DimensionMismatch(
            f"action features ({feats.shape[0]}) != expected ({encoding['dim']})"
        )
    return feats


def action_encoding_for(table: TransitionTable, action_space) -> dict:
    if table.index_actions:
        if isinstance(action_space, FullVocabulary):
            size = action_space.size
        else:
            size = int(max(int(c) for c in table.cands)) + 1
        return {"kind": "onehot", "size": size}
    return {"kind": "features", "dim": int(np.asarray(table.cands[0]).shape[0])}


# --- softmax policy ----------------------------------------------------------------

@dataclass
class QPolicy:
    """Softmax-over-candidates policy induced by a Q function."""

    q: TabularQ | NetworkQ
    temperature: float = 1.0

    def probs(self, state: np.ndarray, candidates) -> np.ndarray:
        return policy_probs(self, state, candidates)


def policy_probs(policy: QPolicy, state: np.ndarray, candidates) -> np.ndarray:
    """softmax(Q(state, c) / temperature) over the given candidates."""
    if len(candidates) == 0:
        raise EmptyData("policy_probs needs at least one candidate")
    values = np.asarray(policy.q.values(state, candidates), dtype=float)
    logits = values / policy.temperature
    peak = logits.max()
    if not np.isfinite(peak):  # untrained region: fall back to uniform
        return np.full(len(candidates), 1.0 / len(candidates))
    expd = np.exp(logits - peak)
    return expd / expd.sum()


# --- training configuration ----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    gamma: float = 0.99
    iterations: int = 2000
    step_size: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    hidden_units: int = 256
    target_refresh: int = 200
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise MalformedRecord("gamma must be in [0, 1)")
        if self.alpha < 0:
            raise MalformedRecord("alpha must be >= 0")


# --- conservative Q-learning -----------------------------------------------------------

def cql_train(trajs, cfg: TrainConfig, action_space=CandidateSet(),
              form: str | None = None):
    """Fit a Q function by conservative Q-learning.

    Minimizes the squared Bellman residual against a periodically refreshed
    target copy plus alpha * (logsumexp over candidate Q - Q of the taken
    action). alpha = 0 recovers plain fitted Q-learning. Terminal steps
    bootstrap with zero. Deterministic given cfg.seed.
    """
    table = build_transitions(list(trajs))
    if form is None:
        form = "tabular" if table.index_actions else "network"
    if form == "tabular" and not table.index_actions:
        raise MissingCandidateSets("tabular Q needs index actions (name/nametype schemes)")
    if form == "tabular":
        return _cql_tabular(table, cfg, action_space)
    return _cql_network(table, cfg, action_space)


def _state_ids(table: TransitionTable):
    index: dict = {}
    ids = np.empty(table.n, dtype=int)
    for i in range(table.n):
        key = tuple(table.states[i].tolist())
        ids[i] = index.setdefault(key, len(index))
    return index, ids


def _tabular_candidates(table: TransitionTable, action_space, n_actions: int):
    """(flat candidate action ids, offsets) honoring the action space."""
    if isinstance(action_space, FullVocabulary):
        flat = np.tile(np.arange(n_actions), table.n)
        offsets = np.arange(table.n + 1) * n_actions
        return flat, offsets
    flat = np.asarray([int(c) for c in table.cands])
    return flat, table.cand_offsets.copy()


def _cql_tabular(table: TransitionTable, cfg: TrainConfig, action_space) -> TabularQ:
    n_actions = (
        action_space.size
        if isinstance(action_space, FullVocabulary)
        else int(max(int(c) for c in table.cands)) + 1
    )
    index, sid = _state_ids(table)
    aid = np.asarray([int(a) for a in table.actions])
    cand_flat, cand_off = _tabular_candidates(table, action_space, n_actions)
    cand_group = np.repeat(np.arange(table.n), np.diff(cand_off))
    cand_sid = sid[cand_group]

    has_next = ~table.terminal
    nxt = table.next_step[has_next]
    next_cand_counts = np.diff(cand_off)[nxt]
    next_cand_group_ids = np.repeat(np.arange(len(nxt)), next_cand_counts)
    next_cand_flat = np.concatenate(
        [cand_flat[cand_off[j] : cand_off[j + 1]] for j in nxt]
    ) if len(nxt) else np.empty(0, dtype=int)
    next_cand_sid = sid[np.repeat(nxt, next_cand_counts)] if len(nxt) else np.empty(0, dtype=int)

    n_states = len(index)
    q = np.zeros((n_states, n_actions))
    cell = sid * n_actions + aid
    counts = np.bincount(cell, minlength=n_states * n_actions).astype(float)
    seen = counts > 0

    rounds = max(1, cfg.iterations // max(1, cfg.target_refresh))
    for _ in range(rounds):
        targets = table.rewards.copy()
        if len(nxt):
            next_vals = q[next_cand_sid, next_cand_flat]
            best = grouped_max(next_vals, next_cand_group_ids, len(nxt))
            targets[has_next] = table.rewards[has_next] + cfg.gamma * best
        if cfg.alpha == 0.0:
            sums = np.bincount(cell, weights=targets, minlength=n_states * n_actions)
            q_flat = q.reshape(-1)
            q_flat[seen] = sums[seen] / counts[seen]
            q = q_flat.reshape(n_states, n_actions)
        else:
            for _ in range(max(1, cfg.target_refresh)):
                grad = np.zeros_like(q).reshape(-1)
                resid = q.reshape(-1)[cell] - targets
                np.add.at(grad, cell, 2.0 * resid / table.n)
                probs = grouped_softmax(
                    q[cand_sid, cand_flat], cand_group, table.n
                )
                np.add.at(
                    grad,
                    cand_sid * n_actions + cand_flat,
                    cfg.alpha * probs / table.n,
                )
                np.add.at(grad, cell, -cfg.alpha / table.n)
                q = q - cfg.step_size * grad.reshape(q.shape)
    return TabularQ(state_index=index, q=q, gamma=cfg.gamma)


def _cql_network(table: TransitionTable, cfg: TrainConfig, action_space) -> NetworkQ:
    encoding = action_encoding_for(table, action_space)
    state_dim = table.states.shape[1]
    action_dim = encoding["size"] if encoding["kind"] == "onehot" else encoding["dim"]
    net = Mlp(state_dim + action_dim, cfg.hidden_units, seed=cfg.seed)
    target = net.copy()
    optimizer = Adam(net.flat_params(), step_size=cfg.step_size)
    rng = np.random.default_rng(cfg.seed)

    taken_rows = np.stack(
        [
            np.concatenate([table.states[i], encode_action(table.actions[i], encoding)])
            for i in range(table.n)
        ]
    )
    cand_rows_by_step = [
        np.stack(
            [
                np.concatenate([table.states[i], encode_action(c, encoding)])
                for c in _space_candidates(table, i, action_space)
            ]
        )
        for i in range(table.n)
    ]

    for it in range(cfg.iterations):
        if it % max(1, cfg.target_refresh) == 0:
            target = net.copy()
        batch = rng.choice(table.n, size=min(cfg.batch_size, table.n), replace=False)
        b = len(batch)

        targets = table.rewards[batch].copy()
        live = [k for k, i in enumerate(batch) if not table.terminal[i]]
        if live:
            next_rows = np.concatenate(
                [cand_rows_by_step[table.next_step[batch[k]]] for k in live]
            )
            group = np.repeat(
                np.arange(len(live)),
                [len(cand_rows_by_step[table.next_step[batch[k]]]) for k in live],
            )
            best = grouped_max(target.forward(next_rows), group, len(live))
            for pos, k in enumerate(live):
                targets[k] += cfg.gamma * best[pos]

        batch_taken = taken_rows[batch]
        cand_stack = np.concatenate([cand_rows_by_step[i] for i in batch])
        cand_group = np.repeat(
            np.arange(b), [len(cand_rows_by_step[i]) for i in batch]
        )

        stacked = np.concatenate([batch_taken, cand_stack])
        out, acts = net.forward_cached(stacked)
        q_taken = out[:b]
        q_cands = out[b:]

        dout = np.zeros_like(out)
        dout[:b] = 2.0 * (q_taken - targets) / b
        if cfg.alpha > 0:
            probs = grouped_softmax(q_cands, cand_group, b)
            dout[b:] += cfg.alpha * probs / b
            dout[:b] += -cfg.alpha / b
        grads = net.backward(acts, dout)
        optimizer.step(grads)

    return NetworkQ(net=net, state_dim=state_dim, action_encoding=encoding,
                    gamma=cfg.gamma)


def _space_candidates(table: TransitionTable, i: int, action_space):
    if isinstance(action_space, FullVocabulary):
        return list(range(action_space.size))
    return table.cand_slice(i)


# --- behavior cloning ---------------------------------------------------------------

def bc_train(trajs, cfg: TrainConfig, action_space=CandidateSet(),
             form: str | None = None) -> QPolicy:
    """Clone the logged behavior under the softmax-over-candidates model.

    Tabular: logits are log visit counts, so the softmax over candidates
    reproduces the empirical conditional frequencies. Network: maximizes the
    log-likelihood of taken actions by minibatch gradient ascent.
    """
    table = build_transitions(list(trajs))
    if form is None:
        form = "tabular" if table.index_actions else "network"
    if form == "tabular":
        if not table.index_actions:
            raise MissingCandidateSets("tabular BC needs index actions")
        n_actions = (
            action_space.size
            if isinstance(action_space, FullVocabulary)
            else int(max(int(c) for c in table.cands)) + 1
        )
        index, sid = _state_ids(table)
        aid = np.asarray([int(a) for a in table.actions])
        counts = np.zeros((len(index), n_actions))
        np.add.at(counts, (sid, aid), 1.0)
        with np.errstate(divide="ignore"):
            q = np.log(counts)
        return QPolicy(q=TabularQ(state_index=index, q=q, gamma=cfg.gamma),
                       temperature=cfg.temperature)

    encoding = action_encoding_for(table, action_space)
    state_dim = table.states.shape[1]
    action_dim = encoding["size"] if encoding["kind"] == "onehot" else encoding["dim"]
    net = Mlp(state_dim + action_dim, cfg.hidden_units, seed=cfg.seed)
    optimizer = Adam(net.flat_params(), step_size=cfg.step_size)
    rng = np.random.default_rng(cfg.seed)

    cand_rows_by_step = [
        np.stack(
            [
                np.concatenate([table.states[i], encode_action(c, encoding)])
                for c in table.cand_slice(i)
            ]
        )
        for i in range(table.n)
    ]

    for _ in range(cfg.iterations):
        batch = rng.choice(table.n, size=min(cfg.batch_size, table.n), replace=False)
        b = len(batch)
        rows = np.concatenate([cand_rows_by_step[i] for i in batch])
        group = np.repeat(np.arange(b), [len(cand_rows_by_step[i]) for i in batch])
        out, acts = net.forward_cached(rows)
        probs = grouped_softmax(out, group, b)
        dout = probs / b
        offsets = np.concatenate([[0], np.cumsum([len(cand_rows_by_step[i]) for i in batch])])
        taken_rows_idx = offsets[:-1] + table.action_pos[batch]
        dout[taken_rows_idx] -= 1.0 / b
        grads = net.backward(acts, dout)
        optimizer.step(grads)

    q = NetworkQ(net=net, state_dim=state_dim, action_encoding=encoding,
                 gamma=cfg.gamma)
    return QPolicy(q=q, temperature=cfg.temperature)


# --- persistence ----------------------------------------------------------------------

def save_policy(policy: QPolicy, path: str | Path, metadata: dict | None = None) -> None:
    q = policy.q
    obj = {
        "format_version": POLICY_FORMAT_VERSION,
        "temperature": policy.temperature,
        "gamma": q.gamma,
        "metadata": metadata or {},
    }
    if isinstance(q, TabularQ):
        states = sorted(q.state_index, key=lambda s: q.state_index[s])
        obj["form"] = "tabular"
        obj["states"] = [list(s) for s in states]
        obj["q"] = q.q.tolist()
    else:
        obj["form"] = "network"
        obj["state_dim"] = q.state_dim
        obj["action_encoding"] = q.action_encoding
        obj["net"] = q.net.to_json()
    try:
        Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write policy {path}: {exc}") from exc


def load_policy(path: str | Path) -> tuple[QPolicy, dict]:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read policy {path}: {exc}") from exc
    if obj.get("format_version") != POLICY_FORMAT_VERSION:
        raise MalformedRecord(f"unsupported policy format {obj.get('format_version')}")
    if obj["form"] == "tabular":
        index = {tuple(s): i for i, s in enumerate(obj["states"])}
        q = TabularQ(state_index=index, q=np.asarray(obj["q"], dtype=float),
                     gamma=obj["gamma"])
    else:
        q = NetworkQ(
            net=Mlp.from_json(obj["net"]),
            state_dim=obj["state_dim"],
            action_encoding=obj["action_encoding"],
            gamma=obj["gamma"],
        )
    return QPolicy(q=q, temperature=obj["temperature"]), obj.get("metadata", {})
