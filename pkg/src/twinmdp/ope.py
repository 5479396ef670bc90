"""Off-policy evaluation: fitted Q-evaluation and initial-value ranking.

FQE re-estimates the Q function of a frozen target policy from logged
transitions: Q(s_t, a_t) <- r_t + gamma * sum_a' pi(a'|s_{t+1}) Q(s_{t+1}, a'),
with terminal steps bootstrapping zero. The expectation uses the full
softmax policy, since downstream interventions consume those probabilities.
The initial-value score averages the policy-weighted Q over the logged
initial states and ranks candidate policies offline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoCandidates
from .nets import Adam, Mlp
from .offline_rl import (
    CandidateSet,
    FullVocabulary,
    NetworkQ,
    QPolicy,
    TabularQ,
    TrainConfig,
    TransitionTable,
    _space_candidates,
    _state_ids,
    action_encoding_for,
    build_transitions,
    encode_action,
)


@dataclass
class FqeEstimate:
    qhat: TabularQ | NetworkQ
    target_policy_id: str
    initial_value: float


def initial_value_score(est: FqeEstimate) -> float:
    return est.initial_value


def fqe(
    policy: QPolicy,
    eval_trajs,
    cfg: TrainConfig,
    action_space=CandidateSet(),
    policy_id: str = "",
    tol: float = 1e-5,
    max_sweeps: int = 500,
) -> FqeEstimate:
    """Fitted Q-evaluation of ``policy`` on logged trajectories.

    The evaluation set should be disjoint from the policy's training data;
    that split is the caller's responsibility.
    """
    table = build_transitions(list(eval_trajs))
    if table.index_actions:
        qhat, value = _fqe_tabular(table, policy, cfg, action_space, tol, max_sweeps)
    else:
        qhat, value = _fqe_network(table, policy, cfg, action_space, tol)
    return FqeEstimate(qhat=qhat, target_policy_id=policy_id, initial_value=value)


# --- candidate flattening ----------------------------------------------------------

def _flat_candidates(table: TransitionTable, action_space, n_actions: int):
    """(candidate action ids, owning transition ids), flattened."""
    if isinstance(action_space, FullVocabulary):
        cand = np.tile(np.arange(n_actions), table.n)
        group = np.repeat(np.arange(table.n), n_actions)
        return cand, group
    cand = np.fromiter((int(c) for c in table.cands), dtype=int, count=len(table.cands))
    group = np.repeat(np.arange(table.n), np.diff(table.cand_offsets))
    return cand, group


def _flat_policy_probs(table: TransitionTable, policy: QPolicy, action_space,
                       cand: np.ndarray, group: np.ndarray) -> np.ndarray:
    """pi(a|s) for every flattened candidate; fixed for the whole evaluation."""
    if isinstance(policy.q, TabularQ) and table.index_actions:
        pq = policy.q
        sid_pol = np.empty(table.n, dtype=int)
        for i in range(table.n):
            s = pq.state_id(table.states[i])
            sid_pol[i] = len(pq.q) if s is None else s  # extra zero row for unseen
        padded = np.vstack([pq.q, np.zeros((1, pq.n_actions))])
        logits = padded[sid_pol[group], cand] / policy.temperature
        gmax = np.full(table.n, -np.inf)
        np.maximum.at(gmax, group, logits)
        # states where every candidate is -inf (never-taken actions) -> uniform
        degenerate = ~np.isfinite(gmax)
        safe_max = np.where(degenerate, 0.0, gmax)
        expd = np.where(np.isfinite(logits), np.exp(logits - safe_max[group]), 0.0)
        expd[degenerate[group]] = 1.0
        gsum = np.zeros(table.n)
        np.add.at(gsum, group, expd)
        return expd / gsum[group]
    # generic path: one probs call per transition
    out = np.empty(len(cand))
    pos = 0
    for i in range(table.n):
        cands_i = _space_candidates(table, i, action_space)
        probs = policy.probs(table.states[i], cands_i)
        out[pos : pos + len(probs)] = probs
        pos += len(probs)
    return out


# --- tabular FQE -------------------------------------------------------------------

def _fqe_tabular(table, policy, cfg, action_space, tol, max_sweeps):
    n_actions = (
        action_space.size
        if isinstance(action_space, FullVocabulary)
        else int(max(int(c) for c in table.cands)) + 1
    )
    index, sid = _state_ids(table)
    aid = np.fromiter((int(a) for a in table.actions), dtype=int, count=table.n)
    cell = sid * n_actions + aid
    counts = np.bincount(cell, minlength=len(index) * n_actions).astype(float)
    seen = counts > 0

    cand, group = _flat_candidates(table, action_space, n_actions)
    pi_flat = _flat_policy_probs(table, policy, action_space, cand, group)
    sid_flat = sid[group]

    has_next = ~table.terminal
    nxt = table.next_step[has_next]
    rewards = table.rewards

    q = np.zeros((len(index), n_actions))
    for _ in range(max_sweeps):
        expectation = np.bincount(
            group, weights=pi_flat * q[sid_flat, cand], minlength=table.n
        )
        targets = rewards.copy()
        targets[has_next] = rewards[has_next] + cfg.gamma * expectation[nxt]
        sums = np.bincount(cell, weights=targets, minlength=q.size)
        new_flat = q.reshape(-1).copy()
        new_flat[seen] = sums[seen] / counts[seen]
        new_q = new_flat.reshape(q.shape)
        delta = float(np.max(np.abs(new_q - q)))
        q = new_q
        if delta < tol:
            break

    expectation = np.bincount(
        group, weights=pi_flat * q[sid_flat, cand], minlength=table.n
    )
    value = float(np.mean(expectation[table.episode_starts]))
    return TabularQ(state_index=index, q=q, gamma=cfg.gamma), value


# --- network FQE -------------------------------------------------------------------

def _fqe_network(table, policy, cfg, action_space, tol):
    encoding = action_encoding_for(table, action_space)
    state_dim = table.states.shape[1]
    action_dim = encoding["size"] if encoding["kind"] == "onehot" else encoding["dim"]
    net = Mlp(state_dim + action_dim, cfg.hidden_units, seed=cfg.seed)
    optimizer = Adam(net.flat_params(), step_size=cfg.step_size)
    rng = np.random.default_rng(cfg.seed)

    taken_rows = np.stack(
        [
            np.concatenate([table.states[i], encode_action(table.actions[i], encoding)])
            for i in range(table.n)
        ]
    )
    cand_counts = [
        len(_space_candidates(table, i, action_space)) for i in range(table.n)
    ]
    cand_rows = np.concatenate(
        [
            np.stack(
                [
                    np.concatenate([table.states[i], encode_action(c, encoding)])
                    for c in _space_candidates(table, i, action_space)
                ]
            )
            for i in range(table.n)
        ]
    )
    n_actions = (
        action_space.size if isinstance(action_space, FullVocabulary)
        else 0  # unused for feature actions
    )
    cand, group = (
        _flat_candidates(table, action_space, n_actions)
        if table.index_actions
        else (None, np.repeat(np.arange(table.n), cand_counts))
    )
    if table.index_actions:
        pi_flat = _flat_policy_probs(table, policy, action_space, cand, group)
    else:
        pi_flat = _flat_policy_probs(table, policy, action_space,
                                     np.zeros(len(cand_rows), dtype=int), group)

    has_next = ~table.terminal
    nxt = table.next_step[has_next]

    target = net.copy()
    prev_value = np.inf
    value = 0.0
    rounds = max(1, cfg.iterations // max(1, cfg.target_refresh))
    for _ in range(rounds):
        cand_q = target.forward(cand_rows)
        expectation = np.bincount(group, weights=pi_flat * cand_q, minlength=table.n)
        targets = table.rewards.copy()
        targets[has_next] = table.rewards[has_next] + cfg.gamma * expectation[nxt]
        for _ in range(max(1, cfg.target_refresh)):
            batch = rng.choice(table.n, size=min(cfg.batch_size, table.n),
                               replace=False)
            out, acts = net.forward_cached(taken_rows[batch])
            dout = 2.0 * (out - targets[batch]) / len(batch)
            optimizer.step(net.backward(acts, dout))
        target = net.copy()
        cand_q = net.forward(cand_rows)
        expectation = np.bincount(group, weights=pi_flat * cand_q, minlength=table.n)
        value = float(np.mean(expectation[table.episode_starts]))
        if abs(value - prev_value) < tol:
            break
        prev_value = value

    qhat = NetworkQ(net=net, state_dim=state_dim, action_encoding=encoding,
                    gamma=cfg.gamma)
    return qhat, value


def rank_policies(candidates, eval_trajs, cfg: TrainConfig, k: int,
                  action_space=CandidateSet()) -> list[dict]:
    """FQE-score every candidate policy and return the top-k.

    ``candidates`` is a list of (QPolicy, metadata) where metadata carries at
    least an "id". Sorting is by initial value descending, ties broken by id,
    so the result is independent of input order.
    """
    if not candidates:
        raise NoCandidates("no candidate policies to rank")
    if k < 1:
        raise NoCandidates("k must be >= 1")
    entries = []
    for policy, metadata in candidates:
        pid = str(metadata.get("id", ""))
        est = fqe(policy, eval_trajs, cfg, action_space=action_space, policy_id=pid)
        entries.append(
            {
                "id": pid,
                "initial_value": est.initial_value,
                "metadata": dict(metadata),
            }
        )
    entries.sort(key=lambda e: (-e["initial_value"], e["id"]))
    for rank, entry in enumerate(entries, start=1):
        entry["rank"] = rank
    return entries[: min(k, len(entries))]
