"""Reward learning from ranked trajectories.

Judge scores induce pairwise preferences; a small network r(s, a) is
trained so preferred trajectories receive higher predicted returns
(trajectory-ranked reward extrapolation, Brown et al. 2019). The learned
network then relabels per-turn rewards for offline policy induction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .abstraction import AbstractTrajectory
from .errors import DimensionMismatch, EmptyPairSet, IoFailure, MalformedRecord
from .nets import Adam, Mlp
from .trajectories import JudgeScores

RANKING_SIGNALS = ("fpc_only", "mean_fpc_rce")

FORMAT_VERSION = 1


@dataclass(frozen=True)
class PreferencePair:
    lower: int
    higher: int
    score_gap: float

    def __post_init__(self):
        if self.lower == self.higher:
            raise MalformedRecord("preference pair must involve two trajectories")
        if self.score_gap <= 0:
            raise MalformedRecord("score_gap must be positive")


def ranking_score(scores: JudgeScores, signal: str) -> float:
    if signal == "fpc_only":
        return scores.fpc_accuracy
    if signal == "mean_fpc_rce":
        return 0.5 * (scores.fpc_accuracy + scores.rce_identification)
    raise MalformedRecord(f"unknown ranking signal {signal!r}")


def build_pairs(
    trajs,
    signal: str = "mean_fpc_rce",
    margin: float = 5.0,
    max_pairs: int = 5000,
    seed: int = 0,
) -> list[PreferencePair]:
    """All ordered preferences whose score gap exceeds the margin.

    ``trajs`` is a sequence of (AbstractTrajectory, JudgeScores). When more
    pairs exist than max_pairs, a seeded uniform subsample is returned
    (stable order). An empty result is legitimate: equal scores prefer
    nothing.
    """
    if margin < 0:
        raise MalformedRecord("margin must be >= 0")
    values = [ranking_score(s, signal) for _, s in trajs]
    pairs = []
    n = len(values)
    for i in range(n):
        for j in range(i + 1, n):
            gap = values[j] - values[i]
            if gap > margin:
                pairs.append(PreferencePair(lower=i, higher=j, score_gap=gap))
            elif -gap > margin:
                pairs.append(PreferencePair(lower=j, higher=i, score_gap=-gap))
    if len(pairs) > max_pairs:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(pairs), size=max_pairs, replace=False))
        pairs = [pairs[k] for k in keep]
    return pairs


# --- return prediction ----------------------------------------------------------


def encode_step_rows(traj: AbstractTrajectory) -> np.ndarray:
    """(T, state_dim + action_dim) rows; index actions become 1-hot over the
    vocabulary, whose size equals the state dimension for those schemes."""
    rows = []
    for s in traj.steps:
        if isinstance(s.action, (int, np.integer)):
            onehot = np.zeros(len(s.state))
            onehot[int(s.action)] = 1.0
            rows.append(np.concatenate([s.state, onehot]))
        else:
            rows.append(np.concatenate([s.state, np.asarray(s.action, dtype=float)]))
    return np.stack(rows)


def reward_input_dim(traj: AbstractTrajectory) -> int:
    return encode_step_rows(traj).shape[1]


def new_reward_net(input_dim: int, hidden_units: int = 256, seed: int = 0) -> Mlp:
    return Mlp(input_dim, hidden_units, seed=seed)


def trajectory_return(net: Mlp, traj: AbstractTrajectory, discount: float = 1.0) -> float:
    rows = encode_step_rows(traj)
    rewards = net.forward(rows)
    if discount == 1.0:
        return float(rewards.sum())
    weights = discount ** np.arange(len(rewards))
    return float(rewards @ weights)


def trex_loss(net: Mlp, pair: PreferencePair, trajs, discount: float = 1.0) -> float:
    """Cross-entropy of the softmax over predicted returns:
    -log exp(G_higher) / (exp(G_lower) + exp(G_higher)), computed stably."""
    g_low = trajectory_return(net, trajs[pair.lower], discount)
    g_high = trajectory_return(net, trajs[pair.higher], discount)
    return float(np.logaddexp(0.0, g_low - g_high))


def trex_grad(net: Mlp, batch: list[PreferencePair], trajs,
              discount: float = 1.0) -> list[np.ndarray]:
    """Exact gradient of the mean batch loss w.r.t. net parameters."""
    if not batch:
        raise EmptyPairSet("gradient of an empty batch")
    rows_list = []
    weights = []  # d(mean loss)/d r_hat(row)
    b = len(batch)
    for pair in batch:
        low, high = trajs[pair.lower], trajs[pair.higher]
        g_low = trajectory_return(net, low, discount)
        g_high = trajectory_return(net, high, discount)
        sig = 1.0 / (1.0 + np.exp(-(g_low - g_high)))  # dloss/d(G_low - G_high)
        for traj, coeff in ((low, sig), (high, -sig)):
            rows = encode_step_rows(traj)
            gammas = discount ** np.arange(len(rows))
            rows_list.append(rows)
            weights.append(coeff * gammas / b)
    stacked = np.concatenate(rows_list, axis=0)
    dout = np.concatenate(weights)
    _, acts = net.forward_cached(stacked)
    return net.backward(acts, dout)


def pair_accuracy(net: Mlp, pairs, trajs, discount: float = 1.0) -> float:
    """Fraction of pairs whose predicted returns agree with the preference."""
    if not pairs:
        raise EmptyPairSet("accuracy of an empty pair set")
    returns = {}
    hits = 0
    for pair in pairs:
        for idx in (pair.lower, pair.higher):
            if idx not in returns:
                returns[idx] = trajectory_return(net, trajs[idx], discount)
        hits += returns[pair.higher] > returns[pair.lower]
    return hits / len(pairs)


@dataclass(frozen=True)
class RewardTrainConfig:
    hidden_units: int = 256
    epochs: int = 100
    step_size: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    discount: float = 1.0
    holdout_fraction: float = 0.1


def train_reward(pairs, trajs, config: RewardTrainConfig = RewardTrainConfig()) -> Mlp:
    """Mini-batch optimization of the mean preference loss.

    Holds out a seeded fraction of pairs and returns the parameter snapshot
    with the best held-out pair accuracy. Deterministic given config.seed.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyPairSet("cannot train a reward net without preference pairs")
    input_dim = reward_input_dim(trajs[pairs[0].lower])
    net = new_reward_net(input_dim, config.hidden_units, seed=config.seed)

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(pairs))
    n_hold = int(round(config.holdout_fraction * len(pairs)))
    n_hold = min(n_hold, len(pairs) - 1)
    holdout = [pairs[i] for i in order[:n_hold]]
    train = [pairs[i] for i in order[n_hold:]]

    optimizer = Adam(net.flat_params(), step_size=config.step_size)
    best_vec = net.params_vector()
    best_acc = pair_accuracy(net, holdout, trajs, config.discount) if holdout else -1.0

    for _ in range(config.epochs):
        perm = rng.permutation(len(train))
        for start in range(0, len(train), config.batch_size):
            batch = [train[i] for i in perm[start : start + config.batch_size]]
            grads = trex_grad(net, batch, trajs, config.discount)
            optimizer.step(grads)
        if holdout:
            acc = pair_accuracy(net, holdout, trajs, config.discount)
            if acc > best_acc:
                best_acc = acc
                best_vec = net.params_vector()

    if holdout:
        net.set_params_vector(best_vec)
    return net


# --- relabeling -----------------------------------------------------------------

RELABEL_MODES = ("irl", "sparse", "combined")


def relabel(
    traj: AbstractTrajectory,
    net: Mlp | None = None,
    mode: str = "irl",
    outcome: float | None = None,
    blend: float = 1.0,
) -> AbstractTrajectory:
    """Replace step rewards.

    irl       r_t = r(s_t, a_t) for every turn
    sparse    r_t = 0 except the final turn, which gets outcome / 100
    combined  irl rewards plus blend * outcome / 100 added to the final turn

    ``outcome`` is on the judges' 0-100 scale and is rescaled to [0, 1].
    """
    if mode not in RELABEL_MODES:
        raise MalformedRecord(f"unknown relabel mode {mode!r}")
    n = len(traj.steps)
    if mode == "sparse":
        if outcome is None:
            raise MalformedRecord("sparse relabeling needs an outcome score")
        rewards = np.zeros(n)
        rewards[-1] = outcome / 100.0
    else:
        if net is None:
            raise MalformedRecord(f"{mode} relabeling needs a reward net")
        rows = encode_step_rows(traj)
        if rows.shape[1] != net.input_dim:
            raise DimensionMismatch(
                f"trajectory rows ({rows.shape[1]}) do not match net input "
                f"({net.input_dim})"
            )
        rewards = net.forward(rows)
        if mode == "combined":
            if outcome is None:
                raise MalformedRecord("combined relabeling needs an outcome score")
            rewards = rewards.copy()
            rewards[-1] += blend * outcome / 100.0

    steps = [replace(step, reward=float(r)) for step, r in zip(traj.steps, rewards)]
    return AbstractTrajectory(
        trajectory_id=traj.trajectory_id,
        scenario_id=traj.scenario_id,
        scheme=traj.scheme,
        steps=steps,
        scores=traj.scores,
    )


# --- persistence ------------------------------------------------------------------

def save_reward_net(net: Mlp, path: str | Path) -> None:
    obj = {"format_version": FORMAT_VERSION, **net.to_json()}
    try:
        Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write reward net {path}: {exc}") from exc


def load_reward_net(path: str | Path) -> Mlp:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read reward net {path}: {exc}") from exc
    if obj.get("format_version") != FORMAT_VERSION:
        raise MalformedRecord(f"unsupported reward net format {obj.get('format_version')}")
    return Mlp.from_json(obj)
