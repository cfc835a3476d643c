"""Deep-Q client scoring and the pieces around it.

Clients are scored one at a time by a shared Q network whose input is the
5-vector ``(global embedding, client embedding, round / max_rounds)``. The
round's action is the top-k* set of clients. Several such networks, differing
only in their init seed, are combined by naive-Bayes voting.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .errors import DegenerateVoteError, DimensionError

PROB_FLOOR = 1e-12
STATE_DIM = 5


class ProbabilityClampWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# returns, advantages, policy loss


def discounted_returns(rewards: Sequence[float], lam: float,
                       conventional: bool = False) -> np.ndarray:
    """Discounted reward vector of a trajectory.

    Default form: element ``j`` is ``sum_{i>=j} lam**i * r[i]``, the exponent
    being the absolute step index. ``conventional=True`` gives the usual
    suffix return ``sum_{i>=j} lam**(i-j) * r[i]``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("rewards must be a nonempty 1-D sequence")
    out = np.empty_like(r)
    acc = 0.0
    if conventional:
        for j in range(r.size - 1, -1, -1):
            acc = r[j] + lam * acc
            out[j] = acc
    else:
        terms = [lam ** i * float(r[i]) for i in range(r.size)]
        for j in range(r.size):
            acc = 0.0
            for term in terms[j:]:
                acc += term
            out[j] = acc
    return out


class ReturnBaseline:
    """Element-wise running mean of the return vectors seen so far."""

    def __init__(self):
        self._sum = np.zeros(0)
        self._count = np.zeros(0)

    def update(self, returns) -> None:
        r = np.asarray(returns, dtype=np.float64)
        if r.size > self._sum.size:
            grow = r.size - self._sum.size
            self._sum = np.concatenate([self._sum, np.zeros(grow)])
            self._count = np.concatenate([self._count, np.zeros(grow)])
        self._sum[:r.size] += r
        self._count[:r.size] += 1

    def value(self, length: int) -> np.ndarray:
        out = np.zeros(length)
        m = min(length, self._sum.size)
        seen = self._count[:m] > 0
        out[:m][seen] = self._sum[:m][seen] / self._count[:m][seen]
        return out


def advantages(returns, baseline="mean", history: ReturnBaseline | None = None):
    """Return ``(b, A)`` with ``A = R - b``.

    ``baseline`` is either an explicit array, ``"mean"`` (running mean over
    ``history`` after adding ``returns`` to it) or ``"none"`` (zeros).
    """
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        raise ValueError("returns must be nonempty")
    if isinstance(baseline, str):
        if baseline == "none":
            b = np.zeros_like(r)
        elif baseline == "mean":
            history = history if history is not None else ReturnBaseline()
            history.update(r)
            b = history.value(r.size)
        else:
            raise ValueError(f"unknown baseline mode {baseline!r}")
    else:
        b = np.asarray(baseline, dtype=np.float64)
        if b.shape != r.shape:
            raise DimensionError(f"baseline shape {b.shape} != returns shape {r.shape}")
    return b, r - b


def taken_probabilities(action_probs, taken_actions) -> np.ndarray:
    """pi(a_hat) per step. ``taken_actions`` holds indices or one-hot rows."""
    p = np.asarray(action_probs, dtype=np.float64)
    a = np.asarray(taken_actions)
    if p.ndim == 1:
        return p
    if a.ndim == 2:
        return np.sum(p * a, axis=1)
    return p[np.arange(p.shape[0]), a.astype(np.int64)]


def policy_loss(action_probs, taken_actions, adv) -> float:
    """``-sum_i log pi(a_hat_i) * A_i``; probabilities are floored at 1e-12."""
    pt = taken_probabilities(action_probs, taken_actions)
    a = np.asarray(adv, dtype=np.float64)
    if pt.shape != a.shape:
        raise DimensionError(f"{pt.shape[0]} action probabilities vs {a.shape} advantages")
    clamped = int(np.sum(pt < PROB_FLOOR))
    if clamped:
        warnings.warn(f"{clamped} taken-action probabilities clamped to {PROB_FLOOR}",
                      ProbabilityClampWarning, stacklevel=2)
    return float(-np.sum(np.log(np.maximum(pt, PROB_FLOOR)) * a))


def policy_loss_grad(action_probs, taken_actions, adv) -> np.ndarray:
    """Gradient of :func:`policy_loss` w.r.t. the probability matrix."""
    p = np.asarray(action_probs, dtype=np.float64)
    a = np.asarray(adv, dtype=np.float64)
    pt = np.maximum(taken_probabilities(p, taken_actions), PROB_FLOOR)
    coef = -a / pt
    if p.ndim == 1:
        return coef
    acts = np.asarray(taken_actions)
    onehot = acts.astype(np.float64) if acts.ndim == 2 else np.eye(p.shape[1])[acts]
    return onehot * coef[:, None]


@dataclass
class Trajectory:
    """Per-episode record for the policy-gradient path."""

    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    lam: float = 0.9

    def add(self, state, action, probs, reward) -> None:
        self.states.append(state)
        self.actions.append(action)
        self.probs.append(probs)
        self.rewards.append(reward)

    def __len__(self):
        return len(self.rewards)

    def returns(self, conventional: bool = False) -> np.ndarray:
        return discounted_returns(self.rewards, self.lam, conventional)

    def loss(self, history: ReturnBaseline | None = None, conventional: bool = False) -> float:
        _, adv = advantages(self.returns(conventional), "mean", history)
        return policy_loss(np.asarray(self.probs), np.asarray(self.actions), adv)


# ---------------------------------------------------------------------------
# reward


def reward(prev_acc: float, curr_acc: float, target_acc: float,
           reached_before: bool = False) -> float:
    """+0.1 for a strict accuracy gain, -0.1 otherwise, plus 1.0 the first
    time accuracy reaches ``target_acc``."""
    r = 0.1 if curr_acc > prev_acc else -0.1
    if curr_acc >= target_acc and not reached_before and prev_acc < target_acc:
        r += 1.0
    return r


def reward_label(r: float) -> str:
    return "reward" if r > 0 else "penalty"


# ---------------------------------------------------------------------------
# epsilon-greedy


def top_k(scores, k: int) -> list[int]:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(s.size), -s))
    return sorted(int(i) for i in order[:k])


def select_epsilon_greedy(q_values, epsilon: float, k: int,
                          rng: np.random.Generator) -> list[int]:
    q = np.asarray(q_values, dtype=np.float64)
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if k > q.size:
        raise ValueError(f"cannot pick {k} of {q.size} clients")
    if rng.random() < epsilon:
        return sorted(int(i) for i in rng.choice(q.size, size=k, replace=False))
    return top_k(q, k)


# ---------------------------------------------------------------------------
# naive-Bayes ensemble


@dataclass
class EnsembleVote:
    """``priors[k] = p(C_k)``; ``likelihoods[i, k] = p(x_i | C_k)`` for member i."""

    priors: np.ndarray
    likelihoods: np.ndarray

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=np.float64)
        self.likelihoods = np.atleast_2d(np.asarray(self.likelihoods, dtype=np.float64))
        if self.likelihoods.shape[1] != self.priors.size:
            raise DimensionError(f"{self.priors.size} priors vs "
                                 f"{self.likelihoods.shape[1]} likelihood columns")
        if np.any(self.priors < 0) or abs(self.priors.sum() - 1.0) > 1e-9:
            raise ValueError("priors must be nonnegative and sum to 1")
        if np.any(self.likelihoods < 0):
            raise ValueError("likelihoods must be nonnegative")
        if np.any(np.abs(self.likelihoods.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each member's probability row must sum to 1")

    @property
    def n_members(self) -> int:
        return self.likelihoods.shape[0]


def nb_combine(vote: EnsembleVote) -> tuple[int, np.ndarray]:
    """Posterior ``p(C_k | x) ∝ p(C_k) prod_i p(x_i | C_k)`` and its argmax.

    Computed in log space with a 1e-12 floor; the normalizer cancels.
    """
    alive = (vote.priors > 0) & np.all(vote.likelihoods > 0, axis=0)
    if not alive.any():
        raise DegenerateVoteError("every class has zero posterior mass")
    logp = np.log(np.maximum(vote.priors, PROB_FLOOR)) + \
        np.log(np.maximum(vote.likelihoods, PROB_FLOOR)).sum(axis=0)
    logp = logp - logp.max()
    post = np.exp(logp)
    post /= post.sum()
    return int(np.argmax(post)), post


# ---------------------------------------------------------------------------
# weight embedding


@dataclass
class StateEmbedding:
    clients: np.ndarray          # (n_clients, 2)
    global_: np.ndarray          # (2,)
    round_index: int = 0
    components: np.ndarray | None = None   # (2, n_params)
    rank: int = 2


def embed_weights(client_deltas, global_flat, round_index: int = 0) -> StateEmbedding:
    """Project mean-centered client deltas onto their top two principal axes.

    The global flat weights are projected onto the same axes (uncentered).
    Each axis is signed so that its largest-magnitude coordinate is
    positive. Missing rank is padded with a zero axis.
    """
    X = np.asarray(client_deltas, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two client delta vectors")
    g = np.asarray(global_flat, dtype=np.float64)
    if g.shape != (X.shape[1],):
        raise DimensionError(f"global vector shape {g.shape} vs deltas {X.shape}")
    centered = X - X.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.zeros((2, X.shape[1]))
    tol = max(X.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > max(tol, 1e-300))) if sv.size else 0
    for i in range(min(2, rank)):
        v = vt[i]
        j = int(np.argmax(np.abs(v)))
        comps[i] = v if v[j] >= 0 else -v
    return StateEmbedding(centered @ comps.T, comps @ g, round_index, comps, min(rank, 2))


def client_states(emb: StateEmbedding, round_frac: float) -> np.ndarray:
    """Q-network inputs, one row per client."""
    n = emb.clients.shape[0]
    out = np.empty((n, STATE_DIM))
    out[:, 0:2] = emb.global_
    out[:, 2:4] = emb.clients
    out[:, 4] = round_frac
    return out


# ---------------------------------------------------------------------------
# DQN


@dataclass
class DQNConfig:
    gamma: float = 0.9
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_rounds: int = 200
    sync_interval: int = 50
    replay_capacity: int = 2048
    batch_size: int = 32
    lr: float = 0.01
    hidden: tuple = (32, 32)

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.sync_interval < 1:
            raise ValueError("sync_interval must be positive")

    def epsilon(self, round_index: int) -> float:
        if self.epsilon_decay_rounds <= 0:
            return self.epsilon_end
        frac = min(1.0, round_index / self.epsilon_decay_rounds)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


@dataclass
class Transition:
    state: np.ndarray                 # (STATE_DIM,) input of the chosen client
    reward: float
    next_states: np.ndarray | None    # (n_clients, STATE_DIM); None when terminal

    @property
    def terminal(self) -> bool:
        return self.next_states is None


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def push(self, t: Transition) -> None:
        self.items.append(t)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.choice(len(self.items), size=min(batch_size, len(self.items)), replace=False)
        return [self.items[int(i)] for i in idx]


def q_network_spec(hidden: Sequence[int] = (32, 32)) -> list[nn.LayerSpec]:
    return nn.mlp_spec([STATE_DIM, *hidden, 1], output_softmax=False)


class DQNAgent:
    """Prediction network ``theta`` plus a frozen target copy ``theta_target``."""

    def __init__(self, cfg: DQNConfig | None = None, seed: int = 0):
        self.cfg = cfg or DQNConfig()
        self.specs = q_network_spec(self.cfg.hidden)
        self.theta = nn.init_params(self.specs, np.random.default_rng(seed))
        self.theta_target = self.theta.copy()
        self.replay = ReplayBuffer(self.cfg.replay_capacity)
        self.rng = np.random.default_rng([seed, 1])
        self.train_steps = 0

    def q_values(self, states) -> np.ndarray:
        return nn.forward(self.theta, self.specs, np.atleast_2d(states))[:, 0]

    def target_q_values(self, states) -> np.ndarray:
        return nn.forward(self.theta_target, self.specs, np.atleast_2d(states))[:, 0]

    def train_step(self) -> float | None:
        if len(self.replay) == 0:
            return None
        batch = self.replay.sample(self.cfg.batch_size, self.rng)
        loss, grads = td_target_and_loss(self, batch)
        self.theta = nn.sgd_step(self.theta, grads, self.cfg.lr)
        self.train_steps += 1
        if self.train_steps % self.cfg.sync_interval == 0:
            sync_target(self)
        return loss


def td_targets(agent: DQNAgent, batch: Sequence[Transition]) -> np.ndarray:
    """``r + gamma * max_a Q(s', a; theta_target)``, or ``r`` for terminal steps."""
    y = np.empty(len(batch))
    for i, t in enumerate(batch):
        y[i] = t.reward
        if not t.terminal and agent.cfg.gamma:
            y[i] += agent.cfg.gamma * float(np.max(agent.target_q_values(t.next_states)))
    return y


def td_target_and_loss(agent: DQNAgent, batch: Sequence[Transition]):
    """Mean squared TD error and its gradient w.r.t. ``theta`` only."""
    if not batch:
        raise ValueError("empty transition batch")
    y = td_targets(agent, batch)
    states = np.stack([t.state for t in batch])
    return nn.loss_and_grad(agent.theta, agent.specs, states, y[:, None],
                            nn.LossConfig(0.0, "mse"))


def sync_target(agent: DQNAgent) -> DQNAgent:
    agent.theta_target = agent.theta.copy()
    return agent


class QEnsemble:
    """``n`` DQN agents that differ only in their init seed."""

    def __init__(self, n: int = 3, cfg: DQNConfig | None = None, seed: int = 0):
        self.members = [DQNAgent(cfg, seed=seed * 1000 + i) for i in range(n)]

    def __len__(self):
        return len(self.members)

    def vote(self, states) -> EnsembleVote:
        lik = np.stack([nn.softmax(m.q_values(states)[None, :])[0] for m in self.members])
        n = lik.shape[1]
        return EnsembleVote(np.full(n, 1.0 / n), lik)

    def scores(self, states) -> np.ndarray:
        return nb_combine(self.vote(states))[1]

    def push(self, t: Transition) -> None:
        for m in self.members:
            m.replay.push(t)

    def train_step(self) -> list:
        return [m.train_step() for m in self.members]
