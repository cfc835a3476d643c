"""Client-selection policies plugged into :meth:`Simulation.run_round`."""

from __future__ import annotations

import numpy as np

from . import rl, spectral
from .errors import IsolatedNodeError
from .fed import RoundContext, RoundFeedback

SELECTOR_KINDS = ("random", "kcenter", "dqn", "dqre-scnet", "centralized")


def select_random(n_clients: int, k: int, rng: np.random.Generator) -> list[int]:
    if k > n_clients:
        raise ValueError(f"cannot pick {k} of {n_clients} clients")
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


def select_kcenter(embeddings, k: int) -> list[int]:
    """Greedy max-min cover: start at the point farthest from the centroid,
    then repeatedly add the point farthest from the chosen set."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if k > n:
        raise ValueError(f"cannot pick {k} of {n} clients")
    if not np.all(np.isfinite(X)):
        raise ValueError("embeddings must be finite")
    d_centroid = np.linalg.norm(X - X.mean(axis=0), axis=1)
    chosen = [int(np.argmax(d_centroid))]
    dist = np.linalg.norm(X - X[chosen[0]], axis=1)
    while len(chosen) < k:
        cand = dist.copy()
        cand[chosen] = -1.0
        nxt = int(np.argmax(cand))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(X - X[nxt], axis=1))
    return sorted(chosen)


def cover_radius(X, centers) -> float:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    d = np.linalg.norm(X[:, None, :] - X[list(centers)][None, :, :], axis=2)
    return float(d.min(axis=1).max())


class RandomSelector:
    name = "random"
    needs_embeddings = False

    def select(self, ctx: RoundContext) -> list[int]:
        return select_random(ctx.n_clients, ctx.k, ctx.rng)

    def observe(self, feedback: RoundFeedback) -> None:
        pass

    def dump(self) -> dict | None:
        return None


class CentralizedSelector(RandomSelector):
    """Single client holding all training data; used for the centralized baseline."""

    name = "centralized"

    def select(self, ctx: RoundContext) -> list[int]:
        return list(range(ctx.k))


class _EmbeddingSelector:
    needs_embeddings = True

    def __init__(self):
        self.embedding: rl.StateEmbedding | None = None
        self.assignments: np.ndarray | None = None
        self.last_selected: list[int] = []
        self.last_label: str | None = None

    def _embed(self, ctx: RoundContext) -> rl.StateEmbedding:
        if ctx.client_deltas is None:
            raise RuntimeError(f"{self.name} needs client deltas; call Simulation.probe() first")
        self.embedding = rl.embed_weights(ctx.client_deltas, ctx.global_flat, ctx.round_index)
        return self.embedding

    def observe(self, feedback: RoundFeedback) -> None:
        self.last_label = rl.reward_label(feedback.reward)

    def dump(self) -> dict | None:
        if self.embedding is None:
            return None
        out = {
            "embeddings": self.embedding.clients.tolist(),
            "global": self.embedding.global_.tolist(),
            "assignments": None if self.assignments is None else
            [int(a) for a in self.assignments],
            "selected": list(self.last_selected),
            "labels": {str(c): self.last_label for c in self.last_selected},
        }
        return out


class KCenterSelector(_EmbeddingSelector):
    name = "kcenter"

    def select(self, ctx: RoundContext) -> list[int]:
        emb = self._embed(ctx)
        self.last_selected = select_kcenter(emb.clients, ctx.k)
        return self.last_selected


def _scaled_states(emb: rl.StateEmbedding, round_frac: float) -> np.ndarray:
    c_scale = float(np.max(np.abs(emb.clients))) or 1.0
    g_scale = max(1.0, float(np.linalg.norm(emb.global_)))
    scaled = rl.StateEmbedding(emb.clients / c_scale, emb.global_ / g_scale, emb.round_index)
    return rl.client_states(scaled, round_frac)


class _QLearningSelector(_EmbeddingSelector):
    """Shared replay bookkeeping: a transition per selected client, completed
    with the next round's client states once they are known."""

    def __init__(self, cfg: rl.DQNConfig | None, train_steps: int):
        super().__init__()
        self.cfg = cfg or rl.DQNConfig()
        self.train_steps = train_steps
        self._pending: list[np.ndarray] = []
        self._pending_reward: float | None = None
        self._states: np.ndarray | None = None

    def _push(self, t: rl.Transition) -> None:
        raise NotImplementedError

    def _train(self) -> None:
        raise NotImplementedError

    def _states_for(self, ctx: RoundContext) -> np.ndarray:
        emb = self._embed(ctx)
        states = _scaled_states(emb, (ctx.round_index - 1) / max(1, ctx.max_rounds))
        if self._pending and self._pending_reward is not None:
            for s in self._pending:
                self._push(rl.Transition(s, self._pending_reward, states))
            self._pending = []
            self._train()
        self._states = states
        return states

    def observe(self, feedback: RoundFeedback) -> None:
        super().observe(feedback)
        chosen = [self._states[i] for i in feedback.selected]
        if feedback.terminal:
            for s in chosen:
                self._push(rl.Transition(s, feedback.reward, None))
            self._train()
            self._pending = []
        else:
            self._pending = chosen
            self._pending_reward = feedback.reward


class DQNSelector(_QLearningSelector):
    name = "dqn"

    def __init__(self, cfg: rl.DQNConfig | None = None, seed: int = 0, train_steps: int = 4):
        super().__init__(cfg, train_steps)
        self.agent = rl.DQNAgent(self.cfg, seed=seed)

    def _push(self, t):
        self.agent.replay.push(t)

    def _train(self):
        for _ in range(self.train_steps):
            self.agent.train_step()

    def select(self, ctx: RoundContext) -> list[int]:
        states = self._states_for(ctx)
        eps = self.cfg.epsilon(ctx.round_index - 1)
        self.last_selected = rl.select_epsilon_greedy(self.agent.q_values(states), eps, ctx.k,
                                                      ctx.rng)
        return self.last_selected


class DQRESCnetSelector(_QLearningSelector):
    """Ensemble Q scoring constrained by spectral clusters of the client embeddings.

    With probability epsilon the ensemble scores are replaced by uniform
    noise, so exploration still respects the cluster allocation.
    """

    name = "dqre-scnet"

    def __init__(self, cfg: rl.DQNConfig | None = None, seed: int = 0, ensemble_size: int = 3,
                 k_clusters: int | None = None, bandwidth: float | None = None,
                 train_steps: int = 4):
        super().__init__(cfg, train_steps)
        self.ensemble = rl.QEnsemble(ensemble_size, self.cfg, seed=seed)
        self.k_clusters = k_clusters
        self.bandwidth = bandwidth
        self.seed = seed
        self.cluster_model: spectral.ClusterModel | None = None

    def _push(self, t):
        self.ensemble.push(t)

    def _train(self):
        for _ in range(self.train_steps):
            self.ensemble.train_step()

    def _cluster(self, points: np.ndarray, k_clusters: int, round_index: int):
        bw = self.bandwidth
        for _ in range(8):
            try:
                return spectral.spectral_cluster(points, k_clusters, bw,
                                                 seed=self.seed * 100003 + round_index)
            except IsolatedNodeError:
                bw = 2.0 * (bw if bw is not None else spectral.median_bandwidth(points))
        raise IsolatedNodeError(-1)

    def select(self, ctx: RoundContext) -> list[int]:
        states = self._states_for(ctx)
        eps = self.cfg.epsilon(ctx.round_index - 1)
        if ctx.rng.random() < eps:
            scores = ctx.rng.random(ctx.n_clients)
        else:
            scores = self.ensemble.scores(states)
        kc = min(self.k_clusters or ctx.k, ctx.k, ctx.n_clients)
        if kc >= 2:
            self.cluster_model = self._cluster(self.embedding.clients, kc, ctx.round_index)
            self.assignments = self.cluster_model.assignments
        else:
            self.assignments = np.zeros(ctx.n_clients, dtype=int)
        self.last_selected = spectral.allocate_slots(self.assignments, scores, ctx.k)
        return self.last_selected


def make_selector(kind: str, seed: int = 0, dqn_cfg: rl.DQNConfig | None = None,
                  ensemble_size: int = 3, k_clusters: int | None = None,
                  bandwidth: float | None = None, train_steps: int = 4):
    if kind == "random":
        return RandomSelector()
    if kind == "centralized":
        return CentralizedSelector()
    if kind == "kcenter":
        return KCenterSelector()
    if kind == "dqn":
        return DQNSelector(dqn_cfg, seed, train_steps)
    if kind == "dqre-scnet":
        return DQRESCnetSelector(dqn_cfg, seed, ensemble_size, k_clusters, bandwidth, train_steps)
    raise ValueError(f"unknown selector kind {kind!r}; expected one of {SELECTOR_KINDS}")
