"""Synchronous FedAvg simulation: partitioning, local SGD, aggregation and
the per-round select / train / aggregate / evaluate loop."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import nn
from .data import Dataset
from .errors import AggregationError, PartitionError, ProtocolError, SkipError
from .rl import reward as reward_fn
from .rl import reward_label


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be positive")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")


@dataclass
class ClientShard:
    client_id: int
    samples: np.ndarray
    labels: np.ndarray
    dominant_class: int | None
    indices: np.ndarray

    @property
    def sample_count(self) -> int:
        return len(self.labels)

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


@dataclass(frozen=True)
class FedConfig:
    clients_per_round: int = 4
    local_epochs: int = 1
    local_lr: float = 0.05
    batch_size: int = 20
    target_accuracy: float = 0.9
    max_rounds: int = 200

    def __post_init__(self):
        if self.clients_per_round < 1 or self.local_epochs < 0 or self.max_rounds < 1:
            raise ValueError("clients_per_round and max_rounds must be positive, "
                             "local_epochs nonnegative")
        if self.local_lr <= 0:
            raise ValueError("local_lr must be positive")
        if not 0.0 < self.target_accuracy <= 1.0:
            raise ValueError("target_accuracy must lie in (0, 1]")


@dataclass
class RoundRecord:
    round_index: int
    selected_client_ids: list
    test_accuracy: float
    test_loss: float
    reward: float
    label: str = ""
    wall_time: float = 0.0
    deltas: dict | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"round": self.round_index, "selected": list(self.selected_client_ids),
                "test_acc": self.test_accuracy, "test_loss": self.test_loss,
                "reward": self.reward}


def partition_noniid(dataset: Dataset, cfg: PartitionConfig,
                     num_classes: int | None = None) -> list[ClientShard]:
    """Split ``dataset`` into ``cfg.n_clients`` disjoint shards.

    Client ``i`` gets ``n_i`` samples (sizes differ by at most one) and the
    dominant class ``i % num_classes``. ``floor(sigma * n_i)`` of its
    samples come from that class; the rest are drawn uniformly from what is
    left of the whole pool.
    """
    num_classes = dataset.num_classes if num_classes is None else num_classes
    n = len(dataset)
    if n == 0:
        raise PartitionError("dataset is empty")
    if cfg.n_clients > n:
        raise PartitionError(f"{cfg.n_clients} clients but only {n} samples")
    rng = np.random.default_rng(cfg.seed)
    base, extra = divmod(n, cfg.n_clients)
    sizes = [base + (1 if i < extra else 0) for i in range(cfg.n_clients)]
    pools = [list(rng.permutation(np.nonzero(dataset.labels == c)[0])) for c in range(num_classes)]
    chosen: list[list[int]] = []
    dominants: list[int | None] = []
    for i, size in enumerate(sizes):
        dom = i % num_classes
        take = int(np.floor(cfg.sigma * size + 1e-9))
        if take > len(pools[dom]):
            raise PartitionError(
                f"class {dom} has {len(pools[dom])} samples left, client {i} needs {take}")
        chosen.append(pools[dom][:take])
        pools[dom] = pools[dom][take:]
        dominants.append(dom if cfg.sigma > 0 else None)
    rest = rng.permutation(np.concatenate([np.asarray(p, dtype=np.int64) for p in pools]))
    pos = 0
    shards = []
    for i, size in enumerate(sizes):
        need = size - len(chosen[i])
        idx = np.sort(np.concatenate([np.asarray(chosen[i], dtype=np.int64), rest[pos:pos + need]]))
        pos += need
        shards.append(ClientShard(i, dataset.samples[idx], dataset.labels[idx], dominants[i], idx))
    return shards


def client_rng(run_seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([run_seed, round_index, client_id])


def local_train(global_params: nn.ModelParams, shard: ClientShard, epochs: int, lr: float,
                batch_size: int, specs: Sequence[nn.LayerSpec], rng: np.random.Generator,
                loss_cfg: nn.LossConfig = nn.LossConfig()) -> nn.ModelParams:
    """Minibatch SGD on one shard; ``global_params`` is left untouched."""
    if shard.sample_count == 0:
        raise SkipError(f"client {shard.client_id} has an empty shard")
    params = global_params.copy()
    for _ in range(epochs):
        order = rng.permutation(shard.sample_count)
        for start in range(0, shard.sample_count, batch_size):
            idx = order[start:start + batch_size]
            _, grads = nn.loss_and_grad(params, specs, shard.samples[idx], shard.labels[idx],
                                        loss_cfg, rng)
            params = nn.sgd_step(params, grads, lr)
    return params


def fedavg_aggregate(local_params: Sequence[nn.ModelParams], weights: Sequence[float],
                     client_ids: Sequence[int] | None = None) -> nn.ModelParams:
    """Weighted coordinate-wise mean, reduced in ascending client-id order."""
    if not local_params:
        raise AggregationError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(local_params),) or np.any(w < 0) or w.sum() <= 0:
        raise AggregationError("weights must be nonnegative, one per model, with positive sum")
    ref = local_params[0]
    for p in local_params[1:]:
        if not p.same_structure(ref):
            raise AggregationError("local models differ in structure")
    order = np.argsort(client_ids, kind="stable") if client_ids is not None \
        else np.arange(len(local_params))
    w = w / w.sum()
    flat = np.zeros(ref.size)
    for i in order:
        flat += w[i] * local_params[i].flatten()
    return nn.ModelParams.unflatten(flat, ref)


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    scores: np.ndarray
    predictions: np.ndarray


def evaluate(params: nn.ModelParams, specs: Sequence[nn.LayerSpec], testset: Dataset,
             batch_size: int = 1000) -> EvalResult:
    if len(testset) == 0:
        raise ValueError("empty test set")
    rng = np.random.default_rng(0)
    chunks = []
    for s in range(0, len(testset), batch_size):
        chunks.append(nn.forward(params, specs, testset.samples[s:s + batch_size], rng))
    out = np.concatenate(chunks)
    probs = out if specs[-1].kind == nn.SOFTMAX else nn.softmax(out)
    preds = np.argmax(probs, axis=1)
    p_true = probs[np.arange(len(testset)), testset.labels]
    loss = float(-np.mean(np.log(np.maximum(p_true, 1e-300))))
    acc = float(np.mean(preds == testset.labels))
    return EvalResult(acc, loss, probs, preds)


# ---------------------------------------------------------------------------
# round loop


@dataclass
class RoundContext:
    round_index: int
    n_clients: int
    k: int
    max_rounds: int
    global_flat: np.ndarray
    client_deltas: np.ndarray | None     # (n_clients, n_params) latest known update
    rng: np.random.Generator


@dataclass
class RoundFeedback:
    round_index: int
    selected: list
    prev_accuracy: float
    accuracy: float
    reward: float
    terminal: bool


class Selector(Protocol):
    name: str
    needs_embeddings: bool

    def select(self, ctx: RoundContext) -> list[int]: ...

    def observe(self, feedback: RoundFeedback) -> None: ...


class Simulation:
    """Server-side state of one federated run."""

    def __init__(self, specs, shards: list[ClientShard], testset: Dataset, cfg: FedConfig,
                 seed: int = 0, workers: int = 1, init_params: nn.ModelParams | None = None,
                 keep_deltas: bool = False):
        if cfg.clients_per_round > len(shards):
            raise ProtocolError(f"k*={cfg.clients_per_round} exceeds {len(shards)} clients")
        self.specs = list(specs)
        self.shards = shards
        self.testset = testset
        self.cfg = cfg
        self.seed = seed
        self.workers = max(1, workers)
        self.keep_deltas = keep_deltas
        self.params = init_params if init_params is not None else \
            nn.init_params(self.specs, np.random.default_rng([seed, 0xC0DE]))
        self.records: list[RoundRecord] = []
        self.round_index = 0
        self.client_deltas: np.ndarray | None = None
        self.reached = False
        first = evaluate(self.params, self.specs, testset)
        self.accuracy = first.accuracy
        self.selector_rng = np.random.default_rng([seed, 0x5E1])

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    def _train_clients(self, ids: Sequence[int], round_index: int) -> list[nn.ModelParams]:
        c = self.cfg

        def job(cid):
            return local_train(self.params, self.shards[cid], c.local_epochs, c.local_lr,
                               c.batch_size, self.specs, client_rng(self.seed, round_index, cid))

        if self.workers > 1 and len(ids) > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                return list(ex.map(job, ids))
        return [job(cid) for cid in ids]

    def probe(self) -> None:
        """Have every client train once on the initial model so that each has
        a weight delta to embed. The global model is not changed."""
        g = self.params.flatten()
        locals_ = self._train_clients(range(self.n_clients), 0)
        self.client_deltas = np.stack([p.flatten() - g for p in locals_])

    def context(self) -> RoundContext:
        return RoundContext(self.round_index + 1, self.n_clients, self.cfg.clients_per_round,
                            self.cfg.max_rounds, self.params.flatten(), self.client_deltas,
                            self.selector_rng)

    def run_round(self, selector: Selector) -> RoundRecord:
        t0 = time.perf_counter()
        ctx = self.context()
        selected = [int(i) for i in selector.select(ctx)]
        k = self.cfg.clients_per_round
        if len(selected) != k or len(set(selected)) != k or \
                not all(0 <= i < self.n_clients for i in selected):
            raise ProtocolError(f"selector {selector.name!r} returned {selected}, "
                                f"expected {k} distinct ids in [0, {self.n_clients})")
        selected = sorted(selected)
        locals_ = self._train_clients(selected, ctx.round_index)
        g = ctx.global_flat
        deltas = {cid: p.flatten() - g for cid, p in zip(selected, locals_)}
        if self.client_deltas is not None:
            for cid, d in deltas.items():
                self.client_deltas[cid] = d
        self.params = fedavg_aggregate(locals_, [self.shards[i].sample_count for i in selected],
                                       selected)
        ev = evaluate(self.params, self.specs, self.testset)
        prev = self.accuracy
        r = reward_fn(prev, ev.accuracy, self.cfg.target_accuracy, self.reached)
        self.reached = self.reached or ev.accuracy >= self.cfg.target_accuracy
        self.accuracy = ev.accuracy
        self.round_index = ctx.round_index
        rec = RoundRecord(ctx.round_index, selected, ev.accuracy, ev.loss, r, reward_label(r),
                          time.perf_counter() - t0, deltas if self.keep_deltas else None)
        self.records.append(rec)
        terminal = ctx.round_index >= self.cfg.max_rounds
        selector.observe(RoundFeedback(ctx.round_index, selected, prev, ev.accuracy, r, terminal))
        return rec
