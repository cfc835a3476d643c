import numpy as np
import pytest

from fedsel import fed, nn, rl
from fedsel.data import Dataset, synth_blobs
from fedsel.errors import AggregationError, PartitionError, ProtocolError, SkipError


def balanced(n_per_class=1000, k=10, d=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), n_per_class)
    return Dataset(rng.random((k * n_per_class, d)), labels, k)


def test_partition_iid_proportions():
    ds = balanced()
    shards = fed.partition_noniid(ds, fed.PartitionConfig(10, 0.0, seed=3))
    for s in shards:
        frac = s.class_counts(10) / s.sample_count
        assert np.all(np.abs(frac - 0.1) <= 0.05)


def test_partition_sigma_one_single_label():
    ds = balanced(100)
    shards = fed.partition_noniid(ds, fed.PartitionConfig(10, 1.0, seed=0))
    for s in shards:
        assert np.unique(s.labels).tolist() == [s.client_id % 10]
        assert s.dominant_class == s.client_id


@pytest.mark.parametrize("sigma", [0.0, 0.3, 0.8, 1.0])
def test_partition_is_a_partition(sigma):
    ds = balanced(50)
    shards = fed.partition_noniid(ds, fed.PartitionConfig(10, sigma, seed=1))
    idx = np.concatenate([s.indices for s in shards])
    assert np.array_equal(np.sort(idx), np.arange(len(ds)))
    for s in shards:
        assert s.sample_count == len(s.samples) == len(s.labels)
        assert np.array_equal(s.labels, ds.labels[s.indices])


def test_partition_dominant_share():
    ds = balanced(200)
    shards = fed.partition_noniid(ds, fed.PartitionConfig(20, 0.8, seed=0))
    for s in shards:
        # floor(0.8 * 100) from the dominant class, plus whatever the uniform rest adds
        assert s.class_counts(10)[s.client_id % 10] >= 80


def test_partition_errors():
    ds = balanced(10)
    with pytest.raises(PartitionError):
        fed.partition_noniid(ds, fed.PartitionConfig(1000, 0.0))
    with pytest.raises(PartitionError):
        # 2 clients share class 0 at sigma 1: 2 * 50 > 10 available
        fed.partition_noniid(ds, fed.PartitionConfig(2, 1.0))
    with pytest.raises(ValueError):
        fed.PartitionConfig(5, 1.5)


def test_partition_seeded():
    ds = balanced(30)
    a = fed.partition_noniid(ds, fed.PartitionConfig(7, 0.5, seed=9))
    b = fed.partition_noniid(ds, fed.PartitionConfig(7, 0.5, seed=9))
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))


def make_shard(n=1, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 4))
    y = rng.integers(0, 3, n)
    return fed.ClientShard(0, x, y, None, np.arange(n))


def test_local_train_zero_epochs():
    specs = nn.mlp_spec([4, 5, 3])
    g = nn.init_params(specs, np.random.default_rng(0))
    out = fed.local_train(g, make_shard(5), 0, 0.1, 2, specs, np.random.default_rng(1))
    assert out.equals(g)


def test_local_train_single_step_oracle():
    specs = nn.mlp_spec([4, 5, 3])
    g = nn.init_params(specs, np.random.default_rng(0))
    shard = make_shard(1)
    _, grads = nn.loss_and_grad(g, specs, shard.samples, shard.labels, nn.LossConfig())
    expected = nn.sgd_step(g, grads, 0.05)
    out = fed.local_train(g, shard, 1, 0.05, 1, specs, np.random.default_rng(1))
    assert np.array_equal(out.flatten(), expected.flatten())
    # the caller's params are untouched
    assert np.array_equal(g.flatten(), nn.init_params(specs, np.random.default_rng(0)).flatten())


def test_local_train_empty_shard():
    specs = nn.mlp_spec([4, 3])
    g = nn.init_params(specs, np.random.default_rng(0))
    empty = fed.ClientShard(3, np.zeros((0, 4)), np.zeros(0, dtype=int), None, np.zeros(0, int))
    with pytest.raises(SkipError):
        fed.local_train(g, empty, 1, 0.1, 2, specs, np.random.default_rng(0))


def test_local_train_loss_nonincreasing():
    specs = nn.mlp_spec([2, 8, 3])
    good = 0
    for seed in range(20):
        ds = synth_blobs(60, 3, 2, 3.0, seed=seed)
        shard = fed.ClientShard(0, ds.samples, ds.labels, None, np.arange(60))
        p = nn.init_params(specs, np.random.default_rng(seed))
        losses = [nn.loss_and_grad(p, specs, ds.samples, ds.labels, nn.LossConfig())[0]]
        for e in range(5):
            p = fed.local_train(p, shard, 1, 0.01, 10, specs, fed.client_rng(seed, e, 0))
            losses.append(nn.loss_and_grad(p, specs, ds.samples, ds.labels, nn.LossConfig())[0])
        good += all(b <= a for a, b in zip(losses, losses[1:]))
    assert good >= 18


def scalar(v):
    return nn.ModelParams([(np.array([[v]]), np.array([0.0]))])


def test_fedavg_weighted_mean_example():
    out = fed.fedavg_aggregate([scalar(1.0), scalar(3.0)], [1, 3])
    assert out.layers[0][0][0, 0] == 2.5


def test_fedavg_random_oracle(rng):
    specs = nn.mlp_spec([6, 4, 3])
    for _ in range(10):
        m = int(rng.integers(2, 7))
        locals_ = [nn.init_params(specs, rng) for _ in range(m)]
        w = rng.integers(1, 500, m).astype(float)
        oracle = sum(wi * p.flatten() for wi, p in zip(w, locals_)) / w.sum()
        out = fed.fedavg_aggregate(locals_, w).flatten()
        assert np.max(np.abs(out - oracle)) <= 1e-12
        stack = np.stack([p.flatten() for p in locals_])
        assert np.all(out >= stack.min(axis=0) - 1e-12)
        assert np.all(out <= stack.max(axis=0) + 1e-12)


def test_fedavg_idempotent(rng):
    p = nn.init_params(nn.mlp_spec([5, 3]), rng)
    out = fed.fedavg_aggregate([p.copy() for _ in range(4)], [3, 1, 7, 2])
    assert np.max(np.abs(out.flatten() - p.flatten())) <= 1e-12


def test_fedavg_client_order_fixed(rng):
    specs = nn.mlp_spec([5, 3])
    ps = [nn.init_params(specs, rng) for _ in range(3)]
    a = fed.fedavg_aggregate(ps, [1, 2, 3], client_ids=[4, 9, 2])
    b = fed.fedavg_aggregate(ps[::-1], [3, 2, 1], client_ids=[2, 9, 4])
    assert np.array_equal(a.flatten(), b.flatten())


def test_fedavg_errors(rng):
    p = nn.init_params(nn.mlp_spec([5, 3]), rng)
    q = nn.init_params(nn.mlp_spec([5, 4]), rng)
    with pytest.raises(AggregationError):
        fed.fedavg_aggregate([], [])
    with pytest.raises(AggregationError):
        fed.fedavg_aggregate([p, q], [1, 1])
    with pytest.raises(AggregationError):
        fed.fedavg_aggregate([p, p], [0, 0])
    with pytest.raises(AggregationError):
        fed.fedavg_aggregate([p, p], [1, -1])


def test_evaluate_uniform_model():
    ds = balanced(100, d=5)
    specs = nn.mlp_spec([5, 10])
    zero = nn.ModelParams([(np.zeros((5, 10)), np.zeros(10))])
    ev = fed.evaluate(zero, specs, ds)
    assert abs(ev.accuracy - 0.1) <= 0.03
    assert ev.loss == pytest.approx(np.log(10), abs=1e-12)


def test_evaluate_memorizer():
    perm = np.random.default_rng(0).permutation(10)
    ds = Dataset(np.eye(10), perm, 10)
    w = np.zeros((10, 10))
    w[np.arange(10), perm] = 10.0
    ev = fed.evaluate(nn.ModelParams([(w, np.zeros(10))]), nn.mlp_spec([10, 10]), ds)
    assert ev.accuracy == 1.0


def test_evaluate_shuffle_invariant(rng):
    ds = synth_blobs(500, 3, 4, 2.0, seed=0)
    specs = nn.mlp_spec([4, 6, 3])
    p = nn.init_params(specs, rng)
    perm = rng.permutation(500)
    a = fed.evaluate(p, specs, ds).accuracy
    b = fed.evaluate(p, specs, ds.subset(perm)).accuracy
    assert a == b


class FixedSelector:
    name = "fixed"
    needs_embeddings = False

    def __init__(self, ids):
        self.ids = ids

    def select(self, ctx):
        return list(self.ids)

    def observe(self, feedback):
        pass


def blobs_sim(seed=0, workers=1, k=3):
    train = synth_blobs(400, 4, 6, 2.5, seed=0)
    test = synth_blobs(200, 4, 6, 2.5, seed=1)
    shards = fed.partition_noniid(train, fed.PartitionConfig(8, 0.5, seed))
    cfg = fed.FedConfig(k, 1, 0.05, 10, 0.8, 10)
    return fed.Simulation(nn.mlp_spec([6, 8, 4]), shards, test, cfg, seed=seed, workers=workers)


def test_simulation_deterministic():
    runs = []
    for _ in range(2):
        sim = blobs_sim()
        runs.append([sim.run_round(FixedSelector([0, 1, 2])).to_json() for _ in range(5)])
    assert runs[0] == runs[1]


def test_simulation_parallel_matches_serial():
    a, b = blobs_sim(workers=1), blobs_sim(workers=4)
    for _ in range(4):
        ra = a.run_round(FixedSelector([1, 3, 5]))
        rb = b.run_round(FixedSelector([1, 3, 5]))
        assert ra.to_json() == rb.to_json()
    assert np.array_equal(a.params.flatten(), b.params.flatten())


def test_simulation_reward_plumbing():
    sim = blobs_sim()
    prev = sim.accuracy
    reached = False
    for i in range(6):
        rec = sim.run_round(FixedSelector([0, 4, 7]))
        assert rec.round_index == i + 1
        assert rec.reward == rl.reward(prev, rec.test_accuracy, 0.8, reached)
        reached = reached or rec.test_accuracy >= 0.8
        prev = rec.test_accuracy


@pytest.mark.parametrize("ids", [[0, 1], [0, 1, 1], [0, 1, 99]])
def test_simulation_rejects_bad_selection(ids):
    sim = blobs_sim()
    with pytest.raises(ProtocolError):
        sim.run_round(FixedSelector(ids))


def test_simulation_k_exceeds_clients():
    train = synth_blobs(40, 2, 2, seed=0)
    shards = fed.partition_noniid(train, fed.PartitionConfig(2))
    with pytest.raises(ProtocolError):
        fed.Simulation(nn.mlp_spec([2, 2]), shards, train, fed.FedConfig(clients_per_round=3))


def test_probe_fills_deltas():
    sim = blobs_sim()
    g = sim.params.flatten()
    sim.probe()
    assert sim.client_deltas.shape == (8, g.size)
    assert np.array_equal(sim.params.flatten(), g)
    rec = sim.run_round(FixedSelector([2, 5, 6]))
    assert rec.deltas is None
    assert np.any(sim.client_deltas[2] != 0)


def test_round_record_json_keys():
    rec = fed.RoundRecord(1, [0, 2], 0.5, 1.2, 0.1)
    assert list(rec.to_json()) == ["round", "selected", "test_acc", "test_loss", "reward"]


def test_fed_config_validation():
    with pytest.raises(ValueError):
        fed.FedConfig(local_lr=0)
    with pytest.raises(ValueError):
        fed.FedConfig(target_accuracy=1.5)
