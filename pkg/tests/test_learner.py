import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedalign.align import LabeledImages, make_agents
from fedalign.errors import ValidationError
from fedalign.learner import (
    HISTORY_HEADER,
    Layout,
    ModelParams,
    RoundRecord,
    TrainConfig,
    accuracy,
    fedavg_aggregate,
    history_from_csv,
    history_to_csv,
    image_features,
    init_model,
    local_train,
    loss_and_grad,
    make_layout,
    rounds_to_accuracy,
    run_federated_training,
    sample_participants,
)


def separable_shard(n=120, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, (4 * n, 8, 8, 3), dtype=np.uint8)
    X = image_features(imgs)
    w = rng.normal(size=X.shape[1])
    score = (X - X.mean(0)) @ w
    keep = np.argsort(np.abs(score))[-n:]  # keep a margin
    return LabeledImages(imgs[keep], (score[keep] > 0).astype(np.int64))


def fd_relative_error(values, layout, X, y, h=1e-6):
    _, g = loss_and_grad(values, layout, X, y)
    fd = np.empty_like(values)
    for k in range(len(values)):
        e = np.zeros_like(values)
        e[k] = h
        fd[k] = (loss_and_grad(values + e, layout, X, y)[0] - loss_and_grad(values - e, layout, X, y)[0]) / (2 * h)
    return np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)


def scalar_params(x):
    return ModelParams(np.array([float(x)]), Layout((("w", (1,)),)))


# -- init ------------------------------------------------------------------


def test_init_determinism():
    layout = make_layout(192, 3)
    a, b, c = init_model(layout, 1), init_model(layout, 1), init_model(layout, 2)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert c.layout == layout and len(c.values) == layout.size


def test_shared_init_across_agents():
    agents = make_agents([separable_shard(20, s) for s in range(3)])
    cfg = TrainConfig(n_agents=3, rounds=0)
    test = separable_shard(10, 9)
    _, params = run_federated_training(agents, cfg, False, test)
    assert np.array_equal(params.values, init_model(params.layout, cfg.seed).values)


def test_params_bytes_roundtrip():
    p = init_model(make_layout(192, 10, hidden=7), 4)
    back = ModelParams.from_bytes(p.to_bytes())
    assert back.layout == p.layout and np.array_equal(back.values, p.values)


def test_params_validation():
    layout = make_layout(4, 2, hidden=0)
    with pytest.raises(ValidationError):
        ModelParams(np.zeros(3), layout)
    with pytest.raises(ValidationError):
        ModelParams(np.full(layout.size, np.nan), layout)


# -- gradients -------------------------------------------------------------


def test_gradient_ten_parameters():
    rng = np.random.default_rng(0)
    layout = make_layout(4, 2, hidden=0)
    assert layout.size == 10
    X, y = rng.random((12, 4)), rng.integers(0, 2, 12)
    values = rng.normal(size=10)
    assert fd_relative_error(values, layout, X, y) <= 1e-4


@given(st.integers(0, 10_000))
def test_gradient_random_hidden(seed):
    rng = np.random.default_rng(seed)
    layout = make_layout(5, 3, hidden=4)
    X, y = rng.random((9, 5)), rng.integers(0, 3, 9)
    values = rng.normal(size=layout.size)
    assert fd_relative_error(values, layout, X, y) <= 1e-4


# -- local training --------------------------------------------------------


def test_zero_epochs_unchanged():
    shard = separable_shard(30)
    p = init_model(make_layout(192, 2), 0)
    out, loss = local_train(p, shard, TrainConfig(n_agents=1, local_epochs=0))
    assert np.array_equal(out.values, p.values) and np.isnan(loss)


def test_separable_toy_fits():
    shard = separable_shard()
    p = init_model(make_layout(192, 2, hidden=0), 0)
    out, _ = local_train(p, shard, TrainConfig(n_agents=1, local_epochs=50, learning_rate=1e-2))
    assert accuracy(out, image_features(shard.images), shard.labels) >= 0.95


def test_local_train_rejects_empty_shard():
    empty = LabeledImages(np.zeros((0, 8, 8, 3), np.uint8), np.zeros(0, np.int64))
    with pytest.raises(ValidationError):
        local_train(init_model(make_layout(192, 2), 0), empty, TrainConfig(n_agents=1))


def test_default_epochs():
    assert TrainConfig(n_agents=5).epochs == 2
    assert TrainConfig(n_agents=5, participants_per_round=2).epochs == 5
    with pytest.raises(ValidationError):
        TrainConfig(n_agents=2, participants_per_round=3)


# -- aggregation -----------------------------------------------------------


def test_aggregate_identical():
    p = init_model(make_layout(192, 3), 0)
    assert np.array_equal(fedavg_aggregate([(p, 3), (p, 5), (p, 1)]).values, p.values)


def test_aggregate_weighted_mean():
    out = fedavg_aggregate([(scalar_params(0), 1), (scalar_params(4), 3)])
    assert out.values.tolist() == [3.0]


def test_aggregate_single():
    p = scalar_params(2.5)
    assert fedavg_aggregate([(p, 7)]) is p


def test_aggregate_errors():
    with pytest.raises(ValidationError):
        fedavg_aggregate([])
    with pytest.raises(ValidationError):
        fedavg_aggregate([(scalar_params(1), 0)])


updates_strategy = st.lists(
    st.tuples(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4), st.integers(1, 1000)),
    min_size=1,
    max_size=8,
)


@given(updates_strategy, st.randoms(use_true_random=False))
def test_aggregate_convex_and_permutation_invariant(raw, rnd):
    layout = Layout((("w", (4,)),))
    updates = [(ModelParams(np.array(v), layout), c) for v, c in raw]
    out = fedavg_aggregate(updates).values
    stack = np.array([v for v, _ in raw])
    assert np.all(out >= stack.min(0)) and np.all(out <= stack.max(0))
    shuffled = list(updates)
    rnd.shuffle(shuffled)
    assert np.array_equal(fedavg_aggregate(shuffled).values, out)


# -- federated training ----------------------------------------------------


def test_identical_shards_match_centralized():
    shard = separable_shard(40)
    n = 4
    cfg = TrainConfig(n_agents=n, rounds=4, seed=3, hidden=16)
    params = central = init_model(make_layout(192, 2, hidden=16), cfg.seed)
    for rnd in range(1, cfg.rounds + 1):
        params = fedavg_aggregate([(local_train(params, shard, cfg, rnd)[0], len(shard)) for _ in range(n)])
        central, _ = local_train(central, shard, cfg, rnd)
        assert np.abs(params.values - central.values).max() <= 1e-6
    _, final = run_federated_training(make_agents([shard] * n), cfg, False, shard, init=init_model(params.layout, cfg.seed))
    assert np.abs(final.values - central.values).max() <= 1e-6


def test_zero_rounds_history_empty():
    agents = make_agents([separable_shard(10, s) for s in range(2)])
    history, params = run_federated_training(agents, TrainConfig(n_agents=2, rounds=0), False, separable_shard(10))
    assert history == []


def test_training_deterministic_and_partial_participation():
    agents = make_agents([separable_shard(30, s) for s in range(4)])
    test = separable_shard(30, 7)
    cfg = TrainConfig(n_agents=4, participants_per_round=2, rounds=3, seed=1)
    h1, p1 = run_federated_training(agents, cfg, False, test)
    h2, p2 = run_federated_training(agents, cfg, False, test)
    h3, p3 = run_federated_training(agents, TrainConfig(n_agents=4, participants_per_round=2, rounds=3, seed=1, workers=2), False, test)
    assert [(r.round, r.test_accuracy, r.mean_local_loss) for r in h1] == [
        (r.round, r.test_accuracy, r.mean_local_loss) for r in h2
    ]
    assert np.array_equal(p1.values, p2.values) and np.array_equal(p1.values, p3.values)
    chosen = sample_participants(cfg, 1)
    assert len(chosen) == 2 and len(set(chosen.tolist())) == 2


def test_aligned_requires_alignment():
    agents = make_agents([separable_shard(10, s) for s in range(2)])
    with pytest.raises(ValidationError):
        run_federated_training(agents, TrainConfig(n_agents=2, rounds=1), True, separable_shard(10))
    with pytest.raises(ValidationError):
        run_federated_training(agents, TrainConfig(n_agents=3, rounds=1), False, separable_shard(10))


def test_history_csv_roundtrip():
    history = [RoundRecord(1, 0.5, 0.7, 0.01), RoundRecord(2, 2 / 3, 0.4, 0.02)]
    text = history_to_csv(history)
    assert text.splitlines()[0] == ",".join(HISTORY_HEADER)
    assert history_from_csv(text) == history
    with pytest.raises(ValidationError):
        history_from_csv("round,acc\n")


def test_rounds_to_accuracy():
    h = [RoundRecord(1, 0.5, 1.0), RoundRecord(2, 0.91, 0.5), RoundRecord(3, 0.95, 0.4)]
    assert rounds_to_accuracy(h, 0.9) == 2
    assert rounds_to_accuracy(h, 0.99) == float("inf")
