"""Federated simulation: aggregation math, sampling, centralized parity."""

import numpy as np
import pytest

from wavecontrast.data import (
    ClientShard,
    SyntheticConfig,
    build_arrays,
    generate_synthetic,
    partition_clients,
    segment_dataset,
)
from wavecontrast.federated import (
    OBJECTIVES,
    FederatedConfig,
    RoundLog,
    fedavg_aggregate,
    run_federated_training,
    sample_clients,
)
from wavecontrast.training import LinearProbe, TrainSettings, pretrain_sscl
from wavecontrast.wavelet import WaveletConfig

SETTINGS = TrainSettings(lr=1e-3)


@pytest.fixture(scope="module")
def tiny_arrays():
    cfg = SyntheticConfig(
        n_classes=2,
        n_subjects=3,
        segments_per_subject=8,
        window=32,
        channels=1,
        seed=9,
    )
    recordings, manifest = generate_synthetic(cfg)
    segments = segment_dataset(recordings, manifest)
    return build_arrays(segments, WaveletConfig(n_scales=12), scalogram_width=12)


# ---------------------------------------------------------------------------
# weighted averaging


def test_aggregate_single_client_is_identity():
    params = {"w": np.array([[1.5, -2.25]], dtype=np.float32), "b": np.array([0.1], dtype=np.float32)}
    out = fedavg_aggregate([params], [7])
    for name in params:
        assert np.array_equal(out[name], params[name])
        assert out[name].dtype == params[name].dtype


def test_aggregate_equal_sizes_is_plain_mean():
    a = {"w": np.array([2.0, 6.0])}
    b = {"w": np.array([6.0, 2.0])}
    out = fedavg_aggregate([a, b], [5, 5])
    assert np.allclose(out["w"], [4.0, 4.0], rtol=0, atol=1e-12)


def test_aggregate_weights_by_shard_size():
    a = {"w": np.array([2.0])}
    b = {"w": np.array([6.0])}
    out = fedavg_aggregate([a, b], [3, 1])
    assert abs(float(out["w"][0]) - 3.0) < 1e-12


def test_aggregate_matches_numpy_average():
    rng = np.random.default_rng(0)
    clients = [{"w": rng.standard_normal((3, 4))} for _ in range(5)]
    sizes = [3, 9, 1, 4, 7]
    out = fedavg_aggregate(clients, sizes)
    ref = np.average(np.stack([c["w"] for c in clients]), axis=0, weights=sizes)
    assert np.allclose(out["w"], ref, rtol=0, atol=1e-12)


def test_aggregate_stays_within_client_envelope():
    rng = np.random.default_rng(1)
    clients = [{"w": rng.standard_normal(16)} for _ in range(6)]
    sizes = rng.integers(1, 30, 6).tolist()
    out = fedavg_aggregate(clients, sizes)
    stack = np.stack([c["w"] for c in clients])
    assert (out["w"] >= stack.min(axis=0) - 1e-12).all()
    assert (out["w"] <= stack.max(axis=0) + 1e-12).all()


def test_aggregate_opposite_signs_cancel():
    a = {"w": np.array([1.0, -1.0])}
    b = {"w": np.array([-1.0, 1.0])}
    out = fedavg_aggregate([a, b], [2, 2])
    assert np.array_equal(out["w"], [0.0, 0.0])


def test_aggregate_validation():
    params = {"w": np.zeros(2)}
    with pytest.raises(ValueError):
        fedavg_aggregate([], [])
    with pytest.raises(ValueError):
        fedavg_aggregate([params, params], [1])
    with pytest.raises(ValueError):
        fedavg_aggregate([params, {"v": np.zeros(2)}], [1, 1])
    with pytest.raises(ValueError):
        fedavg_aggregate([params, {"w": np.zeros(3)}], [1, 1])
    with pytest.raises(ValueError):
        fedavg_aggregate([params, params], [1, 0])


# ---------------------------------------------------------------------------
# client sampling


def test_sample_all_clients_when_fraction_is_one():
    picked = sample_clients(8, 8, seed=0, round_index=0)
    assert picked.tolist() == list(range(8))


def test_sample_is_sorted_unique_and_in_range():
    for t in range(10):
        picked = sample_clients(10, 4, seed=3, round_index=t)
        assert len(picked) == 4
        assert len(set(picked.tolist())) == 4
        assert (picked[:-1] < picked[1:]).all()
        assert picked.min() >= 0 and picked.max() < 10


def test_sample_deterministic_per_round_and_varies_across_rounds():
    again = [sample_clients(10, 5, seed=7, round_index=t) for t in range(6)]
    once = [sample_clients(10, 5, seed=7, round_index=t) for t in range(6)]
    for a, b in zip(once, again):
        assert np.array_equal(a, b)
    assert any(not np.array_equal(once[0], later) for later in once[1:])


def test_sample_frequency_is_uniform():
    # Each client is a Bernoulli(1/2) per round; stay within 3 sigma.
    rounds = 1000
    counts = np.zeros(10, dtype=int)
    for t in range(rounds):
        counts[sample_clients(10, 5, seed=11, round_index=t)] += 1
    expected = rounds * 0.5
    sigma = np.sqrt(rounds * 0.25)
    assert (np.abs(counts - expected) < 3 * sigma).all(), counts


def test_sample_rejects_oversubscription():
    with pytest.raises(ValueError):
        sample_clients(4, 5, seed=0, round_index=0)


# ---------------------------------------------------------------------------
# configuration and logs


def test_config_validation():
    with pytest.raises(ValueError):
        FederatedConfig(n_clients=4, clients_per_round=5)
    with pytest.raises(ValueError):
        FederatedConfig(n_clients=4, clients_per_round=0)
    with pytest.raises(ValueError):
        FederatedConfig(n_clients=4, clients_per_round=2, rounds=0)
    with pytest.raises(ValueError):
        FederatedConfig(n_clients=4, clients_per_round=2, local_epochs=0)


def test_round_log_record_keys():
    log = RoundLog(3, [0, 2], [0.5, 0.7], 0.6, 1.25, skipped=[1])
    rec = log.to_record()
    assert rec == {
        "round": 3,
        "clients": [0, 2],
        "client_losses": [0.5, 0.7],
        "global_loss": 0.6,
        "wall_time": 1.25,
        "skipped": [1],
    }


# ---------------------------------------------------------------------------
# full runs


def test_single_client_round_matches_centralized_run(tiny_arrays):
    # One client owning everything, one round of E epochs, must replay the
    # centralized trainer bit for bit.
    epochs, batch, seed = 3, 8, 4
    central, _ = pretrain_sscl(tiny_arrays, SETTINGS, epochs=epochs, batch=batch, seed=seed)
    shards = [ClientShard(0, np.arange(tiny_arrays.n))]
    config = FederatedConfig(
        n_clients=1, clients_per_round=1, rounds=1, local_epochs=epochs, local_batch=batch, seed=seed
    )
    global_state, logs, _ = run_federated_training("sscl", tiny_arrays, shards, config, SETTINGS)
    central_state = central.state_dict()
    assert set(global_state) == set(central_state)
    for name in central_state:
        assert np.array_equal(global_state[name], central_state[name]), name
    assert len(logs) == 1 and logs[0].client_ids == [0]


def test_federated_pretraining_progresses_and_logs(tiny_arrays):
    shards = partition_clients(tiny_arrays.n, 3, seed=0)
    config = FederatedConfig(n_clients=3, clients_per_round=2, rounds=3, local_epochs=1, local_batch=6, seed=0)
    state, logs, model = run_federated_training("sscl", tiny_arrays, shards, config, SETTINGS)
    assert len(logs) == 3
    for log in logs:
        assert len(log.client_ids) == 2
        assert len(log.client_losses) == 2
        assert np.isfinite(log.global_loss)
        assert log.wall_time > 0
    assert logs[-1].global_loss < logs[0].global_loss * 1.5  # no blow-up
    assert set(state) == set(model.state_dict())


def test_federated_run_is_deterministic(tiny_arrays):
    shards = partition_clients(tiny_arrays.n, 3, seed=0)
    config = FederatedConfig(n_clients=3, clients_per_round=2, rounds=2, local_epochs=1, local_batch=6, seed=1)

    def run():
        state, logs, _ = run_federated_training("supervised", tiny_arrays, shards, config, SETTINGS, n_classes=2)
        return state, [log.global_loss for log in logs], [log.client_ids for log in logs]

    state_a, losses_a, picks_a = run()
    state_b, losses_b, picks_b = run()
    assert losses_a == losses_b
    assert picks_a == picks_b
    for name in state_a:
        assert np.array_equal(state_a[name], state_b[name])


def test_federated_supervised_and_autoencoder_objectives(tiny_arrays):
    shards = partition_clients(tiny_arrays.n, 2, seed=0)
    config = FederatedConfig(n_clients=2, clients_per_round=2, rounds=2, local_epochs=1, local_batch=6, seed=0)
    for objective, kwargs in (("supervised", {"n_classes": 2}), ("autoencoder", {})):
        state, logs, _ = run_federated_training(objective, tiny_arrays, shards, config, SETTINGS, **kwargs)
        assert all(np.isfinite(log.global_loss) for log in logs)


def test_federated_probe_trains_head_only(tiny_arrays):
    pretrained, _ = pretrain_sscl(tiny_arrays, SETTINGS, epochs=1, batch=8, seed=0)
    shards = partition_clients(tiny_arrays.n, 2, seed=0)
    config = FederatedConfig(n_clients=2, clients_per_round=2, rounds=3, local_epochs=2, local_batch=6, seed=0)
    state, logs, probe = run_federated_training(
        "linear_probe",
        tiny_arrays,
        shards,
        config,
        SETTINGS,
        n_classes=2,
        encoder_state=pretrained.state_dict(),
    )
    assert set(state) == {"probe/w", "probe/b"}
    assert isinstance(probe, LinearProbe)
    assert state["probe/w"].shape == (128, 2)
    fresh = LinearProbe(128, 2, seed=config.seed)
    assert not np.array_equal(state["probe/w"], fresh.params["probe/w"].data)


def test_federated_probe_requires_encoder_and_classes(tiny_arrays):
    shards = partition_clients(tiny_arrays.n, 2, seed=0)
    config = FederatedConfig(n_clients=2, clients_per_round=2, rounds=1, local_epochs=1, local_batch=6, seed=0)
    with pytest.raises(ValueError):
        run_federated_training("linear_probe", tiny_arrays, shards, config, SETTINGS, n_classes=2)
    with pytest.raises(ValueError):
        run_federated_training("supervised", tiny_arrays, shards, config, SETTINGS)


def test_empty_shards_are_skipped_and_backfilled(tiny_arrays):
    full = partition_clients(tiny_arrays.n, 3, seed=0)
    shards = [full[0], ClientShard(1, np.array([], dtype=int)), full[1], ClientShard(3, full[2].indices)]
    shards[2] = ClientShard(2, shards[2].indices)
    config = FederatedConfig(n_clients=4, clients_per_round=3, rounds=4, local_epochs=1, local_batch=6, seed=2)
    state, logs, _ = run_federated_training("supervised", tiny_arrays, shards, config, SETTINGS, n_classes=2)
    hit = [log for log in logs if log.skipped]
    assert hit, "empty client never sampled; adjust the seed"
    for log in hit:
        assert log.skipped == [1]
        assert 1 not in log.client_ids
        assert len(log.client_ids) == len(log.client_losses)


def test_unknown_objective_and_shard_mismatch(tiny_arrays):
    shards = partition_clients(tiny_arrays.n, 2, seed=0)
    config = FederatedConfig(n_clients=2, clients_per_round=2, rounds=1, local_epochs=1, local_batch=6, seed=0)
    with pytest.raises(ValueError):
        run_federated_training("gossip", tiny_arrays, shards, config, SETTINGS)
    with pytest.raises(ValueError):
        run_federated_training("sscl", tiny_arrays, shards[:1], config, SETTINGS)
    assert "sscl" in OBJECTIVES and "linear_probe" in OBJECTIVES
