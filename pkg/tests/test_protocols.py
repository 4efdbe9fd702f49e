import numpy as np
import pytest

from splitbench.data import ClientData, Dataset, DatasetSpec, make_dataset, partition_dataset
from splitbench.layers import Dense
from splitbench.model import SequentialModel, cut, get_weights
from splitbench.privacy import PrivacyConfig
from splitbench.profiles import digits_mlp, signal_cnn
from splitbench.protocols import (TrainConfig, TrainingDiverged, train, train_frc, train_fsl, train_psl,
                                  train_sl)

ETA = 0.1


def _linear():
    return SequentialModel([Dense(3, 3, bias=False), Dense(3, 2, bias=False)], (3,), "linear")


def _shard(seed, n=4):
    rng = np.random.default_rng(seed)
    d = Dataset(rng.normal(size=(n, 3)), rng.integers(0, 2, size=n))
    return ClientData(d, d)


def _hand_grads(A, B, data):
    """Cross-entropy gradients of logits = x A^T B^T, derived by hand."""
    x, y = data.x, data.y
    h = x @ A.T
    z = h @ B.T
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    dz = p.copy()
    dz[np.arange(len(y)), y] -= 1
    dz /= len(y)
    return (B.T @ dz.T) @ x, dz.T @ h


def _init_ab(seed=0):
    m = _linear().init(seed)
    return m.params[0].data.copy(), m.params[1].data.copy()


def _cfg(arch, n=2, **kw):
    base = dict(arch=arch, num_clients=n, cut_index=1, epochs=1, batch_size=4, learning_rate=ETA, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_psl_server_update_matches_summed_gradients():
    clients = [_shard(1), _shard(2)]
    A, B = _init_ab()
    seen = []
    res = train_psl(_cfg("PSL"), _linear(), clients, on_server_update=lambda w, g: seen.append(g))
    g1, g2 = _hand_grads(A, B, clients[0].train)[1], _hand_grads(A, B, clients[1].train)[1]
    np.testing.assert_allclose(res.pairs[0].server.params[0].data, B - ETA * (g1 + g2), rtol=0, atol=1e-12)
    assert len(seen) == 1


def test_fsl_ser_avg_matches_mean_update_and_psl_over_n():
    clients = [_shard(1), _shard(2)]
    A, B = _init_ab()
    g1, g2 = _hand_grads(A, B, clients[0].train)[1], _hand_grads(A, B, clients[1].train)[1]
    fsl = train_fsl(_cfg("FSL"), _linear(), clients)
    psl = train_psl(_cfg("PSL"), _linear(), clients)
    w_fsl = fsl.pairs[0].server.params[0].data
    np.testing.assert_allclose(w_fsl, B - ETA / 2 * (g1 + g2), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(w_fsl, fsl.pairs[1].server.params[0].data)
    w_psl = psl.pairs[0].server.params[0].data
    np.testing.assert_allclose(w_fsl - B, (w_psl - B) / 2, rtol=0, atol=1e-12)


def test_client_update_uses_boundary_gradient():
    clients = [_shard(3)]
    A, B = _init_ab()
    res = train_fsl(_cfg("FSL", n=1), _linear(), clients)
    gA = _hand_grads(A, B, clients[0].train)[0]
    np.testing.assert_allclose(res.pairs[0].client.params[0].data, A - ETA * gA, rtol=0, atol=1e-12)


def test_fl_average_is_mean_of_local_sgd():
    clients = [_shard(1), _shard(2)]
    A, B = _init_ab()
    res = train(_cfg("FL"), _linear(), clients)
    locals_ = []
    for c in clients:
        gA, gB = _hand_grads(A, B, c.train)
        locals_.append(np.concatenate([(A - ETA * gA).ravel(), (B - ETA * gB).ravel()]))
    np.testing.assert_allclose(res.global_weights.values, np.mean(locals_, axis=0), rtol=0, atol=1e-12)


def test_psl_summed_norm_is_n_times_mean_for_equal_grads():
    shard = _shard(5)
    seen = []
    train_psl(_cfg("PSL", n=3), _linear(), [shard] * 3, on_server_update=lambda w, g: seen.append(g))
    grads = [g[0] for g in seen[0]]
    summed, mean = np.sum(grads, axis=0), np.mean(grads, axis=0)
    assert np.linalg.norm(summed) == pytest.approx(3 * np.linalg.norm(mean), rel=1e-12)


def _digits(n_clients=1, seed=0, samples=48):
    spec = DatasetSpec(samples_per_client=samples, test_per_client=16)
    tr, te = make_dataset(spec, n_clients, seed)
    return partition_dataset(tr, te, n_clients, spec, seed)


@pytest.mark.parametrize("d", [0, 1, 3, 5])
def test_single_client_degeneracy_chain(d):
    clients = _digits()
    trajs = {}
    for arch in ("FL", "SL", "PSL", "FSL"):
        cfg = TrainConfig(arch=arch, num_clients=1, cut_index=d, epochs=3, batch_size=16, learning_rate=0.2,
                          averaging=False)
        trajs[arch] = train(cfg, digits_mlp(), clients, record_trajectory=True).trajectories[0]
    for arch in ("SL", "PSL", "FSL"):
        assert trajs[arch] == trajs["FL"]


def test_sl_handoff_is_exact():
    clients = _digits(3)
    handed = []
    cfg = TrainConfig(arch="SL", num_clients=3, cut_index=3, epochs=1, batch_size=16)
    res = train_sl(cfg, digits_mlp(), clients, on_handoff=lambda nxt, w: handed.append((nxt, w)))
    assert [n for n, _ in handed] == [1, 2, 0]
    for i, (_, w) in enumerate(handed):
        assert w == get_weights(res.pairs[i].client)
    assert all(m.src.startswith("client") and m.dst.startswith("client")
               for m in res.messages if m.kind == "client_weights")


def test_frc_pass_a_freezes_global_and_pass_b_freezes_local():
    clients = _digits()
    snaps = []
    cfg = TrainConfig(arch="FRC", num_clients=1, cut_index=3, epochs=2, batch_size=16)
    start = cut(digits_mlp().init(0), 3)
    train_frc(cfg, digits_mlp(), clients,
              on_pass=lambda name, i, m: snaps.append((name, get_weights(cut(m, 3).client),
                                                       get_weights(cut(m, 3).server))))
    (a0, la, ga), (b0, lb, gb) = snaps[0], snaps[1]
    assert (a0, b0) == ("A", "B")
    assert ga == get_weights(start.server) and la != get_weights(start.client)
    assert lb == la and gb != ga
    assert snaps[2][2] == gb


def test_frc_with_empty_local_shard():
    clients = _digits(2)
    res = train(TrainConfig(arch="FRC", num_clients=2, cut_index=0, epochs=1, batch_size=16), digits_mlp(),
                clients)
    assert res.pairs[0].client.layers == []
    assert get_weights(res.pairs[0].server) == get_weights(res.pairs[1].server)


def test_symmetric_clients_make_averaging_a_no_op():
    shard = _digits(samples=16)[0]
    cfg = dict(cut_index=2, epochs=2, batch_size=16, learning_rate=0.2)
    one = train(TrainConfig(arch="FL", num_clients=1, **cfg), digits_mlp(), [shard])
    two = train(TrainConfig(arch="FL", num_clients=2, **cfg), digits_mlp(), [shard, shard])
    np.testing.assert_allclose(two.global_weights.values, one.global_weights.values, rtol=0, atol=1e-12)


@pytest.mark.parametrize("arch", ["FSL", "PSL", "SL"])
def test_split_traces_carry_no_client_weights_to_servers(arch):
    clients = _digits(2)
    res = train(TrainConfig(arch=arch, num_clients=2, cut_index=3, epochs=2, batch_size=16), digits_mlp(),
                clients)
    kinds = {m.kind for m in res.messages}
    assert "activation" in kinds and "gradient" in kinds
    assert "full_weights" not in kinds
    assert not [m for m in res.messages if m.kind == "client_weights" and not m.dst.startswith("client")]
    if arch != "SL":
        assert "client_weights" not in kinds
    server_params = cut(digits_mlp(), 3).server.param_count()
    for m in res.messages:
        if m.kind == "server_weights":
            assert m.bytes == 8 * server_params


def test_fl_trace_has_no_activations():
    res = train(TrainConfig(arch="FL", num_clients=2, cut_index=3, epochs=1, batch_size=16), digits_mlp(),
                _digits(2))
    kinds = {m.kind for m in res.messages}
    assert kinds == {"full_weights"}


def test_privacy_on_unsplit_architecture_rejected():
    with pytest.raises(ValueError):
        train(TrainConfig(arch="FL", num_clients=1), digits_mlp(), _digits(), privacy=PrivacyConfig("nopeek", 1.0))


def test_client_count_mismatch_rejected():
    with pytest.raises(ValueError):
        train(TrainConfig(arch="FSL", num_clients=2), digits_mlp(), _digits())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(arch="XL")
    with pytest.raises(ValueError):
        TrainConfig(num_clients=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(avg_every=0)


@pytest.mark.parametrize("arch", ["FL", "FSL", "PSL", "SL", "FRC"])
def test_divergence_aborts(arch):
    clients = _digits()
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDiverged, match=arch):
            train(TrainConfig(arch=arch, num_clients=1, cut_index=3, epochs=5, batch_size=16,
                              learning_rate=1e300), digits_mlp(), clients)


def test_metrics_rows_per_epoch_and_pair():
    res = train(TrainConfig(arch="FSL", num_clients=2, cut_index=1, epochs=3, batch_size=16), digits_mlp(),
                _digits(2))
    assert len(res.metrics) == 6
    assert {r["pair_id"] for r in res.final_metrics()} == {0, 1}


def test_identical_seed_identical_metrics():
    a = train(TrainConfig(arch="PSL", num_clients=2, epochs=2), digits_mlp(), _digits(2))
    b = train(TrainConfig(arch="PSL", num_clients=2, epochs=2), digits_mlp(), _digits(2))
    assert a.metrics == b.metrics


def test_every_architecture_learns_the_signal_task():
    spec = DatasetSpec(kind="synthetic_1d", num_classes=4, samples_per_client=200, test_per_client=50)
    tr, te = make_dataset(spec, 2, 0)
    clients = partition_dataset(tr, te, 2, spec, 0)
    for arch in ("FL", "SL", "PSL", "FSL", "FRC"):
        cfg = TrainConfig(arch=arch, num_clients=2, cut_index=3, epochs=40, batch_size=16, learning_rate=0.15)
        res = train(cfg, signal_cnn(), clients)
        acc = np.mean([r["train_acc"] for r in res.final_metrics()])
        assert acc >= 0.9, f"{arch} reached {acc}"
