import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitbench import tensor as T
from splitbench.layers import Dense, Flatten, ReLU
from splitbench.model import (SequentialModel, WeightVector, cut, fed_avg, get_weights, load_checkpoint,
                              load_model_spec, memory_demand, save_checkpoint, save_model_spec, ser_avg,
                              set_weights)
from splitbench.profiles import (LayerProfile, builtin_profile, digits_cnn, lenet_model, load_profile,
                                 profile_names, vgg16_block_cut, vgg16_profile)
from splitbench.tensor import Tensor

from _helpers import random_model


def _mlp():
    return SequentialModel([Flatten(), Dense(4, 3), ReLU(), Dense(3, 2)], (1, 2, 2)).init(0)


def test_cut_zero_gives_empty_client():
    m = _mlp()
    part = cut(m, 0)
    assert part.client.layers == [] and part.server.layers == m.layers


def test_cut_out_of_range():
    with pytest.raises(ValueError):
        cut(_mlp(), 5)
    with pytest.raises(ValueError):
        cut(_mlp(), -1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_partition_identity_forward(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng).init(rng)
    x = Tensor(rng.normal(size=(2,) + m.input_shape))
    full = m(x).data
    for d in range(len(m) + 1):
        part = cut(m, d)
        assert part.layers == m.layers
        assert np.array_equal(part(x).data, full)


def test_vgg_block_sizes_two_to_one():
    p = vgg16_profile()
    b1, b2 = p.boundary_elements(vgg16_block_cut(1)), p.boundary_elements(vgg16_block_cut(2))
    assert 8 * 32 * b1 == 2 * (8 * 32 * b2)


def test_vgg_profile_totals():
    p = vgg16_profile()
    assert len(p) == 40
    assert p.param_count() == 134_301_514


def test_fed_avg_examples():
    lay = [(0, 0, (2,))]
    a, b = WeightVector([1.0, 3.0], lay), WeightVector([3.0, 5.0], lay)
    assert fed_avg([a, b]).values.tolist() == [2.0, 4.0]
    assert fed_avg([a]) == a
    assert fed_avg([a, a, a]) == a


def test_fed_avg_errors():
    with pytest.raises(ValueError):
        fed_avg([])
    with pytest.raises(ValueError):
        fed_avg([WeightVector([1.0], [(0, 0, (1,))]), WeightVector([1.0], [(1, 0, (1,))])])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.integers(1, 9))
def test_fed_avg_permutation_invariant_and_idempotent(seed, k, n):
    rng = np.random.default_rng(seed)
    lay = [(0, 0, (n,))]
    ws = [WeightVector(rng.normal(size=n) * 10.0 ** rng.integers(-3, 4), lay) for _ in range(k)]
    avg = fed_avg(ws)
    perm = [ws[i] for i in rng.permutation(k)]
    assert fed_avg(perm) == avg
    np.testing.assert_allclose(avg.values, np.mean([w.values for w in ws], axis=0), rtol=1e-12, atol=1e-12)
    assert fed_avg([ws[0]] * k) == ws[0]


def test_ser_avg_matches_fsl_rule_on_linear_model():
    # two pairs take one SGD step from a shared server init; the average equals W - (eta/N) * sum(g)
    rng = np.random.default_rng(0)
    eta = 0.1
    w0 = rng.normal(size=(1, 3))
    xs = [rng.normal(size=(4, 3)) for _ in range(2)]
    ys = [rng.normal(size=(4, 1)) for _ in range(2)]
    grads, stepped = [], []
    for x, y in zip(xs, ys):
        model = SequentialModel([Dense(3, 1, bias=False)], (3,))
        model.layers[0].weights = [Tensor(w0.copy(), True)]
        T.mse(model(Tensor(x)), y).backward()
        g = model.params[0].grad
        grads.append(g)
        # hand gradient of mean squared error for a linear map
        np.testing.assert_allclose(g, 2 * (x @ w0.T - y).T @ x / x.shape[0], rtol=1e-13)
        model.params[0].data = model.params[0].data - eta * g
        stepped.append(get_weights(model))
    expected = w0 - eta / 2 * (grads[0] + grads[1])
    np.testing.assert_allclose(ser_avg(stepped).values, expected.ravel(), rtol=0, atol=1e-15)


def test_memory_demand_examples():
    m = SequentialModel([Dense(2, 1, bias=False)], (2,))
    assert memory_demand(m, 1) == (16, 8)
    assert memory_demand(SequentialModel([], (3,)), 4) == (0, 0)


def test_memory_demand_monotone_in_cut():
    m = lenet_model().init(0)
    client = [memory_demand(cut(m, d).client, 8).total for d in range(len(m) + 1)]
    server = [memory_demand(cut(m, d).server, 8).total for d in range(len(m) + 1)]
    assert all(a <= b for a, b in zip(client, client[1:]))
    assert all(a >= b for a, b in zip(server, server[1:]))


def test_vgg_memory_ratio_at_d4():
    p = vgg16_profile()
    full = p.memory(32).total
    assert full > 5 * p.slice(0, 4).memory(32).total


def test_weight_vector_round_trip_and_immutable():
    m = _mlp()
    w = get_weights(m)
    with pytest.raises(ValueError):
        w.values[0] = 1.0
    other = m.clone().init(5)
    set_weights(other, w)
    assert get_weights(other) == w
    assert [a.tolist() for a in w.unflatten()] == [p.data.tolist() for p in m.params]


def test_weight_vector_arithmetic():
    lay = [(0, 0, (2,))]
    a, b = WeightVector([1.0, 2.0], lay), WeightVector([3.0, 5.0], lay)
    assert (a + b).values.tolist() == [4.0, 7.0]
    assert (b - a).values.tolist() == [2.0, 3.0]
    assert (0.5 * b).values.tolist() == [1.5, 2.5]


def test_checkpoint_and_spec_files(tmp_path):
    m = digits_cnn().init(3)
    save_model_spec(m, tmp_path / "m.json")
    again = load_model_spec(tmp_path / "m.json")
    assert again.spec() == m.spec()
    save_checkpoint(get_weights(m), tmp_path / "w.bin")
    w = load_checkpoint(tmp_path / "w.bin")
    assert w == get_weights(m)
    raw = (tmp_path / "w.bin").read_bytes()
    assert raw[:4] == b"SPLW"
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")


def test_bundled_profiles_match_generators():
    for name in profile_names():
        assert load_profile(name) == builtin_profile(name)


def test_profile_from_model_counts():
    m = lenet_model()
    prof = LayerProfile.from_model(m)
    assert prof.param_count() == m.param_count()
    assert all(s.params > 0 and s.flops > 0 for s in prof.layers if s.kind in ("dense", "conv2d"))


def test_profile_json_path_round_trip(tmp_path):
    import json

    prof = builtin_profile("lenet")
    path = tmp_path / "p.json"
    path.write_text(json.dumps(prof.to_json()))
    assert load_profile(path) == prof
