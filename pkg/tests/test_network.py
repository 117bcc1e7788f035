import numpy as np
import pytest

from occutrack.engine import Graph, ParameterStore, Tensor
from occutrack.grid import GridConfig, PartialObservation
from occutrack.network import (
    KIND_ONESHOT,
    KIND_TRACKING,
    CheckpointError,
    LayerRefs,
    NetworkConfig,
    TrackingNetwork,
    gru_layer_step,
    init_params,
    load_checkpoint,
    load_tracking_network,
    parameter_count,
    receptive_field,
    save_checkpoint,
)

from oracles import scalar_gru_step


def small_config(**kw):
    defaults = dict(layers=2, channels=2, grid=8, classes=4)
    defaults.update(kw)
    return NetworkConfig(**defaults)


def zero_layer(c, cin, m, dtype=np.float64):
    z = lambda *shape: Tensor(np.zeros(shape, dtype=dtype))
    return LayerRefs(
        w_xz=z(c, cin, 3, 3), w_hz=z(c, c, 3, 3),
        w_xr=z(c, cin, 3, 3), w_hr=z(c, c, 3, 3),
        w_xh=z(c, cin, 3, 3), w_hh=z(c, c, 3, 3),
        b_z=z(c, m, m), b_r=z(c, m, m), b_h=z(c, m, m),
    )


# ---------------------------------------------------------------------------
# initialization


def test_init_deterministic_in_seed():
    cfg = small_config()
    a = init_params(cfg, seed=5)
    b = init_params(cfg, seed=5)
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)
    c = init_params(cfg, seed=6)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())


def test_init_bias_fields_zero_and_kernels_bounded():
    cfg = small_config(layers=3, channels=4)
    store = init_params(cfg, seed=0)
    for name in store.names():
        data = store[name].data
        if ".b_" in name or name.endswith(".b"):
            assert not data.any()
        else:
            cout, cin, kh, kw = data.shape
            bound = np.sqrt(6.0 / (cin * kh * kw + cout * kh * kw))
            assert np.max(np.abs(data)) <= bound


# ---------------------------------------------------------------------------
# GRU algebra


def test_zero_params_halve_the_hidden_state():
    m, c = 8, 3
    layer = zero_layer(c, 2, m)
    rng = np.random.default_rng(0)
    h_prev = Tensor(rng.uniform(-0.9, 0.9, (c, m, m)))
    x = Tensor(rng.uniform(0, 1, (2, m, m)))
    h_new, gates = gru_layer_step(x, h_prev, layer, dilation=1)
    np.testing.assert_array_equal(gates.update.data, np.full((c, m, m), 0.5))
    np.testing.assert_array_equal(gates.candidate.data, np.zeros((c, m, m)))
    np.testing.assert_array_equal(h_new.data, 0.5 * h_prev.data)


def test_saturated_update_gate_freezes_memory():
    m, c = 6, 2
    layer = zero_layer(c, 2, m)
    layer.b_z.data[:] = 50.0
    rng = np.random.default_rng(1)
    h_prev = Tensor(rng.uniform(-0.9, 0.9, (c, m, m)))
    x = Tensor(rng.uniform(0, 1, (2, m, m)))
    h_new, gates = gru_layer_step(x, h_prev, layer, dilation=1)
    assert np.min(gates.update.data) >= 1.0 - 1e-15
    np.testing.assert_allclose(h_new.data, h_prev.data, atol=1e-15)


def test_gru_step_matches_scalar_reference():
    m, c, cin = 8, 2, 2
    rng = np.random.default_rng(2)
    weights = {
        "w_xz": rng.standard_normal((c, cin, 3, 3)) * 0.3,
        "w_hz": rng.standard_normal((c, c, 3, 3)) * 0.3,
        "w_xr": rng.standard_normal((c, cin, 3, 3)) * 0.3,
        "w_hr": rng.standard_normal((c, c, 3, 3)) * 0.3,
        "w_xh": rng.standard_normal((c, cin, 3, 3)) * 0.3,
        "w_hh": rng.standard_normal((c, c, 3, 3)) * 0.3,
        "b_z": rng.standard_normal((c, m, m)) * 0.1,
        "b_r": rng.standard_normal((c, m, m)) * 0.1,
        "b_h": rng.standard_normal((c, m, m)) * 0.1,
    }
    x = rng.uniform(0, 1, (cin, m, m))
    h_prev = rng.uniform(-0.8, 0.8, (c, m, m))
    for dilation in (1, 2):
        layer = LayerRefs(**{k: Tensor(v.copy()) for k, v in weights.items()})
        h_new, gates = gru_layer_step(Tensor(x.copy()), Tensor(h_prev.copy()), layer, dilation)
        ref_h, ref_f, ref_r, ref_hbar = scalar_gru_step(x, h_prev, weights, dilation)
        np.testing.assert_allclose(h_new.data, ref_h, atol=1e-10)
        np.testing.assert_allclose(gates.update.data, ref_f, atol=1e-10)
        np.testing.assert_allclose(gates.reset.data, ref_r, atol=1e-10)
        np.testing.assert_allclose(gates.candidate.data, ref_hbar, atol=1e-10)


def test_gate_ranges_and_hidden_bounds_over_rollout():
    cfg = small_config(layers=3, channels=3, grid=12)
    net = TrackingNetwork.create(cfg, seed=3)
    rng = np.random.default_rng(4)
    h = net.zero_state()
    for _ in range(12):
        vis = (rng.uniform(size=(12, 12)) < 0.6).astype(np.uint8)
        occ = ((rng.uniform(size=(12, 12)) < 0.2).astype(np.uint8)) & vis
        x = net.encode_observation(PartialObservation(vis, occ))
        h, y, c = net.forward_step(h, x)
        for hk in h:
            assert np.max(np.abs(hk.data)) < 1.0
            assert hk.data.shape == (3, 12, 12)
        assert np.all((y.data > 0) & (y.data < 1))
        assert y.data.shape == (12, 12)
        assert c.data.shape == (4, 12, 12)
        np.testing.assert_allclose(c.data.sum(axis=0), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# forward_step semantics


def test_empty_observation_zero_params_gives_half_everywhere():
    cfg = small_config()
    store = ParameterStore()
    zeros = init_params(cfg, seed=0)
    for name in zeros.names():
        store.add(name, np.zeros_like(zeros[name].data))
    net = TrackingNetwork(cfg, store)
    h, y, c = net.forward_step(net.zero_state(), net.encode_observation(None))
    np.testing.assert_array_equal(y.data, np.full((8, 8), 0.5))
    np.testing.assert_allclose(c.data, 0.25)


def test_forward_step_is_pure():
    cfg = small_config()
    net = TrackingNetwork.create(cfg, seed=7)
    rng = np.random.default_rng(8)
    vis = (rng.uniform(size=(8, 8)) < 0.5).astype(np.uint8)
    occ = ((rng.uniform(size=(8, 8)) < 0.3).astype(np.uint8)) & vis
    obs = PartialObservation(vis, occ)
    h0 = net.zero_state()
    h1, y1, c1 = net.forward_step(h0, net.encode_observation(obs))
    h2, y2, c2 = net.forward_step(net.zero_state(), net.encode_observation(obs))
    np.testing.assert_array_equal(y1.data, y2.data)
    np.testing.assert_array_equal(c1.data, c2.data)
    for a, b in zip(h1, h2):
        np.testing.assert_array_equal(a.data, b.data)


def test_unrolled_equals_stepwise_composition():
    cfg = small_config()
    net = TrackingNetwork.create(cfg, seed=9)
    rng = np.random.default_rng(10)
    observations = []
    for _ in range(3):
        vis = (rng.uniform(size=(8, 8)) < 0.5).astype(np.uint8)
        occ = ((rng.uniform(size=(8, 8)) < 0.3).astype(np.uint8)) & vis
        observations.append(PartialObservation(vis, occ))

    outs = net.rollout(observations)

    h = net.zero_state()
    for obs, (y_ref, c_ref) in zip(observations, outs):
        h, y, c = net.forward_step(h, net.encode_observation(obs))
        np.testing.assert_array_equal(y.data, y_ref)
        np.testing.assert_array_equal(c.data, c_ref)


def test_static_memory_pathway_is_input_independent():
    # zero kernels + nonzero biases: output ignores the input entirely
    cfg = small_config()
    store = ParameterStore()
    rng = np.random.default_rng(11)
    for name in init_params(cfg, seed=0).names():
        shape = init_params(cfg, seed=0)[name].data.shape
        if ".b_" in name:
            store.add(name, rng.standard_normal(shape) * 0.5)
        elif name in ("occ.w", "sem.w"):
            store.add(name, rng.standard_normal(shape))
        elif name in ("occ.b", "sem.b"):
            store.add(name, rng.standard_normal(shape) * 0.2)
        else:
            store.add(name, np.zeros(shape))
    net = TrackingNetwork(cfg, store)

    vis = (rng.uniform(size=(8, 8)) < 0.7).astype(np.uint8)
    occ = ((rng.uniform(size=(8, 8)) < 0.4).astype(np.uint8)) & vis
    h1, y_empty, _ = net.forward_step(net.zero_state(), net.encode_observation(None))
    h2, y_obs, _ = net.forward_step(net.zero_state(),
                                    net.encode_observation(PartialObservation(vis, occ)))
    np.testing.assert_array_equal(y_empty.data, y_obs.data)


def test_statefulness_lives_only_in_hidden_state():
    cfg = small_config()
    net = TrackingNetwork.create(cfg, seed=12)
    rng = np.random.default_rng(13)
    vis = (rng.uniform(size=(8, 8)) < 0.5).astype(np.uint8)
    obs = PartialObservation(vis, np.zeros((8, 8), np.uint8))
    h1, _, _ = net.forward_step(net.zero_state(), net.encode_observation(obs))
    # replaying from the same hidden state gives identical results
    ha, ya, _ = net.forward_step(h1, net.encode_observation(None))
    hb, yb, _ = net.forward_step(h1, net.encode_observation(None))
    np.testing.assert_array_equal(ya.data, yb.data)


# ---------------------------------------------------------------------------
# receptive field


def test_receptive_field_formula():
    assert receptive_field(1) == 3
    assert receptive_field(3) == 15
    assert receptive_field(5) == 63


def test_impulse_footprint_radius_matches_formula():
    for layers in (1, 2, 3, 4):
        m = 40
        cfg = NetworkConfig(layers=layers, channels=2, grid=m, classes=2)
        net = TrackingNetwork.create(cfg, seed=20 + layers)
        empty = net.encode_observation(None)
        _, y0, _ = net.forward_step(net.zero_state(), empty)

        bumped = np.zeros((2, m, m))
        bumped[1, m // 2, m // 2] = 1.0
        _, y1, _ = net.forward_step(net.zero_state(), Tensor(bumped))

        diff = np.abs(y1.data - y0.data)
        changed = np.argwhere(diff > 0)
        assert changed.size > 0
        radius = np.max(np.abs(changed - m // 2))
        expected = (2 ** (layers + 1) - 2) // 2
        assert radius == expected, f"layers={layers}: changed radius {radius} != {expected}"
        # and exactly zero beyond it
        outside = np.ones((m, m), bool)
        lo, hi = m // 2 - expected, m // 2 + expected
        outside[lo:hi + 1, lo:hi + 1] = False
        assert np.max(diff[outside]) == 0.0


# ---------------------------------------------------------------------------
# parameter count


def test_parameter_count_hand_value():
    cfg = NetworkConfig(layers=1, channels=1, grid=8, classes=2)
    # kernels: 3*1*2*9 + 3*1*1*9 = 81; biases 3*64 = 192; decoders (1+1)+(2+2)=6
    assert parameter_count(cfg) == 81 + 192 + 6


def test_parameter_count_matches_enumeration_on_random_configs():
    rng = np.random.default_rng(30)
    for _ in range(20):
        cfg = NetworkConfig(
            layers=int(rng.integers(1, 5)),
            channels=int(rng.integers(1, 9)),
            grid=int(rng.integers(4, 24)),
            classes=int(rng.integers(2, 6)),
        )
        store = init_params(cfg, seed=0)
        assert parameter_count(cfg) == store.n_values()


def test_parameter_count_reference_configuration():
    # three 16-channel layers on the 100-cell grid with 4 classes
    cfg = NetworkConfig(layers=3, channels=16, grid=100, classes=4)
    assert parameter_count(cfg) == 1_475_509


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bitexact(tmp_path):
    cfg = small_config()
    net = TrackingNetwork.create(cfg, seed=40, dtype=np.float32)
    path = tmp_path / "net.dtck"
    save_checkpoint(path, cfg, net.store)
    cfg2, store2, kind = load_checkpoint(path, dtype=np.float32)
    assert cfg2 == cfg and kind == KIND_TRACKING
    for name in net.store.names():
        np.testing.assert_array_equal(store2[name].data, net.store[name].data)
    # byte-identical on rewrite
    path2 = tmp_path / "net2.dtck"
    save_checkpoint(path2, cfg2, store2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_crc_rejected(tmp_path):
    cfg = small_config()
    net = TrackingNetwork.create(cfg, seed=41, dtype=np.float32)
    path = tmp_path / "net.dtck"
    save_checkpoint(path, cfg, net.store)
    blob = bytearray(path.read_bytes())
    blob[50] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(path)


def test_checkpoint_kind_enforced(tmp_path):
    cfg = small_config()
    net = TrackingNetwork.create(cfg, seed=42, dtype=np.float32)
    path = tmp_path / "net.dtck"
    save_checkpoint(path, cfg, net.store, kind=KIND_ONESHOT)
    with pytest.raises(CheckpointError, match="not a tracking network"):
        load_tracking_network(path)


def test_network_gradients_flow_through_unroll():
    cfg = small_config()
    net = TrackingNetwork.create(cfg, seed=43)
    rng = np.random.default_rng(44)
    target = Tensor((rng.uniform(size=(8, 8)) < 0.4).astype(float))
    mask = Tensor(np.ones((8, 8)))
    from occutrack import engine

    with Graph() as g:
        h = net.zero_state()
        total = None
        for _ in range(3):
            vis = (rng.uniform(size=(8, 8)) < 0.7).astype(np.uint8)
            occ = ((rng.uniform(size=(8, 8)) < 0.3).astype(np.uint8)) & vis
            x = net.encode_observation(PartialObservation(vis, occ))
            h, y, c = net.forward_step(h, x)
            loss = engine.masked_bce_loss(y, target, mask)
            total = loss if total is None else engine.elem_add(total, loss)
        g.backward(total)
    # every recurrent kernel and bias received a gradient
    for name in net.store.names():
        if name.startswith("sem."):
            continue
        assert net.store[name].grad is not None, name
        assert np.any(net.store[name].grad != 0), name
