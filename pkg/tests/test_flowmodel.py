import numpy as np
import pytest

from analogyflow import rng
from analogyflow.analogydata import COMPOSITE_DIM, TransformSpec, make_composite, make_triplet, stack
from analogyflow.config import ConfigError
from analogyflow.diffcore import ShapeError
from analogyflow.diffcore.gradcheck import grad_check
from analogyflow.flowmodel import (
    FlowBatch,
    VelocityNet,
    draw_times,
    extract_quadrant,
    fm_loss,
    make_flow_batch,
    sample,
    time_embedding,
    velocity,
)
from analogyflow.gradsuite import velocity_loss_case

from conftest import tiny_config


def routing_for(triplets):
    bt = stack(triplets)
    return bt, (bt.a, bt.a_prime, bt.b)


def tiny_net(seed=0, **overrides):
    cfg = tiny_config(**overrides)
    return VelocityNet.create(cfg, seed).attach_adapters(seed)


def inputs(seed=0, rows=3):
    trips = [make_triplet(TransformSpec("brightness", 0.2), seed * 10 + i, seed * 10 + i + 100) for i in range(rows)]
    bt, routing = routing_for(trips)
    g = np.random.default_rng(seed)
    return g.normal(size=bt.y.shape), g.random(rows), bt.y, bt.hints, routing


def test_time_embedding_shape_and_values():
    emb = time_embedding([0.0, 0.5], 4)
    assert emb.shape == (2, 4)
    np.testing.assert_allclose(emb[0], [0, 0, 1, 1], atol=1e-15)
    np.testing.assert_allclose(emb[1], [1, 0, 0, -1], atol=1e-15)
    with pytest.raises(ValueError):
        time_embedding(0.1, 3)


def test_layer_dims_and_output_width():
    net = tiny_net()
    assert net.layer_dims == [512 + 4 + 3, 16, 16, COMPOSITE_DIM]
    z, t, y, c, routing = inputs()
    assert velocity(net, z, t, y, c, routing).shape == (3, COMPOSITE_DIM)


def test_only_targeted_layers_carry_adapters():
    net = tiny_net(targets=(1,))
    assert net.attached == (1,)
    assert not any(k.startswith("lora.layer0") for k in net.params)
    assert VelocityNet.create(tiny_config()).attached == ()


def test_nonexistent_target_layer_is_rejected():
    base = VelocityNet.create(tiny_config())
    with pytest.raises(ConfigError):
        VelocityNet(tiny_config(targets=(0, 5)), base.params).attach_adapters()


def test_zero_adapters_reproduce_the_base_exactly():
    net = tiny_net()
    z, t, y, c, routing = inputs()
    adapted = velocity(net, z, t, y, c, routing)
    base = velocity(net, z, t, y, c, adapters=False)
    stripped = velocity(net.without_adapters(), z, t, y, c)
    assert adapted.tobytes() == base.tobytes() == stripped.tobytes()


def test_nonzero_adapters_change_the_output():
    net = tiny_net()
    g = np.random.default_rng(1)
    net = net.with_params({k: g.normal(size=v.shape).astype(v.dtype) for k, v in net.params.items() if k.endswith(".B")})
    z, t, y, c, routing = inputs()
    assert not np.array_equal(velocity(net, z, t, y, c, routing), velocity(net, z, t, y, c, adapters=False))


def test_velocity_is_deterministic():
    z, t, y, c, routing = inputs()
    one = velocity(tiny_net(3), z, t, y, c, routing)
    two = velocity(tiny_net(3), z, t, y, c, routing)
    assert one.tobytes() == two.tobytes()


def test_missing_routing_inputs_are_rejected():
    z, t, y, c, _ = inputs()
    with pytest.raises(ValueError, match="routing"):
        velocity(tiny_net(), z, t, y, c)


def test_single_composite_input():
    net = tiny_net()
    z, t, y, c, routing = inputs(rows=1)
    single = velocity(net, z[0], t[0], y[0], c[0], tuple(r[0] for r in routing))
    assert single.shape == (COMPOSITE_DIM,)
    np.testing.assert_allclose(single, velocity(net, z, t, y, c, routing)[0], rtol=1e-6)


def test_parameters_are_read_only_and_validated():
    net = tiny_net()
    with pytest.raises(ValueError):
        net.params["hint.table"][0, 0] = 1.0
    with pytest.raises(ShapeError):
        VelocityNet(net.cfg, {**net.params, "lora.layer0.extra": np.zeros(2)})
    params = dict(net.params)
    params["base.layer0.weight"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ShapeError):
        VelocityNet(net.cfg, params)


def test_parameter_groups():
    net = tiny_net()
    assert all(k.startswith(("base.", "encoder.")) for k in net.frozen_names())
    assert "hint.table" in net.trainable_names()
    assert not set(net.frozen_names()) & set(net.trainable_names())
    assert set(net.frozen_names()) | set(net.trainable_names()) == set(net.params)
    assert net.adapter_parameter_count(0) == 3 * 2 * (519 + 16)


def test_flow_batch_interpolates_linearly():
    g = np.random.default_rng(0)
    x0, x1 = g.random((4, COMPOSITE_DIM)), g.normal(size=(4, COMPOSITE_DIM))
    t = np.array([0.0, 0.25, 0.5, 1.0])
    fb = FlowBatch(x0=x0, x1=x1, t=t, y=x0, c=np.zeros(4, dtype=np.int64))
    np.testing.assert_allclose(fb.z_t, (1 - t[:, None]) * x0 + t[:, None] * x1)
    np.testing.assert_array_equal(fb.z_t[0], x0[0])
    np.testing.assert_array_equal(fb.z_t[3], x1[3])
    np.testing.assert_array_equal(fb.target, x1 - x0)
    with pytest.raises(ValueError):
        FlowBatch(x0=x0, x1=x1, t=t + 0.5, y=x0, c=np.zeros(4, dtype=np.int64))


def test_time_densities():
    g = np.random.default_rng(0)
    u = draw_times(g, 20000, "uniform")
    q = draw_times(g, 20000, "quadratic")
    assert abs(u.mean() - 0.5) < 0.01
    assert abs(q.mean() - 0.75) < 0.01  # E[t] for density 3t^2
    assert u.min() >= 0 and q.max() <= 1
    with pytest.raises(ValueError):
        draw_times(g, 3, "beta")


def _batch(rows=4, seed=0):
    g = np.random.default_rng(seed)
    x0 = g.random((rows, COMPOSITE_DIM))
    return make_flow_batch(x0, x0, np.zeros(rows), g, dtype=np.float64)


def test_oracle_velocity_has_zero_loss():
    fb = _batch()
    assert fm_loss(lambda z, t, y, c, r: fb.target, fb).item() == 0.0


def test_zero_net_against_unit_target_has_unit_loss():
    x0 = np.zeros((3, COMPOSITE_DIM))
    fb = FlowBatch(x0=x0, x1=np.ones_like(x0), t=np.full(3, 0.5), y=x0, c=np.zeros(3, dtype=np.int64))
    assert fm_loss(lambda z, t, y, c, r: np.zeros_like(z), fb).item() == 1.0


def test_loss_is_non_negative():
    net = VelocityNet.create(tiny_config())
    for seed in range(5):
        assert fm_loss(net, _batch(seed=seed)).item() >= 0.0


def test_loss_gradient_matches_finite_differences():
    fn, leaves = velocity_loss_case(seed=1)
    assert any(k.startswith("lora.") for k in leaves) and "hint.table" in leaves
    assert grad_check(fn, leaves, eps=1e-5) < 1e-4


def test_point_mass_sampling_is_exact():
    target = np.random.default_rng(0).random(COMPOSITE_DIM)

    def field(z, t, y, c, r):
        return (z - target) / t[:, None]

    for steps in (1, 4, 32):
        out = sample(field, np.zeros(COMPOSITE_DIM), 0, steps=steps, seed=3)
        assert np.max(np.abs(out - target)) < 1e-5


def test_one_step_with_zero_field_returns_the_noise():
    out = sample(lambda z, t, y, c, r: np.zeros_like(z), np.zeros(COMPOSITE_DIM), 0, steps=1, seed=11)
    noise = rng.stream(11, "sample").standard_normal((1, COMPOSITE_DIM))
    np.testing.assert_array_equal(out, noise[0])


def test_sampling_is_deterministic():
    net = tiny_net()
    _, _, y, c, routing = inputs()
    one = sample(net, y, c, routing, steps=32, seed=5)
    two = sample(net, y, c, routing, steps=32, seed=5)
    assert one.tobytes() == two.tobytes()
    assert one.tobytes() != sample(net, y, c, routing, steps=32, seed=6).tobytes()


def test_zero_adapters_sample_like_the_base():
    net = tiny_net()
    _, _, y, c, routing = inputs()
    assert sample(net, y, c, routing, steps=4, seed=1).tobytes() == sample(net, y, c, steps=4, seed=1, adapters=False).tobytes()


@pytest.mark.parametrize("steps", [0, -1, 2.5])
def test_non_positive_step_counts_are_rejected(steps):
    with pytest.raises(ValueError, match="positive"):
        sample(lambda z, t, y, c, r: z, np.zeros(COMPOSITE_DIM), 0, steps=steps)


def test_extract_quadrant_contract():
    t = make_triplet(TransformSpec("hflip"), 1, 2)
    comp = make_composite(t)
    np.testing.assert_array_equal(extract_quadrant(comp.x0.reshape(-1), "BR"), t.b_prime_oracle)
    np.testing.assert_array_equal(extract_quadrant(comp.y, "BR"), t.b)
    for name, src in zip(("TL", "TR", "BL"), (t.a, t.a_prime, t.b)):
        np.testing.assert_array_equal(extract_quadrant(comp.x0, name), src)
    with pytest.raises(ValueError):
        extract_quadrant(comp.x0, "XX")
    with pytest.raises(ShapeError):
        extract_quadrant(np.zeros(10), "TL")


def test_output_depends_on_a_prime_after_training(smoke):
    net = smoke.net
    t1 = make_triplet(TransformSpec("brightness", 0.2), 5, 6)
    t2 = make_triplet(TransformSpec("brightness", 0.4), 5, 6)
    z = np.random.default_rng(0).normal(size=COMPOSITE_DIM)
    v1 = velocity(net, z, 0.5, make_composite(t1).y, t1.spec.hint, (t1.a, t1.a_prime, t1.b))
    v2 = velocity(net, z, 0.5, make_composite(t2).y, t2.spec.hint, (t2.a, t2.a_prime, t2.b))
    assert np.linalg.norm(v1 - v2) > 0
