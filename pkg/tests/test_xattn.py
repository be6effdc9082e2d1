import math

import numpy as np
import pytest
import torch

from ildm.errors import ConfigError, ContractError
from ildm.xattn import (AttnProjections, AttnWeightSchedule, ScheduleKind, attention_backward_check, bench_attention,
                        bias_matrix, biased_attention, cross_domain_attention, cross_domain_attention_with_probs,
                        default_drop_layers, eval_weight, random_check_inputs, single_domain_attention,
                        softmax_attention, _split_heads, project)


def test_drop_schedule_grid():
    sched = AttnWeightSchedule.drop()
    for l in range(1, 10):
        for t in range(0, 1001, 100):
            expected = 1.0 if (3 <= l <= 7 and t <= 900) else 0.0
            assert eval_weight(sched, l, t) == expected


def test_gaussian_schedule_grid():
    sched = AttnWeightSchedule.gaussian()
    for l in range(1, 10):
        for t in range(0, 1001, 100):
            assert abs(eval_weight(sched, l, t) - math.exp(-((t - 800) ** 2) / 100 ** 2)) <= 1e-12
    assert eval_weight(sched, 1, 800) == 1.0


def test_constant_schedules():
    assert eval_weight(AttnWeightSchedule.full(), 4, 123) == 1.0
    assert eval_weight(AttnWeightSchedule.off(), 4, 123) == 0.0
    assert AttnWeightSchedule.off().is_constant()
    assert not AttnWeightSchedule.drop().is_constant()


def test_schedule_validation():
    with pytest.raises(ConfigError):
        AttnWeightSchedule.gaussian(alpha=0.0)
    with pytest.raises(ConfigError):
        AttnWeightSchedule.gaussian(sigma=0.0)
    with pytest.raises(ConfigError):
        AttnWeightSchedule.drop(layers=[0, 1])
    with pytest.raises(ContractError):
        AttnWeightSchedule.full().weight(0, 10)
    with pytest.raises(ConfigError):
        ScheduleKind.parse("sometimes")


def test_schedule_to_from_dict():
    for sched in [AttnWeightSchedule.drop(), AttnWeightSchedule.gaussian(alpha=0.5), AttnWeightSchedule.off()]:
        again = AttnWeightSchedule.fromdict(sched.asdict())
        assert again.asdict() == sched.asdict()
    assert ScheduleKind.parse("gauss") is ScheduleKind.Gaussian
    assert str(ScheduleKind.Gaussian) == "gaussian"


def test_default_drop_layers():
    assert default_drop_layers(4) == frozenset({3, 4, 5, 6, 7})
    assert default_drop_layers(2) == frozenset({2, 3, 4})


def test_bias_matrix():
    b = bias_matrix(3, 0.5)
    assert b.shape == (3, 6)
    assert torch.all(b[:, :3] == 0)
    assert torch.allclose(b[:, 3:], torch.full((3, 3), math.log(0.5), dtype=torch.float64))
    assert torch.all(torch.isinf(bias_matrix(2, 0.0)[:, 2:]))


def _unbiased_concatenated(z_x, z_i, proj):
    q = project(z_x, proj.q_x)
    k = torch.cat([project(z_x, proj.k_x), project(z_i, proj.k_i)], dim=-2)
    v = torch.cat([project(z_x, proj.v_x), project(z_i, proj.v_i)], dim=-2)
    return softmax_attention(q, k, v)[0]


@pytest.mark.parametrize("path", ["fused", "explicit"])
def test_endpoint_identities(path):
    rng = np.random.default_rng(0)
    for seed in range(100):
        n, d = int(rng.integers(1, 17)), int(rng.integers(1, 33))
        inputs = random_check_inputs(n, d, 0.0, seed=seed)
        z_x, z_i, proj = inputs.z_x, inputs.z_i, inputs.proj

        # w = 0: the image branch ignores the intrinsic tokens entirely
        attn_x, _ = cross_domain_attention(z_x, z_i, proj, 0.0, path=path)
        alone, _ = single_domain_attention(z_x, proj.q_x, proj.k_x, proj.v_x)
        assert (attn_x - alone).abs().max().item() < 1e-6

        # w = 1: plain attention over the concatenated keys
        attn_x, attn_i = cross_domain_attention(z_x, z_i, proj, 1.0, path=path)
        assert (attn_x - _unbiased_concatenated(z_x, z_i, proj)).abs().max().item() < 1e-6


def test_zero_weight_fused_path_is_bit_identical():
    inputs = random_check_inputs(8, 16, 0.0, num_heads=2, seed=4)
    attn_x, _ = cross_domain_attention(inputs.z_x, inputs.z_i, inputs.proj, 0.0, num_heads=2, path="fused")
    alone, _ = single_domain_attention(inputs.z_x, inputs.proj.q_x, inputs.proj.k_x, inputs.proj.v_x, num_heads=2)
    assert torch.equal(attn_x, alone)


def test_intrinsic_branch_ignores_weight():
    inputs = random_check_inputs(6, 8, 0.0, seed=1)
    _, attn_i_0 = cross_domain_attention(inputs.z_x, inputs.z_i, inputs.proj, 0.0)
    _, attn_i_1 = cross_domain_attention(inputs.z_x, inputs.z_i, inputs.proj, 0.7)
    assert torch.equal(attn_i_0, attn_i_1)


def test_softmax_rows_sum_to_one():
    for w in [0.01, 0.3, 1.0]:
        inputs = random_check_inputs(5, 8, w, num_heads=2, seed=2)
        _, _, probs = cross_domain_attention_with_probs(inputs.z_x, inputs.z_i, inputs.proj, w, num_heads=2)
        assert probs.shape == (2, 5, 10)
        assert torch.allclose(probs.sum(-1), torch.ones(2, 5, dtype=torch.float64), atol=1e-6)


def test_smaller_weight_moves_mass_to_own_domain():
    inputs = random_check_inputs(6, 8, 0.0, seed=5)
    masses = []
    for w in [1.0, 0.5, 0.1]:
        _, _, probs = cross_domain_attention_with_probs(inputs.z_x, inputs.z_i, inputs.proj, w)
        masses.append(probs[..., 6:].sum().item())
    assert masses[0] > masses[1] > masses[2]


def test_each_cross_key_weight_falls_with_w():
    inputs = random_check_inputs(6, 8, 0.0, num_heads=2, seed=6)
    previous = None
    for w in [1.0, 0.75, 0.5, 0.25, 0.1, 0.01, 0.0]:
        _, _, probs = cross_domain_attention_with_probs(inputs.z_x, inputs.z_i, inputs.proj, w, num_heads=2)
        if previous is not None:
            assert torch.all(probs[..., 6:] <= previous[..., 6:] + 1e-12)
            assert torch.all(probs[..., :6] >= previous[..., :6] - 1e-12)
        previous = probs
    assert torch.all(previous[..., 6:] == 0)


@pytest.mark.parametrize("path", ["fused", "explicit"])
def test_scalar_hand_example(path):
    one = torch.ones(1, 1, dtype=torch.float64)
    out, probs = biased_attention(one, one, 2 * one, one, 4 * one, 0.5, path=path)
    assert abs(out.item() - 8.0 / 3.0) < 1e-12
    assert torch.allclose(probs, torch.tensor([[2.0 / 3.0, 1.0 / 3.0]], dtype=torch.float64), atol=1e-12)


@pytest.mark.parametrize("path", ["fused", "explicit"])
def test_zero_weight_blocks_gradient_to_intrinsic_keys(path):
    inputs = random_check_inputs(5, 8, 0.0, num_heads=2, seed=8)
    z_i = inputs.z_i.clone().requires_grad_(True)
    proj = AttnProjections(*[p.clone().requires_grad_(True) for p in inputs.proj])
    attn_x, _ = cross_domain_attention(inputs.z_x, z_i, proj, 0.0, num_heads=2, path=path)
    cotangent = torch.randn(attn_x.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    (attn_x * cotangent).sum().backward()
    for grad in (z_i.grad, proj.k_i.grad, proj.v_i.grad):
        assert grad is None or torch.all(grad == 0)
    # The image-branch projections do receive gradient
    assert proj.v_x.grad is not None and torch.any(proj.v_x.grad != 0)


def test_per_example_weights_match_scalar_calls():
    g = torch.Generator().manual_seed(0)
    inputs = random_check_inputs(4, 8, 0.0, seed=3)
    z_x = torch.randn(3, 4, 8, generator=g, dtype=torch.float64)
    z_i = torch.randn(3, 4, 8, generator=g, dtype=torch.float64)
    w = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
    batched, _ = cross_domain_attention(z_x, z_i, inputs.proj, w)
    for b in range(3):
        single, _ = cross_domain_attention(z_x[b], z_i[b], inputs.proj, float(w[b]))
        assert torch.allclose(batched[b], single, atol=1e-10)


def test_attention_contract_errors():
    inputs = random_check_inputs(4, 8, 0.5, seed=0)
    with pytest.raises(ContractError):
        cross_domain_attention(inputs.z_x, inputs.z_i[:3], inputs.proj, 0.5)
    with pytest.raises(ContractError):
        cross_domain_attention(inputs.z_x, inputs.z_i, inputs.proj, 1.5)
    with pytest.raises(ContractError):
        _split_heads(inputs.z_x, 3)
    with pytest.raises(ConfigError):
        cross_domain_attention(inputs.z_x, inputs.z_i, inputs.proj, 0.5, path="flash")


def test_gradient_check_random_instances():
    for seed in range(20):
        n = 4 if seed % 2 == 0 else 3
        w = [0.25, 0.5, 1.0, 0.8][seed % 4]
        inputs = random_check_inputs(n, 8, w, num_heads=1 + seed % 2, seed=seed)
        assert attention_backward_check(inputs, epsilon=1e-6, seed=seed) < 1e-4


def test_gradient_check_rejects_bad_epsilon():
    inputs = random_check_inputs(2, 4, 0.5)
    with pytest.raises(ConfigError):
        attention_backward_check(inputs, epsilon=1e-2)


def test_bench_paths_agree():
    reports = bench_attention(256, 64, 0.5, reps=2)
    assert [r.path for r in reports] == ["fused", "explicit"]
    for r in reports:
        assert r.max_abs_diff < 1e-6
        assert r.median_ns > 0
        assert r.p95_ns >= r.median_ns
