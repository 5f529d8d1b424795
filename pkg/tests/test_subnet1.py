import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fd import check_grads
from twosubnet_tal.subnet1 import (AuxiliaryHeads, BackboneConfig, ConfigurationError,
                                   ConvBackbone, ProposalFeatureMaps, ProposalTooShortError,
                                   SubnetOne, auxiliary_heads, build_feature_maps,
                                   extract_spatial_feature, extract_temporal_feature,
                                   pool_thirds, third_bounds)
from twosubnet_tal.timeline import TemporalInterval, augment_proposal

PIX = BackboneConfig(mode="pixel", feature_dim=8, widths=(4,), height=8, width=8, unit_length=2)


@pytest.mark.parametrize("m,bounds", [(3, (1, 2)), (9, (3, 6)), (10, (3, 7)), (11, (3, 8))])
def test_third_bounds(m, bounds):
    assert third_bounds(m) == bounds


@given(st.integers(3, 40), st.integers(1, 6), st.integers(0, 1000))
def test_pool_thirds_matches_numpy(m, d, seed):
    V = np.random.default_rng(seed).normal(size=(d, m))
    k = m // 3
    expect = [V[:, :k].mean(1), V[:, k:m - k].mean(1), V[:, m - k:].mean(1)]
    got = pool_thirds(torch.as_tensor(V))
    for e, g in zip(expect, got):
        np.testing.assert_allclose(g.numpy(), e, rtol=0, atol=1e-12)


def test_too_short():
    with pytest.raises(ProposalTooShortError):
        pool_thirds(torch.zeros(4, 2))


def test_aux_fusion_oracle():
    torch.manual_seed(0)
    heads = AuxiliaryHeads(4, 3).double()
    Vs, Vt = torch.randn(4, 9, dtype=torch.float64), torch.randn(4, 9, dtype=torch.float64)
    a, t, r = auxiliary_heads(ProposalFeatureMaps(Vs, Vt), heads)
    mid = 0.5 * Vs[:, 3:6].mean(1) + 0.5 * Vt[:, 3:6].mean(1)
    whole = 0.5 * torch.cat([Vs[:, :3].mean(1), Vs[:, 3:6].mean(1), Vs[:, 6:].mean(1)]) + \
        0.5 * torch.cat([Vt[:, :3].mean(1), Vt[:, 3:6].mean(1), Vt[:, 6:].mean(1)])
    torch.testing.assert_close(a, heads.action.weight @ mid + heads.action.bias, rtol=0, atol=1e-12)
    torch.testing.assert_close(t, heads.tiou.weight @ whole + heads.tiou.bias, rtol=0, atol=1e-12)
    torch.testing.assert_close(r, heads.regression.weight @ whole + heads.regression.bias,
                               rtol=0, atol=1e-12)
    assert a.shape == (4,) and t.shape == (3,) and r.shape == (2,)


class TestBackbones:
    def test_shapes(self):
        torch.manual_seed(0)
        net = SubnetOne(PIX, 3)
        f = extract_spatial_feature(torch.rand(3, 8, 8), net.spatial, PIX)
        g = extract_temporal_feature(torch.rand(4, 8, 8), net.temporal, PIX)
        assert f.shape == (8,) and g.shape == (8,)

    def test_wrong_size(self):
        net = SubnetOne(PIX, 3)
        with pytest.raises(ConfigurationError):
            extract_spatial_feature(torch.rand(3, 9, 8), net.spatial, PIX)
        with pytest.raises(ConfigurationError):
            extract_temporal_feature(torch.rand(3, 8, 8), net.temporal, PIX)

    def test_bad_config(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(mode="pixel", height=4)
        with pytest.raises(ConfigurationError):
            BackboneConfig(mode="audio")

    def test_deterministic(self):
        x = torch.rand(5, 3, 8, 8)
        outs = []
        for _ in range(2):
            torch.manual_seed(3)
            outs.append(SubnetOne(PIX, 3).spatial(x))
        assert torch.equal(outs[0], outs[1])

    def test_batch_permutation(self):
        torch.manual_seed(0)
        net = ConvBackbone(3, (4, 4), 8)
        x = torch.rand(6, 3, 8, 8)
        perm = torch.tensor([3, 1, 5, 0, 2, 4])
        torch.testing.assert_close(net(x)[perm], net(x[perm]))

    def test_encode_units(self):
        torch.manual_seed(0)
        net = SubnetOne(PIX, 3)
        s, t = net.encode_units(torch.rand(7, 3, 8, 8), torch.rand(7, 4, 8, 8))
        assert s.shape == (8, 7) and t.shape == (8, 7)

    def test_backbone_gradients(self):
        torch.manual_seed(1)
        net = ConvBackbone(3, (3,), 4).double()
        x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        w = torch.randn(2, 4, dtype=torch.float64)
        check_grads(lambda: (net(x) * w).sum(), list(net.parameters()))


def test_build_feature_maps_gathers_columns():
    p = augment_proposal(TemporalInterval(17, 24), 80, unit_length=8)
    assert p.unit_indices == [2, 3, 4]
    us = torch.arange(20.0).reshape(2, 10)
    maps = build_feature_maps(p, us, -us)
    assert maps.V_s.tolist() == [[1, 2, 3], [11, 12, 13]]
    assert torch.equal(maps.V_t, -maps.V_s)
    assert maps.num_units == 3


def test_build_feature_maps_mismatch():
    p = augment_proposal(TemporalInterval(17, 24), 80, unit_length=8)
    with pytest.raises(ConfigurationError):
        build_feature_maps(p, torch.zeros(2, 10), torch.zeros(2, 10), unit_indices=[1, 2])
    with pytest.raises(ConfigurationError):
        build_feature_maps(p, torch.zeros(2, 3), torch.zeros(2, 3))


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 12), st.integers(0, 100))
def test_aux_heads_gradients(m, seed):
    torch.manual_seed(seed)
    heads = AuxiliaryHeads(4, 3).double()
    Vs = torch.randn(4, m, dtype=torch.float64, requires_grad=True)
    Vt = torch.randn(4, m, dtype=torch.float64, requires_grad=True)

    def f():
        a, t, r = auxiliary_heads(ProposalFeatureMaps(Vs, Vt), heads)
        return a.logsumexp(0) + (t ** 2).sum() + r.sum()
    check_grads(f, [Vs, Vt] + list(heads.parameters()))
