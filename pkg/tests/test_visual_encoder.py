"""Image-branch units: averaging, both enhancement paths, projection."""

import numpy as np
import pytest
import torch

import oracles
from mcitr.visual_encoder import (ClipGuidedEnhancement, DegenerateInputError,
                                  ImageEncoder, SelfGuidedEnhancement,
                                  average_global, enhance_regions)


def _bn_params(bn) -> dict:
    return {
        "weight": bn.weight.detach().numpy().astype(np.float64),
        "bias": bn.bias.detach().numpy().astype(np.float64),
        "running_mean": bn.running_mean.detach().numpy().astype(np.float64),
        "running_var": bn.running_var.detach().numpy().astype(np.float64),
        "eps": bn.eps,
    }


def _linear_params(linear) -> dict:
    return {
        "weight": linear.weight.detach().numpy().astype(np.float64),
        "bias": None if linear.bias is None
        else linear.bias.detach().numpy().astype(np.float64),
    }


def _sge_params(module: SelfGuidedEnhancement) -> dict:
    return {
        "region_map": _linear_params(module.region_map),
        "global_map": _linear_params(module.global_map),
        "region_bn": _bn_params(module.region_tb.bn),
        "global_bn": _bn_params(module.global_tb.bn),
        "score_weight": module.score.weight.detach().numpy().astype(np.float64),
    }


def _cge_params(module: ClipGuidedEnhancement) -> dict:
    return {
        "bn_in": _bn_params(module.bn_in),
        "bn_mid": _bn_params(module.bn_mid),
        "fc1": _linear_params(module.fc1),
        "fc2": _linear_params(module.fc2),
    }


def _randomize(module: torch.nn.Module, seed: int, scale: float = 0.5) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


class TestAverageGlobal:
    def test_identical_rows(self):
        v = torch.tensor([1.5, -2.0, 0.25])
        regions = v.repeat(4, 1)
        assert torch.allclose(average_global(regions), v)

    def test_two_rows_zero_and_u(self):
        u = torch.tensor([2.0, 4.0, -6.0])
        regions = torch.stack([torch.zeros(3), u])
        assert torch.allclose(average_global(regions), u / 2)

    def test_matches_naive_loop_mean(self):
        rng = np.random.default_rng(0)
        regions = rng.standard_normal((36, 2048))
        got = average_global(torch.tensor(regions)).numpy()
        expected = np.array([sum(float(regions[i, j]) for i in range(36)) / 36
                             for j in range(2048)])
        rel = np.abs(got - expected) / np.maximum(np.abs(expected), 1e-12)
        assert rel.max() < 1e-6

    def test_batched_shape(self):
        out = average_global(torch.randn(5, 7, 3))
        assert out.shape == (5, 3)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            average_global(torch.zeros(0, 4))


class TestSelfGuidedEnhancement:
    def test_single_region_unit_weight(self):
        torch.manual_seed(0)
        sge = SelfGuidedEnhancement(6).double().eval()
        regions = torch.randn(2, 1, 6, dtype=torch.float64)
        v_glo, weights = sge(regions, return_weights=True)
        assert torch.allclose(weights, torch.ones(2, 1, dtype=torch.float64))
        expected = regions[:, 0] / regions[:, 0].norm(dim=1, keepdim=True)
        assert torch.allclose(v_glo, expected, atol=1e-12)

    def test_zero_score_weight_gives_uniform(self):
        torch.manual_seed(1)
        sge = SelfGuidedEnhancement(5).double().eval()
        with torch.no_grad():
            sge.score.weight.zero_()
        regions = torch.randn(3, 4, 5, dtype=torch.float64)
        v_glo, weights = sge(regions, return_weights=True)
        assert torch.allclose(weights, torch.full((3, 4), 0.25, dtype=torch.float64))
        v_ave = regions.mean(dim=1)
        expected = v_ave / v_ave.norm(dim=1, keepdim=True)
        assert torch.allclose(v_glo, expected, atol=1e-12)

    @pytest.mark.parametrize("training", [False, True])
    def test_matches_loop_oracle(self, training):
        for seed in range(4):
            sge = SelfGuidedEnhancement(8).double()
            _randomize(sge, seed)
            with torch.no_grad():  # nontrivial running stats for eval mode
                sge.region_tb.bn.running_mean.uniform_(-0.3, 0.3)
                sge.region_tb.bn.running_var.uniform_(0.5, 1.5)
                sge.global_tb.bn.running_mean.uniform_(-0.3, 0.3)
                sge.global_tb.bn.running_var.uniform_(0.5, 1.5)
            sge.train(training)
            regions = torch.randn(3, 5, 8, dtype=torch.float64)
            v_glo, weights = sge(regions, return_weights=True)
            exp_v, exp_w = oracles.sge_global(regions.numpy(), _sge_params(sge),
                                              training)
            np.testing.assert_allclose(v_glo.detach().numpy(), exp_v, atol=1e-10)
            np.testing.assert_allclose(weights.detach().numpy(), exp_w, atol=1e-10)

    def test_weights_nonnegative_sum_one(self):
        torch.manual_seed(3)
        sge = SelfGuidedEnhancement(7).eval()
        regions = torch.randn(4, 6, 7)
        _, weights = sge(regions, return_weights=True)
        assert (weights >= 0).all()
        assert torch.allclose(weights.sum(dim=1), torch.ones(4), atol=1e-6)

    def test_permutation_invariant_in_eval(self):
        torch.manual_seed(4)
        sge = SelfGuidedEnhancement(6).double().eval()
        regions = torch.randn(2, 5, 6, dtype=torch.float64)
        base = sge(regions)
        perm = torch.randperm(5)
        assert torch.allclose(sge(regions[:, perm]), base, atol=1e-10)

    def test_zero_regions_degenerate(self):
        sge = SelfGuidedEnhancement(4).eval()
        with pytest.raises(DegenerateInputError):
            sge(torch.zeros(1, 3, 4))

    def test_batchnorm_single_sample_uses_running_stats(self):
        # the global branch sees one row per image; in train mode it must fall
        # back to running statistics (batch statistics of one row degenerate)
        from mcitr.visual_encoder import SingleSampleSafeBatchNorm

        torch.manual_seed(5)
        bn = SingleSampleSafeBatchNorm(6).double()
        with torch.no_grad():
            bn.running_mean.uniform_(-0.5, 0.5)
            bn.running_var.uniform_(0.5, 2.0)
        row = torch.randn(1, 6, dtype=torch.float64)
        bn.train()
        train_out = bn(row)
        bn.eval()
        eval_out = bn(row)
        assert torch.allclose(train_out, eval_out, atol=1e-12)
        # ...and a one-sample train pass leaves the running stats untouched
        mean_before = bn.running_mean.clone()
        bn.train()
        bn(row)
        assert torch.equal(bn.running_mean, mean_before)

    def test_single_image_train_forward_matches_oracle(self):
        # B=1 exercises the running-stat fallback inside the full pipeline;
        # the oracle encodes the same convention
        torch.manual_seed(5)
        sge = SelfGuidedEnhancement(6).double()
        _randomize(sge, 13)
        with torch.no_grad():
            sge.global_tb.bn.running_mean.uniform_(-0.3, 0.3)
            sge.global_tb.bn.running_var.uniform_(0.5, 1.5)
        sge.train()
        regions = torch.randn(1, 4, 6, dtype=torch.float64)
        got = sge(regions)
        exp_v, _ = oracles.sge_global(regions.numpy(), _sge_params(sge),
                                      training=True)
        np.testing.assert_allclose(got.detach().numpy(), exp_v, atol=1e-10)


class TestClipGuidedEnhancement:
    def test_zero_weights_zero_output(self):
        cge = ClipGuidedEnhancement(4, 6).double().eval()
        with torch.no_grad():
            for p in (cge.fc1.weight, cge.fc1.bias, cge.fc2.weight, cge.fc2.bias):
                p.zero_()
        out = cge(torch.randn(3, 4, dtype=torch.float64))
        assert torch.allclose(out, torch.zeros(3, 6, dtype=torch.float64))

    def test_identity_stage_reduces_to_gelu_affine(self):
        # square stage, identity first affine, fresh BN in eval mode has
        # unit statistics (eps zeroed), so the output is fc2(gelu(x))
        cge = ClipGuidedEnhancement(5, 5).double().eval()
        cge.bn_in.eps = 0.0
        cge.bn_mid.eps = 0.0
        with torch.no_grad():
            cge.fc1.weight.copy_(torch.eye(5, dtype=torch.float64))
            cge.fc1.bias.zero_()
        x = torch.randn(4, 5, dtype=torch.float64)
        got = cge(x).detach().numpy()
        expected = oracles.affine_rows(
            np.vectorize(oracles.gelu)(x.numpy()),
            cge.fc2.weight.detach().numpy(), cge.fc2.bias.detach().numpy())
        np.testing.assert_allclose(got, expected, atol=1e-10)

    @pytest.mark.parametrize("training", [False, True])
    def test_matches_loop_oracle(self, training):
        for seed in range(4):
            cge = ClipGuidedEnhancement(6, 9).double()
            _randomize(cge, seed)
            with torch.no_grad():
                cge.bn_in.running_mean.uniform_(-0.2, 0.2)
                cge.bn_in.running_var.uniform_(0.5, 1.5)
                cge.bn_mid.running_mean.uniform_(-0.2, 0.2)
                cge.bn_mid.running_var.uniform_(0.5, 1.5)
            cge.train(training)
            x = torch.randn(5, 6, dtype=torch.float64)
            got = cge(x).detach().numpy()
            expected = oracles.cge_global(x.numpy(), _cge_params(cge), training)
            np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_equal_inputs_equal_outputs(self):
        torch.manual_seed(2)
        cge = ClipGuidedEnhancement(5, 7).eval()
        row = torch.randn(1, 5)
        out = cge(row.repeat(6, 1))
        assert torch.allclose(out, out[0].expand_as(out), atol=1e-6)

    def test_spatial_input_pooled_through_layernorm(self):
        torch.manual_seed(6)
        cge = ClipGuidedEnhancement(5, 7).double().eval()
        spatial = torch.randn(2, 9, 5, dtype=torch.float64)
        got = cge(spatial).detach().numpy()
        normed = oracles.layernorm_rows(
            spatial.reshape(-1, 5).numpy(),
            cge.spatial_norm.weight.detach().numpy(),
            cge.spatial_norm.bias.detach().numpy(),
            cge.spatial_norm.eps).reshape(2, 9, 5)
        pooled = normed.mean(axis=1)
        expected = oracles.cge_global(pooled, _cge_params(cge), training=False)
        np.testing.assert_allclose(got, expected, atol=1e-10)


class TestEnhanceRegions:
    def test_zero_global_keeps_regions(self):
        regions = torch.randn(2, 5, 4)
        out, weights = enhance_regions(regions, torch.zeros(2, 4),
                                       return_weights=True)
        assert torch.allclose(out, regions)
        assert torch.allclose(weights, torch.full((2, 5), 0.2))

    def test_single_region_adds_global(self):
        regions = torch.randn(1, 1, 4)
        v_glo = torch.randn(1, 4)
        out = enhance_regions(regions, v_glo)
        assert torch.allclose(out, regions + v_glo.unsqueeze(1))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        regions = torch.tensor(rng.standard_normal((3, 6, 5)))
        v_glo = torch.tensor(rng.standard_normal((3, 5)))
        got = enhance_regions(regions, v_glo).numpy()
        expected = oracles.enhance_regions(regions.numpy(), v_glo.numpy())
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            regions = torch.tensor(rng.standard_normal((1, 7, 4)))
            v_glo = torch.tensor(rng.standard_normal((1, 4)))
            base = enhance_regions(regions, v_glo)
            perm = torch.tensor(rng.permutation(7))
            permuted = enhance_regions(regions[:, perm], v_glo)
            assert torch.allclose(permuted, base[:, perm], atol=1e-12)

    def test_weights_sum_one(self):
        regions = torch.randn(4, 9, 3)
        _, w = enhance_regions(regions, torch.randn(4, 3), return_weights=True)
        assert torch.allclose(w.sum(dim=1), torch.ones(4), atol=1e-6)

    def test_nonfinite_global_rejected(self):
        with pytest.raises(ValueError):
            enhance_regions(torch.randn(1, 3, 4),
                            torch.tensor([[1.0, float("nan"), 0.0, 0.0]]))


class TestProjection:
    def test_identity_passthrough(self):
        enc = ImageEncoder(4, 4, enhancement="none", n_max=8).double()
        with torch.no_grad():
            enc.fc.weight.copy_(torch.eye(4, dtype=torch.float64))
            enc.fc.bias.zero_()
        x = torch.randn(1, 3, 4, dtype=torch.float64)
        assert torch.allclose(enc.fc(x), x)

    def test_bias_only(self):
        enc = ImageEncoder(4, 6, enhancement="none", n_max=8).double()
        with torch.no_grad():
            enc.fc.weight.zero_()
            enc.fc.bias.copy_(torch.arange(6, dtype=torch.float64))
        out = enc.fc(torch.randn(1, 5, 4, dtype=torch.float64))
        assert torch.allclose(out, torch.arange(6, dtype=torch.float64).expand(1, 5, 6))

    def test_matches_affine_oracle(self):
        enc = ImageEncoder(5, 3, enhancement="none", n_max=8).double()
        _randomize(enc.fc, 1)
        x = torch.randn(7, 5, dtype=torch.float64)
        got = enc.fc(x).detach().numpy()
        expected = oracles.affine_rows(x.numpy(),
                                       enc.fc.weight.detach().numpy(),
                                       enc.fc.bias.detach().numpy())
        np.testing.assert_allclose(got, expected, atol=1e-10)


class TestImageEncoder:
    def test_modes_are_exclusive_and_shaped(self):
        x = torch.randn(2, 4, 6)
        clip = torch.randn(2, 3)
        sge = ImageEncoder(6, 5, enhancement="sge", pool_d_t=4, pool_hidden=6,
                           n_max=4)
        cge = ImageEncoder(6, 5, enhancement="cge", clip_dim=3, pool_d_t=4,
                           pool_hidden=6, n_max=4)
        plain = ImageEncoder(6, 5, enhancement="none", pool_d_t=4, pool_hidden=6,
                             n_max=4)
        assert sge(x).shape == (2, 5)
        assert cge(x, clip).shape == (2, 5)
        assert plain(x).shape == (2, 5)
        assert not hasattr(sge, "cge")
        assert not hasattr(cge, "sge")

    def test_cge_requires_clip_feature(self):
        enc = ImageEncoder(6, 5, enhancement="cge", clip_dim=3, pool_d_t=4,
                           pool_hidden=6, n_max=4)
        with pytest.raises(ValueError, match="clip"):
            enc(torch.randn(2, 4, 6))
        with pytest.raises(ValueError, match="clip_dim"):
            ImageEncoder(6, 5, enhancement="cge")

    def test_unknown_enhancement_rejected(self):
        with pytest.raises(ValueError):
            ImageEncoder(6, 5, enhancement="both")

    @pytest.mark.parametrize("enhancement", ["none", "sge", "cge"])
    def test_parameter_gradients_match_finite_differences(self, enhancement):
        torch.manual_seed(10)
        enc = ImageEncoder(5, 4, enhancement=enhancement, clip_dim=3,
                           pool_d_t=3, pool_hidden=4, n_max=4).double()
        enc.train()
        regions = torch.randn(3, 4, 5, dtype=torch.float64)
        clip = torch.randn(3, 3, dtype=torch.float64)
        probe = torch.randn(3, 4, dtype=torch.float64)

        def scalar():
            out = enc(regions, clip) if enhancement == "cge" else enc(regions)
            return (out * probe).sum()

        enc.zero_grad()
        scalar().backward()
        for name, p in enc.named_parameters():
            analytic = np.zeros(p.shape) if p.grad is None else p.grad.numpy().copy()

            def fn(values, p=p):
                with torch.no_grad():
                    backup = p.clone()
                    p.copy_(values)
                out = scalar()
                with torch.no_grad():
                    p.copy_(backup)
                return out

            numeric = oracles.central_difference_grad(fn, p.detach().clone())
            err = oracles.max_relative_error(analytic, numeric)
            assert err <= 1e-4, f"{enhancement}/{name}: rel err {err}"
