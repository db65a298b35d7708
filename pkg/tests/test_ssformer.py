import numpy as np
import pytest
import torch

from diffseg.ssformer import (
    FourierCrossAttention,
    NBPFilter,
    PatchEmbed,
    Spectrum,
    SSFormer,
    SSFormerBlock,
    TokenUnembed,
    fft2,
    filtered_attend,
    fourier_affinity,
    ifft2,
)

from oracles import dft2_direct, finite_difference_grad


def small_ssformer(n_blocks=2, enable_filter=True, channels=6, bottleneck=2, token_dim=6):
    return SSFormer(
        channels=channels,
        bottleneck=bottleneck,
        t_dim=8,
        n_blocks=n_blocks,
        patch_size=1,
        token_dim=token_dim,
        nbp_blocks=3,
        nbp_hidden=8,
        mlp_hidden=8,
        enable_filter=enable_filter,
    )


class TestPatchify:
    def test_single_token_case(self):
        pe = PatchEmbed(3, patch_size=4, token_dim=7)
        out = pe(torch.randn(3, 4, 4))
        assert out.shape == (1, 1, 7)

    def test_identity_projection_patch1(self):
        pe = PatchEmbed(5, patch_size=1, token_dim=5)
        with torch.no_grad():
            pe.proj.weight.copy_(torch.eye(5))
            pe.proj.bias.zero_()
        x = torch.randn(5, 3, 3)
        tokens = pe(x)
        assert torch.allclose(tokens, x.permute(1, 2, 0), atol=1e-7)

    def test_orthonormal_roundtrip(self):
        torch.manual_seed(0)
        c, p = 3, 2
        d = c * p * p
        pe = PatchEmbed(c, p, d)
        un = TokenUnembed(d, c, p)
        q = torch.empty(d, d)
        torch.nn.init.orthogonal_(q)
        with torch.no_grad():
            pe.proj.weight.copy_(q)
            pe.proj.bias.zero_()
            un.proj.weight.copy_(q.t())
            un.proj.bias.zero_()
        x = torch.randn(c, 8, 8)
        tokens = pe(x)
        assert tokens.shape == (4, 4, d)
        back = un(tokens)
        assert torch.allclose(back, x, atol=1e-5)

    def test_indivisible_rejected(self):
        pe = PatchEmbed(1, patch_size=3, token_dim=4)
        with pytest.raises(ValueError):
            pe(torch.randn(1, 8, 8))


class TestFFT:
    def test_constant_grid_dc_only(self):
        x = torch.full((4, 4, 3), 1.7)
        spec = fft2(x)
        mag = torch.hypot(spec.real, spec.imag)
        assert mag[0, 0].min() > 0
        off_dc = mag.clone()
        off_dc[0, 0] = 0
        assert off_dc.abs().max() < 1e-5

    def test_roundtrip_single_and_double(self):
        for dtype, tol in ((torch.float32, 1e-5), (torch.float64, 1e-10)):
            x = torch.randn(6, 6, 4, dtype=dtype)
            back = ifft2(fft2(x))
            assert (back - x).abs().max() < tol

    def test_parseval(self):
        x = torch.randn(8, 8, 2, dtype=torch.float64)
        spec = fft2(x)
        energy_t = (x**2).sum()
        energy_f = (spec.real**2 + spec.imag**2).sum() / (8 * 8)
        assert abs(float(energy_t - energy_f)) < 1e-5

    def test_matches_direct_dft(self):
        x = torch.randn(4, 4, 1, dtype=torch.float64)
        spec = fft2(x)
        direct = dft2_direct(x[..., 0].numpy())
        assert np.allclose(spec.real[..., 0].numpy(), direct.real, atol=1e-10)
        assert np.allclose(spec.imag[..., 0].numpy(), direct.imag, atol=1e-10)

    def test_untouched_spectrum_recovers_grid(self):
        x = torch.randn(4, 4, 2)
        spec = fft2(x)
        assert (ifft2(Spectrum(spec.real.clone(), spec.imag.clone())) - x).abs().max() < 1e-5


class TestFourierAffinity:
    def test_self_affinity_hermitian(self):
        torch.manual_seed(1)
        x = torch.randn(4, 4, 5)
        spec = fft2(x)
        eye = torch.eye(5)
        aff = fourier_affinity(spec, spec, eye, eye)
        assert torch.allclose(aff.real, aff.real.transpose(-2, -1), atol=1e-5)
        assert torch.allclose(aff.imag, -aff.imag.transpose(-2, -1), atol=1e-5)

    def test_zero_spectra(self):
        z = Spectrum(torch.zeros(2, 2, 3), torch.zeros(2, 2, 3))
        aff = fourier_affinity(z, z, torch.eye(3), torch.eye(3))
        assert aff.real.abs().max() == 0
        assert aff.imag.abs().max() == 0

    def test_two_token_hand_values(self):
        # q0 = 1+2i, q1 = 3-1i; k0 = -1+1i, k1 = 2+0.5i; identity weights, d=1
        q = Spectrum(torch.tensor([[[1.0], [3.0]]]), torch.tensor([[[2.0], [-1.0]]]))
        k = Spectrum(torch.tensor([[[-1.0], [2.0]]]), torch.tensor([[[1.0], [0.5]]]))
        eye = torch.eye(1)
        aff = fourier_affinity(q, k, eye, eye)
        expect_re = torch.tensor([[1.0, 3.0], [-4.0, 5.5]])
        expect_im = torch.tensor([[-3.0, 3.5], [-2.0, -3.5]])
        assert torch.allclose(aff.real, expect_re, atol=1e-6)
        assert torch.allclose(aff.imag, expect_im, atol=1e-6)

    def test_width_mismatch(self):
        a = Spectrum(torch.zeros(2, 2, 3), torch.zeros(2, 2, 3))
        b = Spectrum(torch.zeros(2, 2, 4), torch.zeros(2, 2, 4))
        with pytest.raises(ValueError):
            fourier_affinity(a, b, torch.eye(3), torch.eye(4))


class TestNBPFilter:
    def test_output_in_open_unit_interval(self):
        f = NBPFilter(lattice=16, t_dim=8)
        gate = f(torch.randn(3, 8))
        assert gate.shape == (3, 16, 16)
        assert (gate > 0).all() and (gate < 1).all()

    def test_timesteps_differ(self):
        f = NBPFilter(lattice=9, t_dim=8)
        g0 = f(torch.randn(8))
        g1 = f(torch.randn(8))
        assert (g0 - g1).abs().max() > 0

    def test_embedding_width_mismatch(self):
        f = NBPFilter(lattice=4, t_dim=8)
        with pytest.raises(ValueError):
            f(torch.randn(5))

    def test_degenerate_lattice_finite_difference(self):
        torch.manual_seed(2)
        f = NBPFilter(lattice=1, t_dim=6, hidden=8, n_blocks=2).double()
        t_embed = torch.randn(6, dtype=torch.float64)

        def loss_fn():
            return f(t_embed).sum()

        loss = loss_fn()
        loss.backward()
        for mlp in (f.blocks[0].scale_mlp, f.blocks[1].shift_mlp):
            weight = mlp[0].weight
            idx = torch.randperm(weight.numel())[:3].tolist()
            with torch.no_grad():
                fd = finite_difference_grad(loss_fn, weight.data, idx)
            flat = weight.grad.reshape(-1)
            for k, i in enumerate(idx):
                denom = max(abs(float(flat[i])), abs(fd[k]), 1e-8)
                assert abs(float(flat[i]) - fd[k]) / denom < 1e-4

    def test_smooth_over_lattice_at_init(self):
        torch.manual_seed(3)
        f = NBPFilter(lattice=16, t_dim=8)
        gate = f(torch.randn(8)).detach()
        lap = (
            gate[2:, 1:-1] + gate[:-2, 1:-1] + gate[1:-1, 2:] + gate[1:-1, :-2]
            - 4 * gate[1:-1, 1:-1]
        )
        assert lap.abs().max() <= 10.0 * gate.mean()


class TestFilteredAttend:
    def _zero_refine(self, d, hidden=4):
        refine = torch.nn.Sequential(torch.nn.Linear(d, hidden), torch.nn.SiLU(), torch.nn.Linear(hidden, d))
        with torch.no_grad():
            refine[2].weight.zero_()
            refine[2].bias.zero_()
        return refine

    def test_unit_gate_is_unfiltered(self):
        torch.manual_seed(4)
        aff = Spectrum(torch.randn(4, 4), torch.randn(4, 4))
        values = torch.randn(2, 2, 3)
        w_v = torch.randn(3, 3)
        out_gated = filtered_attend(aff, torch.ones(4, 4), values, w_v)
        # unfiltered reference computed directly
        weights = torch.fft.ifft2(torch.complex(aff.real, aff.imag), dim=(-2, -1)).real
        expect = (weights @ (values.reshape(4, 3) @ w_v)).reshape(2, 2, 3)
        assert torch.allclose(out_gated, expect, atol=1e-6)

    def test_zero_gate_blocks_attention(self):
        aff = Spectrum(torch.randn(4, 4), torch.randn(4, 4))
        values = torch.randn(2, 2, 3)
        refine = self._zero_refine(3)
        out = filtered_attend(aff, torch.zeros(4, 4), values, torch.eye(3), refine)
        assert out.abs().max() == 0

    def test_single_token_hand_arithmetic(self):
        aff = Spectrum(torch.tensor([[0.4]]), torch.tensor([[-0.3]]))
        gate = torch.tensor([[0.5]])
        values = torch.tensor([[[0.7, -1.2]]])
        refine = self._zero_refine(2)
        out = filtered_attend(aff, gate, values, torch.eye(2), refine)
        # M' = 0.2 - 0.15i; ifft of 1x1 is identity; real part 0.2
        assert torch.allclose(out, 0.2 * values, atol=1e-6)

    def test_gate_shape_mismatch(self):
        aff = Spectrum(torch.randn(4, 4), torch.randn(4, 4))
        with pytest.raises(ValueError):
            filtered_attend(aff, torch.ones(3, 3), torch.randn(2, 2, 3), torch.eye(3))


class TestSSFormerBlock:
    def test_shape_preserved(self):
        blk = SSFormerBlock(token_dim=6, lattice=4, t_dim=8, nbp_blocks=2, nbp_hidden=8, mlp_hidden=8)
        c = torch.randn(2, 2, 6)
        e = torch.randn(2, 2, 6)
        out = blk(c, e, torch.randn(8))
        assert out.shape == c.shape

    def test_zero_inputs_zero_biases(self):
        blk = SSFormerBlock(token_dim=6, lattice=4, t_dim=8, nbp_blocks=2, nbp_hidden=8, mlp_hidden=8)
        with torch.no_grad():
            for name, p in blk.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
        c = torch.zeros(2, 2, 6)
        e = torch.zeros(2, 2, 6)
        out = blk(c, e, torch.randn(8))
        assert out.abs().max() == 0

    def test_timestep_sensitivity(self):
        torch.manual_seed(5)
        blk = SSFormerBlock(token_dim=6, lattice=4, t_dim=8, nbp_blocks=2, nbp_hidden=8, mlp_hidden=8)
        c = torch.randn(2, 2, 6)
        e = torch.randn(2, 2, 6)
        t0 = torch.randn(8)
        t1 = torch.randn(8)
        assert (blk(c, e, t0) - blk(c, e, t1)).abs().max() > 0


class TestSSFormer:
    def test_single_block_chain_base_case(self):
        torch.manual_seed(6)
        model = small_ssformer(n_blocks=1)
        c_map = torch.randn(6, 2, 2)
        e_map = torch.randn(6, 2, 2)
        t_embed = torch.randn(8)
        out = model(c_map, e_map, t_embed)
        c_tokens = model.embed_cond(c_map)
        e_tokens = model.embed_noise(e_map)
        manual = model.unembed(model.blocks[0](c_tokens, e_tokens, t_embed))
        assert torch.allclose(out, manual, atol=1e-6)
        assert out.shape == (6, 2, 2)

    def test_structural_counts(self, monkeypatch):
        counts = {"attn": 0, "nbp": 0}
        orig_attn = FourierCrossAttention.forward
        orig_nbp = NBPFilter.forward

        def counting_attn(self, *a, **kw):
            counts["attn"] += 1
            return orig_attn(self, *a, **kw)

        def counting_nbp(self, *a, **kw):
            counts["nbp"] += 1
            return orig_nbp(self, *a, **kw)

        monkeypatch.setattr(FourierCrossAttention, "forward", counting_attn)
        monkeypatch.setattr(NBPFilter, "forward", counting_nbp)
        model = small_ssformer(n_blocks=4)
        model(torch.randn(6, 2, 2), torch.randn(6, 2, 2), torch.randn(8))
        assert counts["attn"] == 8
        assert counts["nbp"] == 8

    def test_gradient_reaches_everything(self):
        torch.manual_seed(7)
        model = small_ssformer(n_blocks=2)
        c_map = torch.randn(6, 2, 2, requires_grad=True)
        e_map = torch.randn(6, 2, 2, requires_grad=True)
        t_embed = torch.randn(8, requires_grad=True)
        out = model(c_map, e_map, t_embed)
        out.sum().backward()
        assert c_map.grad.abs().max() > 0
        assert e_map.grad.abs().max() > 0
        assert t_embed.grad.abs().max() > 0
        for name, p in model.named_parameters():
            assert p.grad is not None and p.grad.abs().max() > 0, f"dead parameter {name}"

    def test_filter_disabled_reduces_to_plain_attention(self):
        torch.manual_seed(8)
        model = small_ssformer(n_blocks=1, enable_filter=False)
        c_map = torch.randn(6, 2, 2)
        e_map = torch.randn(6, 2, 2)
        t_embed = torch.randn(8)
        out = model(c_map, e_map, t_embed)

        # plain Fourier cross-attention spelled out with the primitive ops
        from diffseg.ssformer import fft2 as _fft2

        c = model.embed_cond(c_map)
        e = model.embed_noise(e_map)
        blk = model.blocks[0]
        a1 = blk.mix_noise_into_cond
        aff1 = fourier_affinity(_fft2(c), _fft2(e), a1.w_q, a1.w_k)
        ones = torch.ones_like(aff1.real)
        c_mid = c + filtered_attend(aff1, ones, c, a1.w_v, a1.refine)
        a2 = blk.project_to_noise
        aff2 = fourier_affinity(_fft2(c_mid), _fft2(e), a2.w_q, a2.w_k)
        expect = model.unembed(c_mid + filtered_attend(aff2, ones, e, a2.w_v, a2.refine))
        assert torch.allclose(out, expect, atol=1e-6)

    def test_whole_module_finite_difference(self):
        torch.manual_seed(9)
        model = small_ssformer(n_blocks=2).double()
        c_map = torch.randn(6, 2, 2, dtype=torch.float64)
        e_map = torch.randn(6, 2, 2, dtype=torch.float64)
        t_embed = torch.randn(8, dtype=torch.float64)
        probe = torch.randn(6, 2, 2, dtype=torch.float64)

        def loss_fn():
            return (model(c_map, e_map, t_embed) * probe).sum()

        loss = loss_fn()
        loss.backward()
        params = [p for p in model.parameters() if p.grad is not None]
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 10:
            p = params[rng.integers(len(params))]
            i = int(rng.integers(p.numel()))
            with torch.no_grad():
                fd = finite_difference_grad(loss_fn, p.data, [i])[0]
            analytic = float(p.grad.reshape(-1)[i])
            denom = max(abs(analytic), abs(fd), 1e-8)
            assert abs(analytic - fd) / denom < 1e-4
            checked += 1

    def test_block_output_differs_across_extreme_timesteps(self):
        torch.manual_seed(10)
        model = small_ssformer(n_blocks=1)
        c_map = torch.randn(6, 2, 2)
        e_map = torch.randn(6, 2, 2)
        t0 = torch.randn(8)
        t_last = torch.randn(8)
        assert (model(c_map, e_map, t0) - model(c_map, e_map, t_last)).abs().max() > 0
