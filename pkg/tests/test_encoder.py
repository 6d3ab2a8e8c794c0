import math

import numpy as np
import pytest
import torch

from conftest import tiny_config, tiny_input
from yieldmap.encoder import (
    Attention,
    Block,
    EncoderConfig,
    Embeddings,
    PatchEmbed,
    ViTEncoder,
)


def test_token_counts_224():
    cfg = EncoderConfig(img_size=224, patch_size=16, embed_dim=16, depth=4, num_heads=2,
                        tap_layers=(1, 2, 3, 4))
    assert cfg.grid == 14
    assert cfg.num_tokens == 980
    flat = EncoderConfig(img_size=224, embed_dim=16, depth=4, num_heads=2,
                         tap_layers=(1, 2, 3, 4), mode="FLATTENED_CHANNELS")
    assert flat.num_tokens == 196
    x = torch.zeros(1, 5, 6, 224, 224)
    assert PatchEmbed(cfg)(x).shape == (1, 980, 16)


def test_token_counts_96():
    assert EncoderConfig(img_size=96).grid ** 2 == 36


def test_token_index_bijection():
    cfg = EncoderConfig()
    idx = cfg.token_index()
    assert len({tuple(r) for r in idx}) == len(idx) == cfg.num_tokens
    assert tuple(idx[36]) == (1, 0, 0)


@pytest.mark.parametrize("kw", [
    dict(img_size=100),
    dict(embed_dim=130, num_heads=4),
    dict(tap_layers=(4, 2, 6, 8)),
    dict(tap_layers=(2, 4, 6, 9)),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        EncoderConfig(**kw)


def test_patch_divisibility():
    pe = PatchEmbed(EncoderConfig())
    with pytest.raises(ValueError, match="divisible"):
        pe(torch.zeros(1, 5, 6, 90, 90))


def test_zero_input_zero_bias():
    pe = PatchEmbed(EncoderConfig())
    torch.nn.init.zeros_(pe.proj.bias)
    assert torch.count_nonzero(pe(torch.zeros(2, 5, 6, 96, 96))) == 0


def test_per_frame_projection_shared():
    cfg = EncoderConfig(img_size=32, num_frames=3)
    pe = PatchEmbed(cfg)
    x = torch.randn(1, 3, 6, 32, 32)
    tok = pe(x)
    per = cfg.grid ** 2
    for t in range(3):
        single = pe.proj(x[:, t]).flatten(2).transpose(1, 2)
        torch.testing.assert_close(tok[:, t * per:(t + 1) * per], single)


def test_flattened_mode_channels():
    cfg = EncoderConfig(img_size=32, mode="FLATTENED_CHANNELS")
    pe = PatchEmbed(cfg)
    assert pe.proj.in_channels == 30
    assert pe(torch.zeros(2, 30, 32, 32)).shape == (2, 4, 128)


class TestEmbeddings:
    def test_zero_tables_identity(self):
        emb = Embeddings(EncoderConfig(img_size=32))
        x = torch.randn(2, 5 * 4, 128)
        torch.testing.assert_close(emb(x), x)

    def test_temporal_difference(self):
        cfg = EncoderConfig(img_size=32)
        emb = Embeddings(cfg)
        torch.nn.init.normal_(emb.pos)
        torch.nn.init.normal_(emb.temporal)
        x = torch.zeros(1, 20, 128)
        out = emb(x)
        # token 1 is (t=0, pos 1); token 4*3+1 is (t=3, pos 1)
        torch.testing.assert_close(out[0, 13] - out[0, 1], emb.temporal[3] - emb.temporal[0])

    def test_location_off_ignores_latlon(self):
        emb = Embeddings(EncoderConfig(img_size=32))
        x = torch.randn(1, 20, 128)
        a = emb(x, torch.tensor([[50.0, -100.0]]))
        b = emb(x, torch.tensor([[10.0, 20.0]]))
        torch.testing.assert_close(a, b)

    def test_location_on_adds_uniform_shift(self):
        emb = Embeddings(EncoderConfig(img_size=32, use_location=True))
        x = torch.randn(1, 20, 128)
        ll = torch.tensor([[50.0, -100.0]])
        shift = emb(x, ll) - emb(x, None)
        torch.testing.assert_close(shift, emb.location(ll)[:, None].expand(1, 20, 128))

    def test_table_mismatch(self):
        emb = Embeddings(EncoderConfig(img_size=32))
        with pytest.raises(ValueError):
            emb(torch.zeros(1, 7, 128))


class TestAttention:
    def test_zero_qk_uniform(self):
        att = Attention(8, 2)
        with torch.no_grad():
            att.qkv.weight[:16].zero_()
            att.qkv.bias[:16].zero_()
        x = torch.randn(1, 5, 8)
        out, a = att(x)
        torch.testing.assert_close(a, torch.full_like(a, 0.2))
        v = att.qkv(x)[..., 16:]
        torch.testing.assert_close(out, att.proj(v.mean(dim=1, keepdim=True)).expand(1, 5, 8))

    def test_rows_sum_to_one(self):
        att = Attention(16, 4)
        _, a = att(10 * torch.randn(3, 12, 16))
        assert (a >= 0).all()
        torch.testing.assert_close(a.sum(-1), torch.ones(3, 4, 12), atol=1e-6, rtol=0)

    def test_two_token_hand_computation(self):
        # single head, d=2, Q=K=V=identity projections, output projection identity
        att = Attention(2, 1).double()
        with torch.no_grad():
            att.qkv.weight.copy_(torch.cat([torch.eye(2)] * 3).double())
            att.qkv.bias.zero_()
            att.proj.weight.copy_(torch.eye(2))
            att.proj.bias.zero_()
        x = torch.tensor([[[1.0, 0.0], [1.0, 1.0]]], dtype=torch.float64)
        out, a = att(x)
        # scores: q1.k1=1, q1.k2=1 ; q2.k1=1, q2.k2=2 ; scaled by 1/sqrt(2)
        s = 1 / math.sqrt(2)
        p = math.exp(2 * s) / (math.exp(s) + math.exp(2 * s))
        expected_a = [[0.5, 0.5], [1 - p, p]]
        np.testing.assert_allclose(a[0, 0].detach().numpy(), expected_a, rtol=1e-12)
        expected_out = [[1.0, 0.5], [1.0, p]]
        np.testing.assert_allclose(out[0].detach().numpy(), expected_out, rtol=1e-12)


class TestBlock:
    def test_zero_weights_identity(self):
        blk = Block(8, 2, 4)
        with torch.no_grad():
            for p in blk.parameters():
                p.zero_()
        x = torch.randn(2, 6, 8)
        out, _ = blk(x)
        torch.testing.assert_close(out, x)

    def test_layernorm_constant_token(self):
        ln = Block(8, 2, 4).norm1
        with torch.no_grad():
            ln.weight.fill_(1.0)
            ln.bias.zero_()
        out = ln(torch.full((1, 1, 8), 3.7))
        torch.testing.assert_close(out, torch.zeros(1, 1, 8))

    def test_prenorm_structure(self):
        blk = Block(8, 2, 4)
        x = torch.randn(1, 4, 8)
        a, _ = blk.attn(blk.norm1(x))
        h = x + a
        expected = h + blk.mlp(blk.norm2(h))
        torch.testing.assert_close(blk(x)[0], expected)

    def test_gradient_matches_central_difference(self):
        torch.manual_seed(1)
        blk = Block(8, 2, 4).double()
        x = torch.randn(1, 5, 8, dtype=torch.float64)
        w = blk.attn.qkv.weight
        out, _ = blk(x)
        out.sum().backward()
        analytic = w.grad[3, 5].item()
        h = 1e-6
        with torch.no_grad():
            w[3, 5] += h
            fp = blk(x)[0].sum().item()
            w[3, 5] -= 2 * h
            fm = blk(x)[0].sum().item()
            w[3, 5] += h
        numeric = (fp - fm) / (2 * h)
        assert abs(analytic - numeric) <= 1e-3 * abs(numeric) + 1e-9


class TestEncode:
    def test_four_taps(self):
        torch.manual_seed(0)
        enc = ViTEncoder(EncoderConfig(img_size=32, embed_dim=16, num_heads=2))
        out = enc(torch.randn(1, 5, 6, 32, 32))
        assert len(out.features) == 4
        assert all(f.shape == (1, 20, 16) for f in out.features)
        assert out.attention == []

    def test_capture_does_not_change_outputs(self):
        torch.manual_seed(0)
        enc = ViTEncoder(EncoderConfig(img_size=32, embed_dim=16, num_heads=2))
        x = torch.randn(1, 5, 6, 32, 32)
        a = enc(x)
        b = enc(x, capture=True)
        assert len(b.attention) == 8
        assert [r.layer for r in b.attention] == list(range(1, 9))
        for fa, fb in zip(a.features, b.features):
            assert torch.equal(fa, fb)

    def test_repeated_calls_bitwise_equal(self, tiny_model):
        x = tiny_input(tiny_model.cfg)
        a = tiny_model.encoder(x)
        b = tiny_model.encoder(x)
        assert all(torch.equal(p, q) for p, q in zip(a.features, b.features))

    def test_zero_blocks_residual_identity(self):
        torch.manual_seed(0)
        enc = ViTEncoder(EncoderConfig(img_size=32, embed_dim=16, num_heads=2))
        with torch.no_grad():
            for p in enc.blocks.parameters():
                p.zero_()
        x = torch.randn(1, 5, 6, 32, 32)
        embedded = enc.embed(enc.patch_embed(x))
        for f in enc(x).features:
            torch.testing.assert_close(f, embedded)

    def test_permutation_equivariance(self):
        torch.manual_seed(0)
        cfg = tiny_config(frames=1).encoder
        enc = ViTEncoder(cfg).double()
        tokens = enc.patch_embed(tiny_input(tiny_config(frames=1), dtype=torch.float64))
        perm = torch.randperm(tokens.shape[1])
        pos = enc.embed.pos.detach().clone()

        def run(tok, table):
            x = tok + table
            for blk in enc.blocks:
                x, _ = blk(x)
            return x

        base = run(tokens, pos)
        permuted = run(tokens[:, perm], pos[perm])
        torch.testing.assert_close(permuted, base[:, perm])

    def test_init_conventions(self):
        torch.manual_seed(0)
        enc = ViTEncoder(EncoderConfig(img_size=32))
        assert torch.count_nonzero(enc.blocks[0].attn.qkv.bias) == 0
        assert torch.all(enc.blocks[0].norm1.weight == 1)
        w = enc.blocks[0].mlp.fc1.weight
        assert w.abs().max() <= 0.04 + 1e-7
        assert 0.01 < w.std().item() < 0.02
