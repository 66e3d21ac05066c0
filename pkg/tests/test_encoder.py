"""Encoder: block oracle, fuse/split mechanics, equivariances."""

import numpy as np
import pytest

from fuseclust import autodiff as ad
from fuseclust import encoder as enc

from oracles import central_diff, mfavbs_oracle, vit_block_oracle


def _block_to_dict(p):
    return {
        "ln1_g": p.ln1_g.data, "ln1_b": p.ln1_b.data,
        "wq": p.wq.data, "bq": p.bq.data,
        "wk": p.wk.data, "bk": p.bk.data,
        "wv": p.wv.data, "bv": p.bv.data,
        "wo": p.wo.data, "bo": p.bo.data,
        "ln2_g": p.ln2_g.data, "ln2_b": p.ln2_b.data,
        "w1": p.w1.data, "b1": p.b1.data,
        "w2": p.w2.data, "b2": p.b2.data,
    }


def _random_block(embed, heads, seed, dtype=np.float64, scale=0.2):
    p = enc.ViTBlockParams(embed, heads, seed=seed, tag=f"t{seed}", dtype=dtype)
    rng = np.random.default_rng(seed)
    for t in p.parameters():
        t.data[...] = (rng.normal(size=t.shape) * scale).astype(dtype)
    # keep LayerNorm gains near 1 so outputs stay in a generic regime
    p.ln1_g.data[...] += 1.0
    p.ln2_g.data[...] += 1.0
    return p


class TestViTBlock:
    def test_single_token_attention_is_one(self):
        p = enc.ViTBlockParams(8, 2, seed=0, tag="b")
        x = ad.constant(np.random.default_rng(0).normal(size=(3, 1, 8))
                        .astype(np.float32))
        _, attn = enc.vit_block_forward(x, p)
        np.testing.assert_allclose(attn.data, 1.0, atol=1e-7)

    def test_token_permutation_equivariance(self):
        p = enc.ViTBlockParams(16, 4, seed=1, tag="b")
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 7, 16)).astype(np.float32)
        perm = rng.permutation(7)
        out1, _ = enc.vit_block_forward(ad.constant(x), p)
        out2, _ = enc.vit_block_forward(ad.constant(x[:, perm]), p)
        assert np.max(np.abs(out1.data[:, perm] - out2.data)) <= 1e-5

    def test_straight_line_oracle(self):
        p = _random_block(16, 2, seed=11)
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 5, 16))
        out, attn = enc.vit_block_forward(ad.constant(x, dtype=np.float64), p)
        ref_out, ref_attn = vit_block_oracle(x, _block_to_dict(p), heads=2)
        assert np.max(np.abs(out.data - ref_out)) <= 1e-10
        assert np.max(np.abs(attn.data - ref_attn)) <= 1e-10

    def test_attention_rows_sum_to_one(self):
        for seed in range(5):
            p = _random_block(8, 2, seed=seed)
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(2, 6, 8))
            _, attn = enc.vit_block_forward(ad.constant(x, dtype=np.float64), p)
            np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-5)

    def test_embed_mismatch(self):
        p = enc.ViTBlockParams(8, 2, seed=0, tag="b")
        with pytest.raises(ad.ShapeError, match="embed"):
            enc.vit_block_forward(ad.constant(np.zeros((1, 3, 12),
                                                       dtype=np.float32)), p)

    def test_heads_must_divide_embed(self):
        with pytest.raises(ad.ShapeError, match="divisible"):
            enc.ViTBlockParams(10, 4, seed=0, tag="b")


class TestCatSplit:
    def test_roundtrip_bitwise_100_shapes(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            b = int(rng.integers(1, 5))
            t = int(rng.integers(1, 9))
            e = int(rng.integers(1, 17))
            a = ad.constant(rng.normal(size=(b, t, e)).astype(np.float32))
            bb = ad.constant(rng.normal(size=(b, t, e)).astype(np.float32))
            y = enc.cat_tokens(a, bb)
            ra, rb = enc.split_tokens(y)
            assert np.array_equal(ra.data, a.data)
            assert np.array_equal(rb.data, bb.data)

    def test_cat_layout(self):
        rng = np.random.default_rng(4)
        a = ad.constant(rng.normal(size=(2, 3, 4)))
        b = ad.constant(rng.normal(size=(2, 3, 4)))
        y = enc.cat_tokens(a, b)
        assert y.shape == (2, 6, 4)
        for _ in range(20):
            m = rng.integers(0, 2)
            j = rng.integers(0, 3)
            kk = rng.integers(0, 4)
            assert y.data[m, 3 + j, kk] == b.data[m, j, kk]
            assert y.data[m, j, kk] == a.data[m, j, kk]

    def test_cat_self_halves_identical(self):
        a = ad.constant(np.random.default_rng(5).normal(size=(1, 4, 3)))
        y = enc.cat_tokens(a, a)
        np.testing.assert_array_equal(y.data[:, :4], y.data[:, 4:])

    def test_split_zero_half(self):
        rng = np.random.default_rng(6)
        y = np.concatenate([np.zeros((2, 3, 4)), rng.normal(size=(2, 3, 4))],
                           axis=1)
        l, r = enc.split_tokens(ad.constant(y))
        np.testing.assert_array_equal(l.data, 0.0)

    def test_split_odd_rejected(self):
        with pytest.raises(ad.ShapeError, match="odd"):
            enc.split_tokens(ad.constant(np.zeros((1, 5, 2))))

    def test_cat_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError, match="mismatch"):
            enc.cat_tokens(ad.constant(np.zeros((1, 3, 2))),
                           ad.constant(np.zeros((1, 4, 2))))

    def test_split_grad_routes_to_halves(self):
        rng = np.random.default_rng(7)
        y = ad.parameter(rng.normal(size=(1, 4, 2)), name="y", dtype=np.float64)
        wl = rng.normal(size=(1, 2, 2))
        with ad.Tape() as tape:
            l, r = enc.split_tokens(y)
            loss = ad.add(ad.mul(l, ad.constant(wl, dtype=np.float64)).sum(),
                          ad.mul(r, r).sum())
        tape.backward(loss)

        def f(vec):
            m = vec.reshape(1, 4, 2)
            return float((m[:, :2] * wl).sum() + (m[:, 2:] ** 2).sum())

        fd = central_diff(f, y.data.reshape(-1).copy())
        np.testing.assert_allclose(y.grad.reshape(-1), fd, atol=1e-8)


class TestExtractSummary:
    def test_without_fusion_takes_token_zero(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 5, 4))
        out = enc.extract_summary(ad.constant(x), clip_fusion_enabled=False)
        np.testing.assert_array_equal(out.data, x[:, 0])

    def test_with_fusion_takes_token_one(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 5, 4))
        out = enc.extract_summary(ad.constant(x), clip_fusion_enabled=True)
        np.testing.assert_array_equal(out.data, x[:, 1])

    def test_too_few_tokens(self):
        with pytest.raises(ad.ShapeError, match="tokens"):
            enc.extract_summary(ad.constant(np.zeros((2, 1, 4))),
                                clip_fusion_enabled=True)


def _random_encoder(embed, heads, stages, seed, dtype=np.float64):
    p = enc.MFAVBsParams(embed, heads, stages, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    for t in p.parameters():
        t.data[...] = (rng.normal(size=t.shape) * 0.15).astype(dtype)
    for blk in p.shared + p.fused:
        blk.ln1_g.data[...] += 1.0
        blk.ln2_g.data[...] += 1.0
    p.final_g.data[...] += 1.0
    return p


class TestMFAVBs:
    def test_n0_passthrough_is_final_ln_of_summary(self):
        p = _random_encoder(8, 2, 0, seed=10)
        rng = np.random.default_rng(10)
        ya = rng.normal(size=(2, 4, 8))
        yb = rng.normal(size=(2, 4, 8))
        ha, hb, attn = enc.mfavbs_forward(ad.constant(ya, dtype=np.float64),
                                          ad.constant(yb, dtype=np.float64), p)
        ref = ad.layer_norm(ad.constant(ya, dtype=np.float64),
                            p.final_g, p.final_b).data[:, 0]
        np.testing.assert_allclose(ha.data, ref, atol=1e-12)
        assert attn == []

    def test_branch_swap_equivariance(self):
        p32 = enc.MFAVBsParams(16, 4, 2, seed=12, dtype=np.float32)
        rng = np.random.default_rng(12)
        ya = ad.constant(rng.normal(size=(2, 6, 16)).astype(np.float32))
        yb = ad.constant(rng.normal(size=(2, 6, 16)).astype(np.float32))
        ha, hb, _ = enc.mfavbs_forward(ya, yb, p32)
        hb2, ha2, _ = enc.mfavbs_forward(yb, ya, p32)
        assert np.max(np.abs(ha.data - ha2.data)) <= 1e-5
        assert np.max(np.abs(hb.data - hb2.data)) <= 1e-5

    def test_straight_line_oracle(self):
        p = _random_encoder(16, 2, 2, seed=13)
        rng = np.random.default_rng(13)
        ya = rng.normal(size=(2, 6, 16))
        yb = rng.normal(size=(2, 6, 16))
        ha, hb, _ = enc.mfavbs_forward(ad.constant(ya, dtype=np.float64),
                                       ad.constant(yb, dtype=np.float64), p)
        ra, rb = mfavbs_oracle(
            ya, yb,
            [_block_to_dict(b) for b in p.shared],
            [_block_to_dict(b) for b in p.fused],
            p.final_g.data, p.final_b.data, heads=2)
        assert np.max(np.abs(ha.data - ra)) <= 1e-9
        assert np.max(np.abs(hb.data - rb)) <= 1e-9

    def test_shared_block_is_one_parameter_object(self):
        p = enc.MFAVBsParams(8, 2, 3, seed=14)
        names = [t.name for t in p.parameters()]
        assert len(names) == len(set(names))
        # perturbing a shared block moves both branches
        rng = np.random.default_rng(14)
        ya = ad.constant(rng.normal(size=(1, 4, 8)).astype(np.float32))
        yb = ad.constant(rng.normal(size=(1, 4, 8)).astype(np.float32))
        ha1, hb1, _ = enc.mfavbs_forward(ya, yb, p)
        p.shared[0].wq.data[0, 0] += 0.5
        ha2, hb2, _ = enc.mfavbs_forward(ya, yb, p)
        assert np.max(np.abs(ha1.data - ha2.data)) > 0
        assert np.max(np.abs(hb1.data - hb2.data)) > 0

    def test_identity_fused_blocks_reduce_to_branch_only(self):
        embed, heads, stages = 8, 2, 2
        p = _random_encoder(embed, heads, stages, seed=15)
        for i in range(stages):
            p.fused[i] = enc.make_identity_fused_block(
                embed, heads, seed=200 + i, tag=f"id{i}", dtype=np.float64)
        rng = np.random.default_rng(15)
        ya = rng.normal(size=(2, 4, embed))
        yb = rng.normal(size=(2, 4, embed))
        ha, hb, _ = enc.mfavbs_forward(ad.constant(ya, dtype=np.float64),
                                       ad.constant(yb, dtype=np.float64), p)
        # reference: only the shared branch blocks, no fusion at all
        a = ad.constant(ya, dtype=np.float64)
        b = ad.constant(yb, dtype=np.float64)
        for i in range(stages):
            a, _ = enc.vit_block_forward(a, p.shared[i])
            b, _ = enc.vit_block_forward(b, p.shared[i])
        ra = ad.layer_norm(a, p.final_g, p.final_b).data[:, 0]
        rb = ad.layer_norm(b, p.final_g, p.final_b).data[:, 0]
        np.testing.assert_allclose(ha.data, ra, atol=1e-12)
        np.testing.assert_allclose(hb.data, rb, atol=1e-12)

    def test_output_shape_contract(self):
        for t, n in [(3, 1), (6, 2), (2, 3)]:
            p = enc.MFAVBsParams(8, 2, n, seed=16)
            ya = ad.constant(np.zeros((2, t, 8), dtype=np.float32))
            yb = ad.constant(np.zeros((2, t, 8), dtype=np.float32))
            ha, hb, _ = enc.mfavbs_forward(ya, yb, p)
            assert ha.shape == (2, 8) and hb.shape == (2, 8)

    def test_attention_collection_count_and_layer_tags(self):
        p = enc.MFAVBsParams(8, 2, 2, seed=17)
        rng = np.random.default_rng(17)
        ya = ad.constant(rng.normal(size=(1, 3, 8)).astype(np.float32))
        yb = ad.constant(rng.normal(size=(1, 3, 8)).astype(np.float32))
        _, _, attn = enc.mfavbs_forward(ya, yb, p, collect_attn=True)
        names = [n for n, _ in attn]
        assert names == ["stage0.branch_a", "stage0.branch_b", "stage0.fused",
                         "stage1.branch_a", "stage1.branch_b", "stage1.fused"]
        for name, a in attn:
            t = 6 if name.endswith("fused") else 3
            assert a.shape == (1, 2, t, t)

    def test_error_carries_stage_index(self):
        p = enc.MFAVBsParams(8, 2, 2, seed=18)
        p.fused[1].wq.data[...] = np.inf
        rng = np.random.default_rng(18)
        ya = ad.constant(rng.normal(size=(1, 3, 8)).astype(np.float32))
        yb = ad.constant(rng.normal(size=(1, 3, 8)).astype(np.float32))
        with pytest.raises(ad.NumericError, match="stage 1"):
            with ad.Tape():
                enc.mfavbs_forward(ya, yb, p)
