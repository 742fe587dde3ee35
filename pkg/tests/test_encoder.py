import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from finealign.encoder import (
    DEFAULT_BUCKETS,
    EncoderConfig,
    ResolutionBuckets,
    encode_image_dense,
    encode_image_global,
    encode_text,
    init_params,
    load_checkpoint,
    params_digest,
    pool_map,
    save_checkpoint,
    select_resolution_bucket,
    text_forward,
)
from finealign.errors import EmptyPoolError, ShapeError, TooLongError, UnknownTokenError


def tiny(**kw):
    base = dict(dim=4, vocab_size=10, patch_dim=3, patch_size=64)
    base.update(kw)
    return EncoderConfig(**base)


def attention_oracle(x, w):
    """Token-by-token single-head attention with a residual connection."""
    n, d = x.shape
    out = np.empty_like(x)
    for i in range(n):
        q = x[i] @ w["wq"]
        logits = [float(q @ (x[j] @ w["wk"])) / math.sqrt(d) for j in range(n)]
        m = max(logits)
        e = [math.exp(l - m) for l in logits]
        z = sum(e)
        o = sum((e[j] / z) * (x[j] @ w["wv"]) for j in range(n))
        out[i] = x[i] + o @ w["wo"]
    return out


class TestImageEncoder:
    def test_zero_attention_gives_projection(self, rng):
        cfg = tiny(dim=3)
        p = init_params(cfg, 0)
        p["img.patch_proj"] = np.eye(3)
        for k in ("wq", "wk", "wv", "wo"):
            p[f"img.dense0.{k}"] = np.zeros((3, 3))
        img = rng.normal(size=(2, 2, 3))
        np.testing.assert_array_equal(encode_image_dense(img, p, cfg).features, img)

    def test_constant_patches(self, rng):
        cfg = EncoderConfig(dim=6, patch_dim=3)
        p = init_params(cfg, 1)
        img = np.broadcast_to(rng.normal(size=3), (8, 8, 3))
        f = encode_image_dense(img, p, cfg).features.reshape(64, 6)
        np.testing.assert_allclose(f, np.broadcast_to(f[0], f.shape), atol=1e-14)

    def test_two_by_two_oracle(self, rng):
        cfg = tiny()
        p = init_params(cfg, 2)
        img = rng.normal(size=(2, 2, 3))
        x0 = img.reshape(4, 3) @ p["img.patch_proj"]
        w = {k: p[f"img.dense0.{k}"] for k in ("wq", "wk", "wv", "wo")}
        got = encode_image_dense(img, p, cfg).features.reshape(4, 4)
        np.testing.assert_allclose(got, attention_oracle(x0, w), rtol=0, atol=1e-10)

    def test_patch_permutation_equivariance(self, rng):
        cfg = tiny()
        p = init_params(cfg, 3)
        img = rng.normal(size=(2, 2, 3))
        perm = np.array([2, 0, 3, 1])
        a = encode_image_dense(img, p, cfg).features.reshape(4, -1)
        b = encode_image_dense(img.reshape(4, 3)[perm].reshape(2, 2, 3), p, cfg).features.reshape(4, -1)
        np.testing.assert_allclose(b, a[perm], atol=1e-13)
        np.testing.assert_allclose(
            encode_image_global(img, p, cfg),
            encode_image_global(img.reshape(4, 3)[perm].reshape(2, 2, 3), p, cfg),
            atol=1e-13,
        )

    def test_grid_without_bucket(self, rng):
        cfg = EncoderConfig(dim=4, patch_dim=3)
        with pytest.raises(ShapeError):
            encode_image_dense(rng.normal(size=(5, 5, 3)), init_params(cfg), cfg)
        with pytest.raises(ShapeError):
            encode_image_dense(rng.normal(size=(8, 8, 2)), init_params(cfg), cfg)


class TestPoolMap:
    @pytest.fixture
    def head(self, rng):
        d = 5
        return {"query": rng.normal(size=d), **{k: rng.normal(size=(d, d)) for k in ("wq", "wk", "wv", "wo")}}

    def test_single_token(self, head, rng):
        t = rng.normal(size=(1, 5))
        np.testing.assert_allclose(pool_map(t, [True], head), t[0] @ head["wv"] @ head["wo"], atol=1e-13)

    def test_duplicate_tokens(self, head, rng):
        t = rng.normal(size=(1, 5))
        np.testing.assert_allclose(pool_map(np.vstack([t, t]), [True, True], head), pool_map(t, [True], head), atol=1e-13)

    def test_mask_by_deletion(self, head, rng):
        t = rng.normal(size=(4, 5))
        got = pool_map(t, [True, False, True, True], head)
        np.testing.assert_allclose(got, pool_map(t[[0, 2, 3]], [True] * 3, head), atol=1e-13)

    def test_all_masked(self, head, rng):
        with pytest.raises(EmptyPoolError):
            pool_map(rng.normal(size=(3, 5)), [False] * 3, head)


class TestTextEncoder:
    def test_too_long(self):
        cfg = tiny()
        with pytest.raises(TooLongError):
            encode_text([1] * 197, init_params(cfg), cfg)
        assert encode_text([1] * 196, init_params(cfg), cfg).shape == (4,)

    def test_unknown_token(self):
        cfg = tiny()
        with pytest.raises(UnknownTokenError):
            encode_text([1, 10], init_params(cfg), cfg)

    def test_single_token_is_pool_of_one(self):
        cfg = tiny()
        p = init_params(cfg, 4)
        tok = p["txt.tok_emb"][7] + p["txt.pos_emb"][0]
        np.testing.assert_allclose(encode_text([7], p, cfg), tok @ p["txt.map.wv"] @ p["txt.map.wo"], atol=1e-13)

    def test_padding_invariance(self):
        cfg = tiny()
        p = init_params(cfg, 5)
        padded, _ = text_forward(p, cfg, [[3, 1, 4], [1, 5, 9, 2, 6, 5, 3]], pad_to=40)
        np.testing.assert_allclose(padded[0], encode_text([3, 1, 4], p, cfg), atol=1e-14)


class TestBuckets:
    @pytest.mark.parametrize("side, want", [(576, 576), (64, 128), (300, 256), (2000, 1024)])
    def test_examples(self, side, want):
        assert select_resolution_bucket(side) == want

    @given(st.floats(1, 4000))
    def test_exhaustive_ratio_oracle(self, side):
        best = min(DEFAULT_BUCKETS, key=lambda b: (abs(math.log(b / side)), b))
        assert select_resolution_bucket(side) == best

    @given(st.floats(1, 4000), st.floats(1, 4000))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert select_resolution_bucket(lo) <= select_resolution_bucket(hi)

    def test_buckets_must_increase(self):
        with pytest.raises(ValueError):
            ResolutionBuckets((256, 128))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny()
        p = init_params(cfg, 6)
        save_checkpoint(tmp_path / "ck", p, {"encoder": cfg.to_dict()})
        q, meta = load_checkpoint(tmp_path / "ck")
        assert params_digest(p) == params_digest(q)
        assert {k: v.shape for k, v in q.items()} == {k: v.shape for k, v in p.items()}
        assert EncoderConfig.from_dict(meta["encoder"]) == cfg

    def test_rewrite_is_byte_identical(self, tmp_path):
        p = init_params(tiny(), 7)
        save_checkpoint(tmp_path / "a", p, {"x": 1})
        save_checkpoint(tmp_path / "b", p, {"x": 1})
        for name in ("manifest.json", "params.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
