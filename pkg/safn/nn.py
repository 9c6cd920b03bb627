"""Differentiable float64 building blocks with explicit backward passes.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes that cache and the upstream gradient, accumulates parameter gradients
in place into ``grads`` (views into a flat gradient vector) and returns the
gradient with respect to its inputs. Leading dimensions are batch
dimensions throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, MutableMapping

import numpy as np
from scipy.special import erf, expit

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

Params = Mapping[str, np.ndarray]
Grads = MutableMapping[str, np.ndarray]


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def linear_backward(
    x: np.ndarray,
    w: np.ndarray,
    dy: np.ndarray,
    dw: np.ndarray,
    db: np.ndarray,
) -> np.ndarray:
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw += x2.T @ dy2
    db += dy2.sum(axis=0)
    return dy @ w.T


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return dy * (cdf + x * pdf)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0.0)


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = centered * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def layer_norm_backward(
    cache: tuple[np.ndarray, np.ndarray],
    gamma: np.ndarray,
    dy: np.ndarray,
    dgamma: np.ndarray,
    dbeta: np.ndarray,
) -> np.ndarray:
    xhat, inv_std = cache
    width = xhat.shape[-1]
    dgamma += (dy * xhat).reshape(-1, width).sum(axis=0)
    dbeta += dy.reshape(-1, width).sum(axis=0)
    dxhat = dy * gamma
    return inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def dropout_mask(rng: np.random.Generator | None, shape: tuple[int, ...], rate: float) -> np.ndarray | None:
    """Inverted-dropout mask, or None when dropout is inactive."""
    if rng is None or rate <= 0.0:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def apply_mask(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return x if mask is None else x * mask


# ============================================================================
# ATTENTION
# ============================================================================

@dataclass
class AttentionCache:
    xq: np.ndarray
    xkv: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray
    merged: np.ndarray


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, f, d = x.shape
    return x.reshape(b, f, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, f, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, f, h * dh)


def mha_forward(xq: np.ndarray, xkv: np.ndarray, p: Params, n_heads: int) -> tuple[np.ndarray, AttentionCache]:
    """Multi-head scaled dot-product attention; queries from xq, keys/values from xkv."""
    d_head = xq.shape[-1] // n_heads
    q = _split_heads(linear(xq, p["wq"], p["bq"]), n_heads)
    k = _split_heads(linear(xkv, p["wk"], p["bk"]), n_heads)
    v = _split_heads(linear(xkv, p["wv"], p["bv"]), n_heads)
    weights = softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(d_head))
    merged = _merge_heads(weights @ v)
    out = linear(merged, p["wo"], p["bo"])
    return out, AttentionCache(xq=xq, xkv=xkv, q=q, k=k, v=v, weights=weights, merged=merged)


def mha_backward(cache: AttentionCache, p: Params, g: Grads, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_heads = cache.q.shape[1]
    d_head = cache.q.shape[-1]
    dmerged = linear_backward(cache.merged, p["wo"], dout, g["wo"], g["bo"])
    dctx = _split_heads(dmerged, n_heads)
    dweights = dctx @ cache.v.transpose(0, 1, 3, 2)
    dv = cache.weights.transpose(0, 1, 3, 2) @ dctx
    dscores = softmax_backward(cache.weights, dweights) / math.sqrt(d_head)
    dq = dscores @ cache.k
    dk = dscores.transpose(0, 1, 3, 2) @ cache.q
    dxq = linear_backward(cache.xq, p["wq"], _merge_heads(dq), g["wq"], g["bq"])
    dxkv = linear_backward(cache.xkv, p["wk"], _merge_heads(dk), g["wk"], g["bk"])
    dxkv = dxkv + linear_backward(cache.xkv, p["wv"], _merge_heads(dv), g["wv"], g["bv"])
    return dxq, dxkv


# ============================================================================
# TRANSFORMER BLOCK (post-norm: attention, residual, LN; FFN, residual, LN)
# ============================================================================

@dataclass
class BlockCache:
    attn: AttentionCache
    attn_mask: np.ndarray | None
    ln1: tuple[np.ndarray, np.ndarray]
    h1: np.ndarray
    u: np.ndarray
    act_mask: np.ndarray | None
    a_dropped: np.ndarray
    ffn_mask: np.ndarray | None
    ln2: tuple[np.ndarray, np.ndarray]
    self_attention: bool


def _sub(p: Mapping[str, Any], prefix: str) -> dict[str, Any]:
    return {name[len(prefix):]: arr for name, arr in p.items() if name.startswith(prefix)}


def block_forward(
    xq: np.ndarray,
    xkv: np.ndarray | None,
    p: Params,
    n_heads: int,
    rate: float,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, BlockCache]:
    """Self-attention block when xkv is None, cross-attention block otherwise."""
    self_attention = xkv is None
    attn_out, attn_cache = mha_forward(xq, xq if self_attention else xkv, _sub(p, "attn."), n_heads)
    attn_mask = dropout_mask(rng, attn_out.shape, rate)
    h1, ln1 = layer_norm(xq + apply_mask(attn_out, attn_mask), p["ln1.g"], p["ln1.b"])

    u = linear(h1, p["ffn.w1"], p["ffn.b1"])
    act_mask = dropout_mask(rng, u.shape, rate)
    a_dropped = apply_mask(gelu(u), act_mask)
    ffn_out = linear(a_dropped, p["ffn.w2"], p["ffn.b2"])
    ffn_mask = dropout_mask(rng, ffn_out.shape, rate)
    out, ln2 = layer_norm(h1 + apply_mask(ffn_out, ffn_mask), p["ln2.g"], p["ln2.b"])

    return out, BlockCache(
        attn=attn_cache,
        attn_mask=attn_mask,
        ln1=ln1,
        h1=h1,
        u=u,
        act_mask=act_mask,
        a_dropped=a_dropped,
        ffn_mask=ffn_mask,
        ln2=ln2,
        self_attention=self_attention,
    )


def block_backward(cache: BlockCache, p: Params, g: Grads, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns (d_queries, d_keyvals); d_keyvals is None for self-attention (folded into d_queries)."""
    dres2 = layer_norm_backward(cache.ln2, p["ln2.g"], dout, g["ln2.g"], g["ln2.b"])
    dffn = apply_mask(dres2, cache.ffn_mask)
    da = linear_backward(cache.a_dropped, p["ffn.w2"], dffn, g["ffn.w2"], g["ffn.b2"])
    du = gelu_backward(cache.u, apply_mask(da, cache.act_mask))
    dh1 = dres2 + linear_backward(cache.h1, p["ffn.w1"], du, g["ffn.w1"], g["ffn.b1"])

    dres1 = layer_norm_backward(cache.ln1, p["ln1.g"], dh1, g["ln1.g"], g["ln1.b"])
    dattn = apply_mask(dres1, cache.attn_mask)
    dxq, dxkv = mha_backward(cache.attn, _sub(p, "attn."), _sub(g, "attn."), dattn)
    if cache.self_attention:
        return dres1 + dxq + dxkv, None
    return dres1 + dxq, dxkv


# ============================================================================
# POOLING, TOKENIZER, MLP
# ============================================================================

def pool_forward(seq: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax(seq . query / sqrt(D))-weighted sum of rows; returns (pooled, weights)."""
    weights = softmax(seq @ query / math.sqrt(seq.shape[-1]))
    return np.einsum("bf,bfd->bd", weights, seq), weights


def pool_backward(
    seq: np.ndarray,
    query: np.ndarray,
    weights: np.ndarray,
    dout: np.ndarray,
    dquery: np.ndarray,
) -> np.ndarray:
    scale = 1.0 / math.sqrt(seq.shape[-1])
    dweights = np.einsum("bd,bfd->bf", dout, seq)
    dscores = softmax_backward(weights, dweights) * scale
    dquery += np.einsum("bf,bfd->d", dscores, seq)
    return weights[..., None] * dout[:, None, :] + dscores[..., None] * query


def tokenize_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x[..., None] * w + b


def tokenize_backward(x: np.ndarray, w: np.ndarray, dtokens: np.ndarray, dw: np.ndarray, db: np.ndarray) -> np.ndarray:
    dw += np.einsum("bf,bfd->fd", x, dtokens)
    db += dtokens.sum(axis=0)
    return np.einsum("bfd,fd->bf", dtokens, w)


@dataclass
class MlpCache:
    x: np.ndarray
    u: np.ndarray
    mask: np.ndarray | None
    a_dropped: np.ndarray


def mlp_forward(
    x: np.ndarray,
    p: Params,
    rate: float,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, MlpCache]:
    """Two-layer GELU MLP: w2 . dropout(gelu(w1 . x + b1)) + b2."""
    u = linear(x, p["w1"], p["b1"])
    mask = dropout_mask(rng, u.shape, rate)
    a_dropped = apply_mask(gelu(u), mask)
    return linear(a_dropped, p["w2"], p["b2"]), MlpCache(x=x, u=u, mask=mask, a_dropped=a_dropped)


def mlp_backward(cache: MlpCache, p: Params, g: Grads, dout: np.ndarray) -> np.ndarray:
    da = linear_backward(cache.a_dropped, p["w2"], dout, g["w2"], g["b2"])
    du = gelu_backward(cache.u, apply_mask(da, cache.mask))
    return linear_backward(cache.x, p["w1"], du, g["w1"], g["b1"])
