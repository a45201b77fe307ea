"""Slow, obviously-correct reference implementations used only by the tests."""
import itertools
import math

import numpy as np


def randomize(module, rng, scale=0.5):
    """Overwrite every parameter with O(1) random values."""
    for _, p in module.named_parameters():
        fan = p.shape[0] if p.ndim == 2 else 1
        p.data = rng.normal(0.0, scale / math.sqrt(fan), p.shape)


def attention_tokens(x, attn):
    """Unmasked multi-head attention over one set of tokens (n, C), scalar loops.

    Relative position bias is ignored; callers disable it.
    """
    n, c = x.shape
    hd = c // attn.heads
    q = x @ attn.q.weight.data + attn.q.bias.data
    k = x @ attn.k.weight.data + attn.k.bias.data
    v = x @ attn.v.weight.data + attn.v.bias.data
    out = np.zeros((n, c))
    for h in range(attn.heads):
        cols = slice(h * hd, (h + 1) * hd)
        for i in range(n):
            logits = [sum(q[i, cols][d] * k[j, cols][d] for d in range(hd)) / math.sqrt(hd) for j in range(n)]
            m = max(logits)
            e = [math.exp(t - m) for t in logits]
            z = sum(e)
            for j in range(n):
                out[i, cols] += (e[j] / z) * v[j, cols]
    return out @ attn.proj.weight.data + attn.proj.bias.data


def shifted_bands(size, w, s):
    """Index bands of one axis after a cyclic shift by s: full windows, then the two wrapped pieces."""
    bands = [list(range(s + k * w, s + (k + 1) * w)) for k in range((size - w) // w)]
    bands.append(list(range(size - w + s, size)))
    bands.append(list(range(0, s)))
    return bands


def swmsa_groups(x, attn, w, s):
    """Shifted-window attention by explicit enumeration of spatial groups.

    Each group is a (row band, column band) pair; tokens attend only within
    their group. On an 8x8 grid with w=4, s=2 that gives 9 groups.
    """
    b, h, wd, c = x.shape
    out = np.zeros_like(x)
    for bi in range(b):
        for rows, cols in itertools.product(shifted_bands(h, w, s), shifted_bands(wd, w, s)):
            coords = [(r, q) for r in rows for q in cols]
            tokens = np.array([x[bi, r, q] for r, q in coords])
            res = attention_tokens(tokens, attn)
            for (r, q), val in zip(coords, res):
                out[bi, r, q] = val
    return out


def windowed_attention_with_bias(x, attn, w):
    """W-MSA with the relative position bias looked up by explicit (dy, dx) offsets."""
    b, h, wd, c = x.shape
    hd = c // attn.heads
    table = attn.rel_bias_table.data
    out = np.zeros_like(x)
    for bi in range(b):
        for r0 in range(0, h, w):
            for c0 in range(0, wd, w):
                coords = [(r0 + i, c0 + j) for i in range(w) for j in range(w)]
                t = np.array([x[bi, r, q] for r, q in coords])
                q_ = t @ attn.q.weight.data + attn.q.bias.data
                k_ = t @ attn.k.weight.data + attn.k.bias.data
                v_ = t @ attn.v.weight.data + attn.v.bias.data
                res = np.zeros((len(coords), c))
                for hh in range(attn.heads):
                    sl = slice(hh * hd, (hh + 1) * hd)
                    for i, (ri, ci) in enumerate(coords):
                        logits = np.array([
                            q_[i, sl] @ k_[j, sl] / math.sqrt(hd)
                            + table[(ri - rj + w - 1) * (2 * w - 1) + (ci - cj + w - 1), hh]
                            for j, (rj, cj) in enumerate(coords)
                        ])
                        p = np.exp(logits - logits.max())
                        res[i, sl] = (p / p.sum()) @ v_[:, sl]
                res = res @ attn.proj.weight.data + attn.proj.bias.data
                for (r, q), val in zip(coords, res):
                    out[bi, r, q] = val
    return out


def brute_directed(x, y):
    """Distance from every foreground pixel of x to the nearest foreground pixel of y, all pairs."""
    px = np.argwhere(x).astype(float)
    py = np.argwhere(y).astype(float)
    d = np.sqrt(((px[:, None, :] - py[None, :, :]) ** 2).sum(-1))
    return d.min(axis=1)


def brute_hd(x, y, mode):
    dxy, dyx = brute_directed(x, y), brute_directed(y, x)
    if mode == "paper_scaled":
        return 0.95 * max(dxy.max(), dyx.max())
    pooled = np.sort(np.concatenate([dxy, dyx]))
    # linear interpolation between order statistics at rank 0.95 * (n - 1)
    pos = 0.95 * (len(pooled) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(pooled) - 1)
    return pooled[lo] + (pos - lo) * (pooled[hi] - pooled[lo])


def brute_dsc(x, y):
    inter = sum(1 for a, b in zip(x.ravel(), y.ravel()) if a and b)
    total = int(x.sum()) + int(y.sum())
    return 1.0 if total == 0 else 2.0 * inter / total
