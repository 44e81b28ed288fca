"""Straight-line numpy re-implementations used as independent references.

Nothing here imports the package's computation code; parameters are read
out of the torch modules as plain arrays and every step is spelled out
with explicit loops where that keeps the arithmetic obvious.
"""

import math

import numpy as np


def arr(t):
    return t.detach().cpu().numpy().astype(np.float64)


def softmax_rows(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        e = [math.exp(v - max(x[i])) for v in x[i]]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def layer_norm(x, gain, shift, eps=1e-8):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        mu = sum(x[i]) / len(x[i])
        var = sum((v - mu) ** 2 for v in x[i]) / len(x[i])
        out[i] = [(v - mu) / math.sqrt(var + eps) for v in x[i]]
    return out * gain + shift


def relu(x):
    return np.where(x > 0, x, 0.0)


def leaky(x, slope):
    return x if x >= 0 else slope * x


def mlp(x, fc1_w, fc1_b, fc2_w, fc2_b):
    return relu(x @ fc1_w + fc1_b) @ fc2_w + fc2_b


def attention(x, wq, wk, wv, wo, heads):
    """Returns (output, list of per-head coefficient matrices)."""
    n, d = x.shape
    hd = d // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    outs, coeffs = [], []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        logits = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                logits[i, j] = sum(q[i, sl][t] * k[j, sl][t] for t in range(hd)) / math.sqrt(hd)
        a = softmax_rows(logits)
        coeffs.append(a)
        outs.append(a @ v[:, sl])
    return np.concatenate(outs, axis=1) @ wo, coeffs


def conv_same(a, kernels):
    """a: n x n, kernels: c x 1 x k x k, zero padding (k-1)/2, stride 1."""
    c, _, k, _ = kernels.shape
    p = (k - 1) // 2
    n = a.shape[0]
    out = np.zeros((c, n, n))
    for ch in range(c):
        for i in range(n):
            for j in range(n):
                s = 0.0
                for di in range(k):
                    for dj in range(k):
                        ii, jj = i + di - p, j + dj - p
                        if 0 <= ii < n and 0 <= jj < n:
                            s += kernels[ch, 0, di, dj] * a[ii, jj]
                out[ch, i, j] = s
    return out


def avg_pool_same(x, k=3):
    """Mean over the in-bounds part of each k x k window."""
    c, h, w = x.shape
    p = k // 2
    out = np.zeros_like(x)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                vals = [
                    x[ch, ii, jj]
                    for ii in range(i - p, i + p + 1)
                    for jj in range(j - p, j + p + 1)
                    if 0 <= ii < h and 0 <= jj < w
                ]
                out[ch, i, j] = sum(vals) / len(vals)
    return out


def attn_params(attn):
    return arr(attn.wq.weight), arr(attn.wk.weight), arr(attn.wv.weight), arr(attn.wo.weight), attn.heads


def ff_params(ff):
    return arr(ff.fc1.weight), arr(ff.fc1.bias), arr(ff.fc2.weight), arr(ff.fc2.bias)


def region_sa(x, layer):
    """Returns (C, A_sv, A_prime) for a RegionSALayer."""
    c_v, coeffs = attention(x, *attn_params(layer.attn))
    a_sv = sum(coeffs) / len(coeffs)
    a_prime = avg_pool_same(conv_same(a_sv, arr(layer.conv)))
    weighted = np.zeros_like(a_prime)
    for ch in range(a_prime.shape[0]):
        weighted[ch] = a_prime[ch] * softmax_rows(a_prime[ch])
    avg = weighted.mean(axis=0)
    c_a = mlp(avg, *ff_params(layer.corr_mlp))
    return c_v + c_a, a_sv, a_prime


def encoder_block(x, update, layer):
    mid = layer_norm(x + update, arr(layer.norm1.gain), arr(layer.norm1.shift))
    return layer_norm(mid + mlp(mid, *ff_params(layer.mlp)), arr(layer.norm2.gain), arr(layer.norm2.shift))


def region_sa_layer(x, layer):
    c, _, _ = region_sa(x, layer)
    return encoder_block(x, c, layer)


def plain_encoder_layer(x, layer):
    """Standard post-norm transformer encoder layer (no conv path)."""
    update, _ = attention(x, *attn_params(layer.attn))
    return encoder_block(x, update, layer)


def inter_afl(z, stack):
    """z: n x v x d."""
    for mem, out in zip(stack.memory, stack.readout):
        wm, bm = arr(mem.weight), arr(mem.bias)
        wr, br = arr(out.weight), arr(out.bias)
        n, v, _ = z.shape
        new = np.zeros((n, v, wr.shape[1]))
        for i in range(n):
            a = np.array([z[i, j] @ wm + bm for j in range(v)])  # v x d_m
            s = np.zeros_like(a)
            for t in range(a.shape[1]):
                col = [math.exp(a[j, t] - a[:, t].max()) for j in range(v)]
                tot = sum(col)
                for j in range(v):
                    s[j, t] = col[j] / tot
            for j in range(v):
                l1 = sum(abs(x) for x in s[j])
                new[i, j] = (s[j] / l1) @ wr + br
        z = new
    return z


def view_fusion(zs, w_f, a, slope):
    v = len(zs)
    n = zs[0].shape[0]
    dp = w_f.shape[0]
    scores = np.zeros(v)
    for j in range(v):
        tot = 0.0
        for i in range(n):
            for k in range(v):
                left = w_f @ zs[j][i]
                right = w_f @ zs[k][i]
                tot += leaky(float(a[:dp] @ left + a[dp:] @ right), slope)
        scores[j] = tot / n
    e = np.exp(scores - scores.max())
    alpha = e / e.sum()
    fused = sum(alpha[j] * zs[j] for j in range(v))
    return fused, alpha


def region_fusion(z, fusion):
    for layer in fusion.layers:
        z = plain_encoder_layer(z, layer)
    return z


def similarity_loss_bruteforce(x, h):
    n = x.shape[0]
    total = 0.0
    for i in range(n):
        for k in range(n):
            ni = max(math.sqrt(sum(t * t for t in x[i])), 1e-8)
            nk = max(math.sqrt(sum(t * t for t in x[k])), 1e-8)
            cos = sum(x[i][t] * x[k][t] for t in range(x.shape[1])) / (ni * nk)
            dot = sum(h[i][t] * h[k][t] for t in range(h.shape[1]))
            total += abs(cos - dot)
    return total / (n * n)


def mobility_loss_bruteforce(m, scores):
    n = m.shape[0]
    total = 0.0
    for i in range(n):
        for k in range(n):
            row = sum(m[i, l] for l in range(n))
            col = sum(m[l, k] for l in range(n))
            ps = m[i, k] / row if row > 0 else 0.0
            pd = m[i, k] / col if col > 0 else 0.0
            ps_hat = math.exp(scores[i, k]) / sum(math.exp(scores[i, l]) for l in range(n))
            pd_hat = math.exp(scores[i, k]) / sum(math.exp(scores[l, k]) for l in range(n))
            if ps > 0:
                total -= ps * math.log(ps_hat)
            if pd > 0:
                total -= pd * math.log(pd_hat)
    return total
