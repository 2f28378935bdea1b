"""Plain-numpy reference computations, written independently of the tape."""

import math

import numpy as np


def np_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def np_gelu(x):
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def np_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_rotate(x, angles):
    """Rotate consecutive pairs via complex multiplication."""
    z = x[..., 0::2] + 1j * x[..., 1::2]
    z = z * np.exp(1j * angles)
    out = np.empty_like(x)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def eff_weight(linear, adapter=None):
    w = linear.weight.data.astype(np.float64)
    if adapter is not None:
        w = w + adapter.scale * adapter.A.data @ adapter.B.data
    return w


def np_attention(xq, xkv, proj, heads, adapters=None, ang_q=None, ang_k=None):
    """Unfused multi-head attention on 2-D token matrices, one head at a time."""
    adapters = adapters or {}
    w = {p: eff_weight(proj[p], adapters.get(p)) for p in "qkvo"}
    b = {p: proj[p].bias.data for p in "qkvo"}
    q_all = xq @ w["q"] + b["q"]
    k_all = xkv @ w["k"] + b["k"]
    v_all = xkv @ w["v"] + b["v"]
    d = q_all.shape[1]
    hd = d // heads
    outs = []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        q, k, v = q_all[:, sl], k_all[:, sl], v_all[:, sl]
        if ang_q is not None:
            q = np_rotate(q, ang_q)
        if ang_k is not None:
            k = np_rotate(k, ang_k)
        logits = np.zeros((q.shape[0], k.shape[0]))
        for i in range(q.shape[0]):
            for j in range(k.shape[0]):
                logits[i, j] = q[i] @ k[j] / math.sqrt(hd)
        outs.append(np_softmax(logits) @ v)
    return np.concatenate(outs, axis=1) @ w["o"] + b["o"]


def np_local_block(tokens, block, adapters):
    h = np_layer_norm(tokens, block.ln1.gamma.data, block.ln1.beta.data)
    x = tokens + np_attention(h, h, block.attn, block.heads, adapters)
    h = np_layer_norm(x, block.ln2.gamma.data, block.ln2.beta.data)
    hidden = np_gelu(h @ block.fc1.weight.data + block.fc1.bias.data)
    return x + hidden @ block.fc2.weight.data + block.fc2.bias.data


def np_global_step(relay_flat, block, angles):
    ln = block.ln_global
    h = np_layer_norm(relay_flat, ln.gamma.data, ln.beta.data)
    return relay_flat + np_attention(
        h, h, block.attn, block.heads, getattr(block, "lora_global", None), angles, angles
    )
