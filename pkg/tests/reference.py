"""Loop-based float64 forward pass used as an oracle; shares no code with the package."""

import math

import numpy as np


def naive_forward(model, tokens):
    """Straight-loop float64 reference, independent of the tensor module."""
    cfg = model.config
    W = lambda t: t.data.astype(np.float64)

    def rms(x, g):
        return x / math.sqrt(sum(v * v for v in x) / len(x) + 1e-5) * g

    def rot(vec, pos, dh):
        out = np.zeros(dh)
        half = dh // 2
        for i in range(half):
            ang = pos / cfg.rope_theta ** (2 * i / dh)
            c, s = math.cos(ang), math.sin(ang)
            out[i] = vec[i] * c - vec[i + half] * s
            out[i + half] = vec[i + half] * c + vec[i] * s
        return out

    xs = [W(model.embedding)[t].copy() for t in tokens]
    n = len(tokens)
    for layer in model.layers:
        dh, h = layer.d_head, layer.n_heads
        normed = [rms(x, W(layer.norm_attn)) for x in xs]
        q = [v @ W(layer.wq) for v in normed]
        k = [v @ W(layer.wk) for v in normed]
        v_ = [v @ W(layer.wv) for v in normed]
        attn_out = []
        for i in range(n):
            merged = np.zeros(h * dh)
            for head in range(h):
                sl = slice(head * dh, (head + 1) * dh)
                qi = rot(q[i][sl], i, dh)
                scores = [float(qi @ rot(k[j][sl], j, dh)) / math.sqrt(dh) for j in range(i + 1)]
                top = max(scores)
                ws = [math.exp(s - top) for s in scores]
                z = sum(ws)
                for j in range(i + 1):
                    merged[sl] += ws[j] / z * v_[j][sl]
            attn_out.append(merged @ W(layer.wo))
        xs = [x + a for x, a in zip(xs, attn_out)]
        new = []
        for x in xs:
            u = rms(x, W(layer.norm_mlp))
            g, up = u @ W(layer.w_gate), u @ W(layer.w_up)
            act = np.array([gi / (1 + math.exp(-gi)) * ui for gi, ui in zip(g, up)])
            new.append(x + act @ W(layer.w_down))
        xs = new
    return np.stack([rms(x, W(model.final_norm)) @ W(model.lm_head) for x in xs])
