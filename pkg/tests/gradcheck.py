"""Shared test helpers: scalar-loop attention oracle and finite differences."""

import math

import numpy as np
import torch


def attention_loop_oracle(h, text, wq, wk, wv):
    """Straight-line per-pixel, per-token reimplementation of the attention rule."""
    c, hh, ww = h.shape
    L = text.shape[0]
    d = wq.shape[1]
    dv = wv.shape[1]
    out = np.zeros((dv, hh, ww), dtype=np.float64)
    for i in range(hh):
        for j in range(ww):
            q = h[:, i, j] @ wq
            scores = np.array([float(q @ (text[l] @ wk)) for l in range(L)]) / math.sqrt(d)
            e = np.exp(scores - scores.max())
            w = e / e.sum()
            acc = np.zeros(dv, dtype=np.float64)
            for l in range(L):
                acc += w[l] * (text[l] @ wv)
            out[:, i, j] = acc
    return out


def central_difference_grads(loss_fn, params, eps=1e-5):
    """Numeric gradient of loss_fn() w.r.t. each tensor in params, entry by entry."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.data.view(-1)
        gflat = g.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + eps
            up = float(loss_fn().detach())
            flat[k] = orig - eps
            down = float(loss_fn().detach())
            flat[k] = orig
            gflat[k] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom
