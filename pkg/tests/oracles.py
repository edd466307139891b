"""Slow, explicit reference computations used to check the vectorised code.

Everything here works on float64 numpy arrays or Python floats and walks the
math element by element; nothing is shared with the package internals.
"""
import math

import numpy as np
import torch


def np64(t):
    return t.detach().cpu().double().numpy()


def extract_patches(frame, p):
    """frame (C, H, W) -> list of flattened patches in row-major grid order, pixel order (row, col, chan)."""
    c, h, w = frame.shape
    out = []
    for gr in range(h // p):
        for gc in range(w // p):
            vals = []
            for r in range(p):
                for q in range(p):
                    for ch in range(c):
                        vals.append(frame[ch, gr * p + r, gc * p + q])
            out.append(vals)
    return np.array(out, dtype=np.float64)


def sincos_2d(dim, rows, cols):
    quarter = dim // 4
    table = np.zeros((rows * cols, dim))
    for r in range(rows):
        for c in range(cols):
            for i in range(quarter):
                om = 1.0 / 10000 ** (i / quarter)
                table[r * cols + c, i] = math.sin(r * om)
                table[r * cols + c, quarter + i] = math.cos(r * om)
                table[r * cols + c, 2 * quarter + i] = math.sin(c * om)
                table[r * cols + c, 3 * quarter + i] = math.cos(c * om)
    return table


def layer_norm(x, g, b, eps):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = (row - mu) / math.sqrt(var + eps) * g + b
    return out


def softmax_row(row):
    mx = max(row)
    e = [math.exp(v - mx) for v in row]
    s = sum(e)
    return np.array([v / s for v in e])


def gelu(x):
    return np.vectorize(lambda v: 0.5 * v * (1 + math.erf(v / math.sqrt(2))))(x)


def linear(x, w, b=None):
    out = np.zeros((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[i, o] = sum(x[i, k] * w[o, k] for k in range(w.shape[1])) + (b[o] if b is not None else 0.0)
    return out


def vit_block(x, P, prefix, heads):
    """Pre-norm block. P maps state-dict names to float64 arrays."""
    L, d = x.shape
    hd = d // heads
    h = layer_norm(x, P[prefix + "norm1.weight"], P[prefix + "norm1.bias"], 1e-6)
    qkv = linear(h, P[prefix + "attn.qkv.weight"], P[prefix + "attn.qkv.bias"])
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    att = np.zeros((L, d))
    for hh in range(heads):
        sl = slice(hh * hd, (hh + 1) * hd)
        for i in range(L):
            logits = [sum(q[i, sl] * k[j, sl]) / math.sqrt(hd) for j in range(L)]
            w = softmax_row(logits)
            att[i, sl] = sum(w[j] * v[j, sl] for j in range(L))
    x = x + linear(att, P[prefix + "attn.proj.weight"], P[prefix + "attn.proj.bias"])
    h = layer_norm(x, P[prefix + "norm2.weight"], P[prefix + "norm2.bias"], 1e-6)
    h = gelu(linear(h, P[prefix + "mlp.fc1.weight"], P[prefix + "mlp.fc1.bias"]))
    return x + linear(h, P[prefix + "mlp.fc2.weight"], P[prefix + "mlp.fc2.bias"])


def state64(module):
    return {k: np64(v) for k, v in module.state_dict().items()}


def mae_encode_frame(frame, P, cfg):
    """Depth-1-or-more encoder on one frame, all patches visible."""
    patches = extract_patches(frame, cfg.patch_size)
    x = linear(patches, P["patch_embed.weight"], P["patch_embed.bias"])
    x = x + sincos_2d(cfg.embed_dim, *cfg.grid)
    for layer in range(cfg.encoder_depth):
        x = vit_block(x, P, f"blocks.{layer}.", cfg.num_heads)
    return layer_norm(x, P["norm.weight"], P["norm.bias"], 1e-6)


def mae_decode_frame(latent, visible, masked, P, cfg):
    """latent (len(visible), d) -> reconstructions of the masked patches."""
    m = cfg.num_patches
    x = linear(latent, P["decoder_embed.weight"], P["decoder_embed.bias"])
    full = np.tile(P["mask_token"].reshape(1, -1), (m, 1))
    for row, idx in zip(x, visible):
        full[idx] = row
    full = full + sincos_2d(cfg.decoder_embed_dim, *cfg.grid)
    for layer in range(cfg.decoder_depth):
        full = vit_block(full, P, f"decoder_blocks.{layer}.", cfg.decoder_num_heads)
    full = layer_norm(full, P["decoder_norm.weight"], P["decoder_norm.bias"], 1e-6)
    pred = linear(full, P["decoder_pred.weight"], P["decoder_pred.bias"])
    return pred[list(masked)]


def afg(tokens, weight, bias):
    """tokens (T, m, d), weight (N, d, d) -> (N, T, d): FC on every token, then average."""
    T, m, d = tokens.shape
    N = weight.shape[0]
    out = np.zeros((N, T, d))
    for i in range(N):
        for t in range(T):
            U = linear(tokens[t], weight[i], bias[i])
            out[i, t] = U.sum(0) / m
    return out


def knn_bruteforce(feats, k):
    """feats (N, d) as nested lists -> set of directed edges (i, j)."""
    n = len(feats)
    edges = set()
    for i in range(n):
        sims = [(-math.fsum(a * b for a, b in zip(feats[i], feats[j])), j) for j in range(n) if j != i]
        for _, j in sorted(sims)[:k]:
            edges.add((i, j))
    return edges


def gcn_loop(nodes, adj, w_r, w_g, k):
    """nodes (N, T, d), adj (T, N, N) -> updated nodes via explicit (t, i, j) loops."""
    N, T, d = nodes.shape
    out = np.zeros_like(nodes)
    for t in range(T):
        for i in range(N):
            agg = np.zeros(d)
            for j in range(N):
                if adj[t, i, j]:
                    agg += w_r @ nodes[j, t]
            out[i, t] = np.maximum(nodes[i, t] + w_g @ (agg / k), 0.0)
    return out


def temporal_layer(V, P, heads=1, valid=None, pos=None):
    """One AU sequence V (T, d) through attention + post-norm FFN residual."""
    T, d = V.shape
    hd = d // heads
    x = V + pos[:T] if pos is not None else V
    q, k, v = x @ P["w_q.weight"].T, x @ P["w_k.weight"].T, x @ P["w_v.weight"].T
    att = np.zeros((T, d))
    for hh in range(heads):
        sl = slice(hh * hd, (hh + 1) * hd)
        for i in range(T):
            logits = [sum(q[i, sl] * k[j, sl]) / math.sqrt(hd) if valid is None or valid[j] else -np.inf
                      for j in range(T)]
            w = softmax_row(logits)
            att[i, sl] = sum(w[j] * v[j, sl] for j in range(T))
    z = x + att @ P["w_o.weight"].T
    h = layer_norm(z, P["norm.weight"], P["norm.bias"], 1e-5)
    h = np.maximum(h @ P["ffn.0.weight"].T + P["ffn.0.bias"], 0)
    return z + h @ P["ffn.2.weight"].T + P["ffn.2.bias"]


def sc_score(v, s, eps=1e-8):
    a = [max(x, 0.0) for x in v]
    b = [max(x, 0.0) for x in s]
    num = math.fsum(x * y for x, y in zip(a, b))
    return num / (math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b)) + eps)


def f1_bruteforce(scores, labels, valid, threshold):
    """Per-AU F1 from explicit counting loops over (t, i)."""
    T, N = scores.shape
    f1 = []
    for i in range(N):
        tp = fp = fn = 0
        for t in range(T):
            if not valid[t] or labels[t, i] < 0:
                continue
            pred = scores[t, i] >= threshold
            if pred and labels[t, i] == 1:
                tp += 1
            elif pred:
                fp += 1
            elif labels[t, i] == 1:
                fn += 1
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return f1, sum(f1) / N


def finite_difference_check(loss_fn, params, h=1e-5, guard=None):
    """Central differences for every element of every parameter.

    Returns {name: relative error} with relative error
    ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||, 1e-10).
    ``guard`` is called after each perturbed evaluation and may raise.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: p.grad.detach().clone() for k, p in params.items()}
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            fd = torch.zeros_like(p)
            flat, gflat = p.view(-1), fd.view(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + h
                up = loss_fn().item()
                if guard:
                    guard()
                flat[idx] = orig - h
                down = loss_fn().item()
                if guard:
                    guard()
                flat[idx] = orig
                gflat[idx] = (up - down) / (2 * h)
            a = analytic[name]
            denom = max(a.norm().item(), fd.norm().item(), 1e-10)
            errors[name] = (a - fd).norm().item() / denom
    return errors
