"""Independent, unoptimized re-implementation of both relevancy explainers.

Written as plain scalar loops on purpose: this is the oracle the production
(vectorized) path is checked against, so it shares no code with it.
"""

import numpy as np


def _loop_matmul(A, B):
    n, k = A.shape
    k2, m = B.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += A[i, t] * B[t, j]
            out[i, j] = acc
    return out


def _loop_head_average(attn, grad):
    heads, n, m = attn.shape
    out = np.zeros((n, m))
    for h in range(heads):
        for i in range(n):
            for j in range(m):
                v = float(attn[h, i, j]) * float(grad[h, i, j])
                if v > 0.0:
                    out[i, j] += v
    return out / heads


def _loop_residual_normalize(R):
    n = R.shape[0]
    out = np.zeros_like(R)
    for i in range(n):
        row_sum = 0.0
        for j in range(n):
            hat = R[i, j] - (1.0 if i == j else 0.0)
            row_sum += hat
        for j in range(n):
            hat = R[i, j] - (1.0 if i == j else 0.0)
            out[i, j] = hat / row_sum if row_sum != 0.0 else 0.0
        out[i, i] += 1.0
    return out


def reference_bmgae(trace, grads):
    num_cross = len(trace.attn_cross_tv)
    lang_only = len(trace.attn_lang) - num_cross
    vis_only = len(trace.attn_vis) - num_cross
    t_len = trace.attn_lang[0].shape[-1]
    if trace.attn_vis:
        i_len = trace.attn_vis[0].shape[-1]
    elif trace.attn_cross_tv:
        i_len = trace.attn_cross_tv[0].shape[-1]
    else:
        i_len = 0

    R_tt = np.eye(t_len)
    R_ii = np.eye(i_len)
    R_ti = np.zeros((t_len, i_len))
    R_it = np.zeros((i_len, t_len))

    for i in range(lang_only):
        A = _loop_head_average(trace.attn_lang[i], grads.grad_lang[i])
        R_tt = R_tt + _loop_matmul(A, R_tt)
        R_ti = R_ti + _loop_matmul(A, R_ti)
    for i in range(vis_only):
        A = _loop_head_average(trace.attn_vis[i], grads.grad_vis[i])
        R_ii = R_ii + _loop_matmul(A, R_ii)
        R_it = R_it + _loop_matmul(A, R_it)

    for k in range(num_cross):
        A_tv = _loop_head_average(trace.attn_cross_tv[k], grads.grad_cross_tv[k])
        A_vt = _loop_head_average(trace.attn_cross_vt[k], grads.grad_cross_vt[k])
        Rtt_n = _loop_residual_normalize(R_tt)
        Rii_n = _loop_residual_normalize(R_ii)
        d_ti = _loop_matmul(_loop_matmul(Rtt_n.T, A_tv), Rii_n)
        d_tt = _loop_matmul(A_tv, R_it)
        d_it = _loop_matmul(_loop_matmul(Rii_n.T, A_vt), Rtt_n)
        d_ii = _loop_matmul(A_vt, R_ti)
        R_ti = R_ti + d_ti
        R_tt = R_tt + d_tt
        R_it = R_it + d_it
        R_ii = R_ii + d_ii

        A = _loop_head_average(trace.attn_lang[lang_only + k], grads.grad_lang[lang_only + k])
        R_tt = R_tt + _loop_matmul(A, R_tt)
        R_ti = R_ti + _loop_matmul(A, R_ti)
        A = _loop_head_average(trace.attn_vis[vis_only + k], grads.grad_vis[vis_only + k])
        R_ii = R_ii + _loop_matmul(A, R_ii)
        R_it = R_it + _loop_matmul(A, R_it)

    return R_tt, R_ti, R_it, R_ii


def reference_trf(trace, grads):
    t_len = trace.attn_lang[0].shape[-1]
    R = np.eye(t_len)
    for attn, grad in zip(trace.attn_lang, grads.grad_lang):
        A = _loop_head_average(attn, grad)
        M = np.eye(t_len) + A
        for i in range(t_len):
            row_sum = 0.0
            for j in range(t_len):
                row_sum += M[i, j]
            for j in range(t_len):
                M[i, j] /= row_sum
        R = _loop_matmul(M, R)
    return R


def random_trace(rng, t_len=4, i_len=3, heads=2, lang=1, vis=1, cross=1,
                 grad_scale=1.0):
    """A synthetic trace+grads pair: softmax-normalized attentions, gaussian
    gradients."""
    from kbvqa.model import ForwardTrace, TraceGradients

    def softmax_rows(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def attn(n, m):
        return softmax_rows(rng.normal(size=(heads, n, m)))

    def grad(n, m):
        return grad_scale * rng.normal(size=(heads, n, m))

    trace = ForwardTrace(
        attn_lang=[attn(t_len, t_len) for _ in range(lang + cross)],
        attn_vis=[attn(i_len, i_len) for _ in range(vis + cross)],
        attn_cross_tv=[attn(t_len, i_len) for _ in range(cross)],
        attn_cross_vt=[attn(i_len, t_len) for _ in range(cross)],
        logits=rng.normal(size=4),
        pooled_index=0,
    )
    grads = TraceGradients(
        grad_lang=[grad(t_len, t_len) for _ in range(lang + cross)],
        grad_vis=[grad(i_len, i_len) for _ in range(vis + cross)],
        grad_cross_tv=[grad(t_len, i_len) for _ in range(cross)],
        grad_cross_vt=[grad(i_len, t_len) for _ in range(cross)],
        target_class=0,
    )
    return trace, grads
