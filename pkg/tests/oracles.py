"""Independent reference computations used by the tests.

Nothing here calls into the package's forward/backward code: the forward pass
is a per-sample scalar loop and gradients come either from central finite
differences or from the explicit Jacobian-product formula with dense
m x m matrices.
"""
import math

import numpy as np


def forward_scalar(blocks, a, x, coefs, relu=True):
    """Plain-Python forward pass for one sample; ``coefs[h-1]`` is None if absent."""
    act = (lambda v: v if v > 0 else 0.0) if relu else (lambda v: v)
    W1 = blocks[0]
    m = len(a)
    h_prev = [coefs[0] * act(sum(W1[i][j] * x[j] for j in range(len(x)))) for i in range(m)]
    states = [h_prev]
    pre = [[sum(W1[i][j] * x[j] for j in range(len(x))) for i in range(m)]]
    for h in range(2, len(blocks) + 1):
        c = coefs[h - 1]
        if c is None:
            pre.append(None)
            states.append(h_prev)
            continue
        W = blocks[h - 1]
        z = [sum(W[i][j] * h_prev[j] for j in range(m)) for i in range(m)]
        h_prev = [h_prev[i] + c * act(z[i]) for i in range(m)]
        pre.append(z)
        states.append(h_prev)
    return sum(a[i] * h_prev[i] for i in range(m)), states, pre


def sum_sq_loss(u, y):
    return 0.5 * math.fsum((ui - yi) ** 2 for ui, yi in zip(u, y))


def coefs_for(cfg, bits, scale_S=None):
    base = cfg.c_res / (cfg.depth_H * math.sqrt(cfg.width_m))
    out = [math.sqrt(cfg.c_sigma / cfg.width_m)]
    for h in range(2, cfg.depth_H + 1):
        if scale_S is not None:
            out.append(base / scale_S if cfg.partition_lo <= h <= cfg.partition_hi else base)
        else:
            out.append(base if bits[h - 1] else None)
    return out


def per_sample_jacobian(cfg, blocks, a, x, bits, relu=True):
    """Gradient of u(x) w.r.t. (W1, .., WH, a), flattened, via the product formula

        du/dWh = c_h * (a^T prod_{l=H}^{h+1} (I + c_l J_l W_l M_l) J_h)^T x^(h-1)^T
    """
    coefs = coefs_for(cfg, bits)
    u, states, pre = forward_scalar(blocks, a, x, coefs, relu)
    m = cfg.width_m
    I = np.eye(m)

    def J(z):
        return np.diag([1.0 if (not relu or v > 0) else 0.0 for v in z])

    parts = []
    for h in range(1, cfg.depth_H + 1):
        if h > 1 and coefs[h - 1] is None:
            parts.append(np.zeros(blocks[h - 1].size))
            continue
        row = np.array(a, dtype=float)
        for l in range(cfg.depth_H, h, -1):
            if coefs[l - 1] is None:
                continue
            row = row @ (I + coefs[l - 1] * J(pre[l - 1]) @ blocks[l - 1])
        row = row @ J(pre[h - 1])
        prev = np.asarray(x, dtype=float) if h == 1 else np.asarray(states[h - 2])
        parts.append((coefs[h - 1] * np.outer(row, prev)).ravel())
    parts.append(np.asarray(states[-1]))
    return u, np.concatenate(parts)


def central_difference(f, theta, eps):
    g = np.empty_like(theta)
    for k in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[k] += eps
        tm[k] -= eps
        g[k] = (f(tp) - f(tm)) / (2 * eps)
    return g


def spectral_norm_power(A, iters=500, seed=0):
    """Largest singular value by power iteration (spectral norm)."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        w = A.T @ (A @ v)
        s = np.linalg.norm(w)
        v = w / s
    return math.sqrt(s)


KINK = 1e-7


def fd_gradient_check(cfg, params, data, mask, eps=1e-5, tol=1e-6):
    """Compare ``resist.resnet.grad`` with central differences of the loss.

    Coordinates whose +-eps perturbation flips any ReLU, or brings any
    pre-activation within ``KINK`` of zero, are skipped. Returns the analytic
    gradient and the number of coordinates compared.
    """
    from resist.resnet import forward_batch, grad, loss

    analytic = grad(params, data, mask, cfg).flatten()
    theta = params.flatten()

    def signs(th):
        _, cache = forward_batch(params.with_flat(th), data.X, mask, cfg)
        zs = [z for z in cache.zs if z is not None]
        near = min(float(np.abs(z).min()) for z in zs)
        return np.concatenate([(z > 0).ravel() for z in zs]), near

    base, _ = signs(theta)
    checked = 0
    for k in range(theta.size):
        values, skip = [], False
        for sign in (1, -1):
            th = theta.copy()
            th[k] += sign * eps
            pattern, near = signs(th)
            if cfg.activation == "relu" and (near < KINK or not np.array_equal(pattern, base)):
                skip = True
            values.append(loss(params.with_flat(th), data, mask, cfg))
        if skip:
            continue
        fd = (values[0] - values[1]) / (2 * eps)
        err = abs(analytic[k] - fd) / max(1.0, abs(analytic[k]))
        assert err <= tol, f"coordinate {k}: analytic {analytic[k]!r} vs finite difference {fd!r}"
        checked += 1
    return params.with_flat(analytic), checked
