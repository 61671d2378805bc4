"""Compiled inner training loop.

Runs a block of mini-batch steps (forward, backward of the mean squared
uncertainty plus the memory term, bias-corrected Adam) without returning to
Python between steps. ``copynet._loss_grad`` is the readable reference this
kernel is tested against.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def adam_steps(params, m, v, step, lr, beta1, beta2, adam_eps, dims, x, y, batches, prev, lam):
    """Apply ``len(batches)`` Adam steps in place; returns the new step counter.

    ``dims`` is ``(d, *widths, n_classes)``; ``batches[s]`` holds the row
    indices of step ``s``. ``prev`` is ignored when ``lam == 0``.
    """
    n_layers = dims.shape[0] - 1
    n_steps, bsz = batches.shape
    n_cls = dims[n_layers]

    woff = np.empty(n_layers, np.int64)
    boff = np.empty(n_layers, np.int64)
    pos = 0
    for l in range(n_layers):
        woff[l] = pos
        pos += dims[l] * dims[l + 1]
        boff[l] = pos
        pos += dims[l + 1]
    n_params = pos

    # acts[l] is the input of layer l; acts[n_layers] holds the softmax output
    aoff = np.empty(n_layers + 2, np.int64)
    aoff[0] = 0
    for l in range(n_layers + 1):
        aoff[l + 1] = aoff[l] + bsz * dims[l]
    acts = np.empty(aoff[n_layers + 1])
    grad = np.empty(n_params)
    scale = 2.0 / (n_cls * bsz)

    for s in range(n_steps):
        a0 = acts[aoff[0] : aoff[1]].reshape(bsz, dims[0])
        for i in range(bsz):
            a0[i, :] = x[batches[s, i]]

        for l in range(n_layers):
            w = params[woff[l] : woff[l] + dims[l] * dims[l + 1]].reshape(dims[l], dims[l + 1])
            b = params[boff[l] : boff[l] + dims[l + 1]]
            a_in = acts[aoff[l] : aoff[l + 1]].reshape(bsz, dims[l])
            out = acts[aoff[l + 1] : aoff[l + 2]].reshape(bsz, dims[l + 1])
            z = np.dot(a_in, w)
            if l < n_layers - 1:
                for i in range(bsz):
                    for j in range(dims[l + 1]):
                        t = z[i, j] + b[j]
                        out[i, j] = t if t > 0.0 else 0.0
            else:
                for i in range(bsz):
                    mx = -np.inf
                    for j in range(n_cls):
                        t = z[i, j] + b[j]
                        z[i, j] = t
                        if t > mx:
                            mx = t
                    tot = 0.0
                    for j in range(n_cls):
                        e = np.exp(z[i, j] - mx)
                        out[i, j] = e
                        tot += e
                    for j in range(n_cls):
                        out[i, j] /= tot

        probs = acts[aoff[n_layers] : aoff[n_layers + 1]].reshape(bsz, n_cls)
        dz = np.empty((bsz, n_cls))
        for i in range(bsz):
            dot = 0.0
            for j in range(n_cls):
                dp = (probs[i, j] - y[batches[s, i], j]) * scale
                dz[i, j] = dp
                dot += dp * probs[i, j]
            for j in range(n_cls):
                dz[i, j] = probs[i, j] * (dz[i, j] - dot)

        for l in range(n_layers - 1, -1, -1):
            a_in = acts[aoff[l] : aoff[l + 1]].reshape(bsz, dims[l])
            gw = np.dot(a_in.T, dz)
            k = woff[l]
            for p in range(dims[l]):
                for q in range(dims[l + 1]):
                    grad[k] = gw[p, q]
                    k += 1
            for q in range(dims[l + 1]):
                acc = 0.0
                for i in range(bsz):
                    acc += dz[i, q]
                grad[boff[l] + q] = acc
            if l > 0:
                w = params[woff[l] : woff[l] + dims[l] * dims[l + 1]].reshape(dims[l], dims[l + 1])
                da = np.dot(dz, w.T)
                # a_in = relu(pre-activation), so a_in > 0 iff pre-activation > 0
                for i in range(bsz):
                    for p in range(dims[l]):
                        if a_in[i, p] <= 0.0:
                            da[i, p] = 0.0
                dz = da

        if lam != 0.0:
            dist2 = 0.0
            for k in range(n_params):
                t = params[k] - prev[k]
                dist2 += t * t
            if dist2 > 0.0:
                c = lam / np.sqrt(dist2)
                for k in range(n_params):
                    grad[k] += c * (params[k] - prev[k])

        step += 1
        c1 = 1.0 - beta1**step
        c2 = 1.0 - beta2**step
        for k in range(n_params):
            g = grad[k]
            m[k] = beta1 * m[k] + (1.0 - beta1) * g
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g
            params[k] -= (lr / c1) * m[k] / (np.sqrt(v[k] / c2) + adam_eps)
    return step
