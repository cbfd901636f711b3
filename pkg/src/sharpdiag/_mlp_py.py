"""Pure numpy MLP kernels.

Reference backend, always importable.  The compiled ``_mlp_core`` module
exposes the same three functions with the same argument conventions:

* ``params``  flat float64 vector, per layer ``W`` (fan_in x fan_out, row-major)
  followed by ``b`` (fan_out,)
* ``dims``    int64 array of layer widths, input first
* ``act``     0 = relu, 1 = tanh
* ``X``       C-contiguous float64 (m, dims[0])
* ``y``       int64 class indices
* ``sw``      float64 per-example weights (class weight of the true label)

Overflow is not reported here (the compiled backend cannot warn either);
callers check results for non-finite values.
"""

import numpy as np

RELU = 0
TANH = 1


def _unpack(params, dims):
    off = 0
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        n_w = fan_in * fan_out
        W = params[off:off + n_w].reshape(fan_in, fan_out)
        off += n_w
        b = params[off:off + fan_out]
        off += fan_out
        layers.append((W, b))
    return layers


@np.errstate(all="ignore")
def mlp_forward(params, dims, act, X):
    layers = _unpack(params, dims)
    h = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i == last:
            return z
        h = np.maximum(z, 0.0) if act == RELU else np.tanh(z)


def weighted_nll(logits, y, sw):
    m = logits.shape[0]
    mx = logits.max(axis=1)
    lse = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1))
    return sw * (lse - logits[np.arange(m), y])


@np.errstate(all="ignore")
def mlp_loss(params, dims, act, X, y, sw):
    return float(weighted_nll(mlp_forward(params, dims, act, X), y, sw).mean())


@np.errstate(all="ignore")
def mlp_loss_grad(params, dims, act, X, y, sw):
    """Mean weighted cross-entropy and its gradient w.r.t. ``params``."""
    layers = _unpack(params, dims)
    m = X.shape[0]
    hs = [X]
    h = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i == last:
            logits = z
        else:
            h = np.maximum(z, 0.0) if act == RELU else np.tanh(z)
            hs.append(h)

    mx = logits.max(axis=1)
    e = np.exp(logits - mx[:, None])
    s = e.sum(axis=1)
    rows = np.arange(m)
    per = sw * (mx + np.log(s) - logits[rows, y])
    loss = float(per.mean())

    dz = e / s[:, None]
    dz[rows, y] -= 1.0
    dz *= (sw / m)[:, None]

    grad = np.empty_like(params)
    # walk the flat layout back to front
    offsets = []
    off = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        offsets.append(off)
        off += fan_in * fan_out + fan_out
    for i in range(last, -1, -1):
        W, _ = layers[i]
        fan_in, fan_out = W.shape
        off = offsets[i]
        h_in = hs[i]
        grad[off:off + fan_in * fan_out] = (h_in.T @ dz).ravel()
        grad[off + fan_in * fan_out:off + fan_in * fan_out + fan_out] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ W.T
            if act == RELU:
                dz = dh * (h_in > 0.0)
            else:
                dz = dh * (1.0 - h_in * h_in)
    return loss, grad
