"""Pure numpy versions of the compiled kernels."""
import numpy as np


def float_to_half_bits(x, out):
    with np.errstate(over="ignore"):  # out-of-range values round to inf, as in hardware
        out[:] = np.asarray(x, dtype=np.float32).astype(np.float16).view(np.uint16)


def fused_adam(master, m, v, grads, coef):
    steps = grads.shape[0]
    if steps == 0:
        return
    n = master.shape[0]
    if grads.shape[1] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("fused_adam: length mismatch")
    if coef.shape != (steps, 8):
        raise ValueError("fused_adam: coefficient table must be (steps, 8)")
    w = master.copy()
    mi = m.copy()
    vi = v.copy()
    for j in range(steps):
        b1, omb1, b2, omb2, bc1, bc2, lr, eps = coef[j]
        g = grads[j]
        mi = b1 * mi + omb1 * g
        vi = b2 * vi + omb2 * (g * g)
        mhat = mi / bc1
        vhat = vi / bc2
        w = w - (lr * mhat) / (np.sqrt(vhat) + eps)
    master[:] = w
    m[:] = mi
    v[:] = vi


def threshold_compact(x, threshold, out_values, out_indices):
    n = x.shape[0]
    if out_values.shape[0] < n or out_indices.shape[0] < n:
        raise ValueError("threshold_compact: output buffers too small")
    if n > 2**31 - 1:
        raise ValueError("threshold_compact: chunk exceeds int32 index range")
    a = np.abs(x)
    thr = np.float32(threshold)
    idx = np.flatnonzero((a >= thr) & (a > 0))
    count = idx.size
    out_values[:count] = x[idx].astype(np.float16).view(np.uint16)
    out_indices[:count] = idx.astype(np.int32)
    return count
