"""Independent brute-force oracles.

Everything here is written with plain loops against the definitions, on
purpose: these are the reference implementations the fast library paths are
verified against, so they must not share any code with the package.
"""

import numpy as np


def shuffle_oracle(x: np.ndarray, ratio: int) -> np.ndarray:
    """Move element (n, c*r^2 + dy*r + dx, i, j) to (n, c, i*r + dy, j*r + dx)."""
    n, c, h, w = x.shape
    r = ratio
    oc = c // (r * r)
    out = np.zeros((n, oc, h * r, w * r), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            base, rem = divmod(ci, r * r)
            dy, dx = divmod(rem, r)
            for i in range(h):
                for j in range(w):
                    out[ni, base, i * r + dy, j * r + dx] = x[ni, ci, i, j]
    return out


def max_ratio_oracle(channels: int) -> int:
    best = 1
    for r in range(1, channels + 1):
        if r * r > channels:
            break
        if channels % (r * r) == 0:
            best = r
    return best


def conv_oracle(
    x: np.ndarray, kernel: np.ndarray, stride: int, padding: int, shared: bool
) -> np.ndarray:
    """Cross-correlation with explicit loops over every output element."""
    n, c, h, w = x.shape
    k = kernel.shape[-1]
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    padded[:, :, padding : padding + h, padding : padding + w] = x
    if shared:
        out = np.zeros((n, c, out_h, out_w))
        for ni in range(n):
            for ci in range(c):
                for oi in range(out_h):
                    for oj in range(out_w):
                        acc = 0.0
                        for ky in range(k):
                            for kx in range(k):
                                acc += (
                                    padded[ni, ci, oi * stride + ky, oj * stride + kx]
                                    * float(kernel[ky, kx])
                                )
                        out[ni, ci, oi, oj] = acc
        return out
    oc = kernel.shape[0]
    out = np.zeros((n, oc, out_h, out_w))
    for ni in range(n):
        for oi in range(out_h):
            for oj in range(out_w):
                for co in range(oc):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                acc += (
                                    padded[ni, ci, oi * stride + ky, oj * stride + kx]
                                    * float(kernel[co, ci, ky, kx])
                                )
                    out[ni, co, oi, oj] = acc
    return out


def perception_oracle(height: int, width: int, k: int, s: int, p: int) -> np.ndarray:
    """Slide every window explicitly and count which real pixels it covers."""
    out_h = (height + 2 * p - k) // s + 1
    out_w = (width + 2 * p - k) // s + 1
    counts = np.zeros((height, width), dtype=np.int64)
    for oi in range(out_h):
        for oj in range(out_w):
            top, left = oi * s - p, oj * s - p
            for y in range(top, top + k):
                for x in range(left, left + k):
                    if 0 <= y < height and 0 <= x < width:
                        counts[y, x] += 1
    return counts


def albino_oracle(height, width, layers) -> list[np.ndarray]:
    """Contamination after each layer prefix, via explicit window mass sums."""
    mass = np.ones((height, width), dtype=np.float64)
    results = []
    for k, s, p in layers:
        h, w = mass.shape
        out_h = (h + 2 * p - k) // s + 1
        out_w = (w + 2 * p - k) // s + 1
        nxt = np.zeros((out_h, out_w))
        for oi in range(out_h):
            for oj in range(out_w):
                total = 0.0
                top, left = oi * s - p, oj * s - p
                for y in range(top, top + k):
                    for x in range(left, left + k):
                        if 0 <= y < h and 0 <= x < w:
                            total += mass[y, x]
                nxt[oi, oj] = total / (k * k)
        mass = nxt
        results.append(1.0 - mass)
    return results


def cluster_profile_oracle(
    in_h: int, in_w: int, ratio: int, k: int, s: int
) -> np.ndarray:
    """Sum perception counts of the arranged map inside each r x r cluster."""
    counts = perception_oracle(in_h * ratio, in_w * ratio, k, s, 0)
    profile = np.zeros((in_h, in_w), dtype=np.int64)
    for i in range(in_h):
        for j in range(in_w):
            for dy in range(ratio):
                for dx in range(ratio):
                    profile[i, j] += counts[i * ratio + dy, j * ratio + dx]
    return profile


def adam_oracle(param, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> np.ndarray:
    """Replay a gradient sequence through textbook Adam in float64."""
    p = np.asarray(param, dtype=np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


def accuracy_oracle(counts: np.ndarray) -> tuple[float, float]:
    """Overall and class-averaged accuracy from raw confusion counts."""
    counts = np.asarray(counts, dtype=np.float64)
    wa = float(np.trace(counts) / counts.sum())
    per_class = []
    for i, row in enumerate(counts):
        if row.sum() > 0:
            per_class.append(row[i] / row.sum())
    return wa, float(np.mean(per_class))
