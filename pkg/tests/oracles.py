"""Independent reference computations used as test oracles.

Nothing here imports the operator implementations under test.
"""

import numpy as np


def brute_force_conv2d(x, w, b, stride, padding, rate):
    """Direct nested-loop cross-correlation with dilated taps."""
    n_, c_, h, wd = x.shape
    f_, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    rh, rw = rate
    ho = (h + 2 * ph - (rh * (kh - 1) + 1)) // sh + 1
    wo = (wd + 2 * pw - (rw * (kw - 1) + 1)) // sw + 1
    out = np.zeros((n_, f_, ho, wo))
    for n in range(n_):
        for f in range(f_):
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0 if b is None else float(b[f])
                    for c in range(c_):
                        for i in range(kh):
                            ih = oh * sh - ph + i * rh
                            if not 0 <= ih < h:
                                continue
                            for j in range(kw):
                                iw = ow * sw - pw + j * rw
                                if 0 <= iw < wd:
                                    acc += x[n, c, ih, iw] * w[f, c, i, j]
                    out[n, f, oh, ow] = acc
    return out


def window_mean(x, f):
    n_, c_, h, w = x.shape
    out = np.zeros((n_, c_, h // f, w // f))
    for n in range(n_):
        for c in range(c_):
            for i in range(h // f):
                for j in range(w // f):
                    s = 0.0
                    for a in range(f):
                        for b in range(f):
                            s += x[n, c, i * f + a, j * f + b]
                    out[n, c, i, j] = s / (f * f)
    return out


def loop_weighted_ce(probs, labels, weights):
    total = 0.0
    for row, y in zip(probs, labels):
        total -= weights[y] * np.log(max(float(row[y]), 1e-12))
    return total


def macnet_parameter_count(num_classes, stem, branch, rates, stage_channels, depths, fc1, fc2, bn=True):
    """Closed-form parameter count enumerated from the layer list.

    conv unit = weights + (2 BN affine params per channel if bn else 1 bias per channel)
    With bn, adapters 0-3 are bias-free since batch-normalized convs consume their output.
    """
    def conv(out_c, in_c, k):
        return out_c * in_c * k * k + (2 * out_c if bn else out_c)

    total = conv(stem, 3, 3)
    targets = [stem] + list(stage_channels)
    for level in range(5):
        total += len(rates) * conv(branch, 3, 3)
        total += targets[level] * branch * len(rates)  # adapter weight
        if not bn or level == 4:
            total += targets[level]  # adapter bias, only where no batch norm follows
    in_c = stem
    for out_c, depth in zip(stage_channels, depths):
        mid = out_c // 4
        for j in range(depth):
            total += conv(mid, in_c, 1) + conv(mid, mid, 3) + conv(out_c, mid, 1)
            if j == 0:
                total += conv(out_c, in_c, 1)
            in_c = out_c
    total += stage_channels[-1] * fc1 + fc1
    total += fc1 * fc2 + fc2
    total += fc2 * num_classes + num_classes
    return total
