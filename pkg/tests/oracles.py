"""Slow, direct reference implementations used to pin the vectorised code.

Everything here is written from the defining formulas with Python loops and
the ``math`` module, sharing no code with the package.
"""

from __future__ import annotations

import cmath
import math


def dft_power(frame, fft_size):
    n = len(frame)
    out = []
    for k in range(fft_size // 2 + 1):
        acc = 0j
        for t in range(n):
            acc += frame[t] * cmath.exp(-2j * math.pi * k * t / fft_size)
        out.append(abs(acc) ** 2)
    return out


def dct2_ortho(x):
    n = len(x)
    out = []
    for k in range(n):
        s = sum(x[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
        scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        out.append(scale * s)
    return out


def hz_to_mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def si_sdr(x, y, floor=1e-12, clamp=100.0):
    energy = sum(a * a for a in x)
    alpha = sum(a * b for a, b in zip(x, y)) / energy
    num = sum((alpha * a) ** 2 for a in x)
    den = max(sum((alpha * a - b) ** 2 for a, b in zip(x, y)), floor)
    if num == 0:
        return -clamp
    return max(-clamp, min(clamp, 10.0 * math.log10(num / den)))


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def info_nce(anchors, positives, negatives, tau):
    total = 0.0
    for v, vp, negs in zip(anchors, positives, negatives):
        pos = math.exp(dot(v, vp) / tau)
        den = pos + sum(math.exp(dot(v, vk) / tau) for vk in negs)
        total += -math.log(pos / den)
    return total / len(anchors)


def nt_xent(z, tau):
    n2 = len(z)
    n = n2 // 2
    total = 0.0
    for i in range(n2):
        j = (i + n) % n2
        den = sum(math.exp(dot(z[i], z[k]) / tau) for k in range(n2) if k != i)
        total += -math.log(math.exp(dot(z[i], z[j]) / tau) / den)
    return total / n2


def frame_l2(truth, pred, weights, unmasked):
    """Mean over unmasked frames of sum_h w_h * ||u_h - u_hat_h||^2."""
    frames = [t for t, keep in enumerate(unmasked) if keep]
    total = 0.0
    for t in frames:
        for kind in truth:
            total += weights.get(kind, 1.0) * sum((a - b) ** 2 for a, b in zip(truth[kind][t], pred[kind][t]))
    return total / len(frames)


def lr(step, base, warmup, decay=0.3):
    if step <= warmup:
        return base * step / warmup
    return base * (step / warmup) ** (-decay)


def adam_scalar(theta, grads, lrs, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on one scalar; returns the trajectory of theta."""
    m = v = 0.0
    out = []
    for t, (g, a) in enumerate(zip(grads, lrs), start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - a * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out
