"""Slow, obviously-correct reference implementations used only by tests."""

import math

import numpy as np


def naive_conv3d(x, k, b, stride=(1, 1, 1)):
    c, d, h, w = x.shape
    n, _, r, kh, kw = k.shape
    sd, sh, sw = stride
    od, oh, ow = (d - r) // sd + 1, (h - kh) // sh + 1, (w - kw) // sw + 1
    out = np.zeros((n, od, oh, ow))
    for f in range(n):
        for z in range(od):
            for y in range(oh):
                for xx in range(ow):
                    s = 0.0
                    for m in range(c):
                        for dz in range(r):
                            for dy in range(kh):
                                for dx in range(kw):
                                    s += k[f, m, dz, dy, dx] * x[m, z * sd + dz, y * sh + dy, xx * sw + dx]
                    out[f, z, y, xx] = max(b[f] + s, 0.0)
    return out


def naive_conv1d(x, k, b):
    m, length = x.shape
    n, _, wk = k.shape
    out = np.zeros((n, length - wk + 1))
    for f in range(n):
        for p in range(length - wk + 1):
            s = 0.0
            for c in range(m):
                for q in range(wk):
                    s += k[f, c, q] * x[c, p + q]
            out[f, p] = max(b[f] + s, 0.0)
    return out


def naive_fc(x, w, b):
    out = np.zeros(w.shape[0])
    for i in range(w.shape[0]):
        s = b[i]
        for j in range(w.shape[1]):
            s += w[i, j] * x[j]
        out[i] = s
    return out


def naive_pool(x, window, stride):
    """Windowed max over the trailing len(window) axes."""
    dims = len(window)
    lead = x.shape[: x.ndim - dims]
    sp = x.shape[x.ndim - dims:]
    out_sp = tuple((n - w) // s + 1 for n, w, s in zip(sp, window, stride))
    out = np.empty(lead + out_sp)
    for li in np.ndindex(*lead) if lead else [()]:
        for oi in np.ndindex(*out_sp):
            best = -math.inf
            for wi in np.ndindex(*window):
                v = x[li + tuple(o * s + q for o, s, q in zip(oi, stride, wi))]
                best = max(best, v)
            out[li + oi] = best
    return out


def moments_ccc(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    return 2 * cov / (vx + vy + (mx - my) ** 2)


def brute_bmu(x, weights, contexts, global_contexts, alphas):
    best, best_d = None, math.inf
    for j in range(len(weights)):
        d = alphas[0] * float(np.sum((x - weights[j]) ** 2))
        for k in range(len(global_contexts)):
            d += alphas[k + 1] * float(np.sum((global_contexts[k] - contexts[j][k]) ** 2))
        if d < best_d:
            best, best_d = j, d
    return best, best_d


def reference_mfcc(audio, sr=16000, win=400, hop=160, n_fft=1024, n_mels=26, n_out=35, floor=1e-10):
    """MFCC pipeline written against scipy, sharing no code with the package."""
    from scipy.fft import dct, rfft
    from scipy.signal import get_window

    window = get_window("hann", win, fftbins=False)
    n_frames = 1 + (len(audio) - win) // hop
    mel = lambda f: 2595.0 * math.log10(1.0 + f / 700.0)
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    lo, hi = mel(0.0), mel(sr / 2)
    pts = [inv(lo + (hi - lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    bank = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        a, c, b = pts[m], pts[m + 1], pts[m + 2]
        for k in range(n_fft // 2 + 1):
            f = k * sr / n_fft
            if a < f <= c:
                bank[m, k] = (f - a) / (c - a)
            elif c < f < b:
                bank[m, k] = (b - f) / (b - c)
    cols = []
    for i in range(n_frames):
        seg = audio[i * hop:i * hop + win] * window
        mag = np.abs(rfft(seg, n_fft))
        logmel = np.log(np.maximum(bank @ mag, floor))
        c = dct(logmel, type=2) / n_mels
        c[0] /= 2.0
        cols.append(c)
    full = np.array(cols).T
    keep = [int(round(j * (n_frames - 1) / (n_out - 1))) for j in range(n_out)]
    return full[:, keep]


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y):
    labels = sorted(set(train_y))
    cents = {c: np.mean([x for x, y in zip(train_x, train_y) if y == c], axis=0) for c in labels}
    hits = 0
    for x, y in zip(test_x, test_y):
        guess = min(labels, key=lambda c: float(np.sum((x - cents[c]) ** 2)))
        hits += guess == y
    return hits / len(test_y)
