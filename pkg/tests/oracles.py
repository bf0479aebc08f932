"""Independent scalar-loop reference implementations used by the tests."""
import math

import numpy as np


def _normalize(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / max(n, 1e-12) for x in v]


def supcon_term(vectors, labels, tau):
    total = 0.0
    n = len(vectors)
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        sims = {j: sum(a * b for a, b in zip(vectors[i], vectors[j])) / tau for j in range(n) if j != i}
        denom = sum(math.exp(s) for s in sims.values())
        acc = 0.0
        for p in positives:
            acc += math.log(math.exp(sims[p]) / denom)
        total += -acc / len(positives)
    return total


def pcl_oracle(features, labels, prototypes, proto_labels, tau, normalize=True, reduction="mean"):
    feats = [list(map(float, f)) for f in features]
    protos = [list(map(float, p)) for p in prototypes]
    if normalize:
        feats = [_normalize(f) for f in feats]
        protos = [_normalize(p) for p in protos]
    labels = [int(x) for x in labels]
    first = supcon_term(feats, labels, tau)
    second = supcon_term(feats + protos, labels + [int(x) for x in proto_labels], tau)
    if reduction == "mean":
        return first / len(feats) + second / (len(feats) + len(protos))
    return first + second


def bce_oracle(logits, labels):
    total, count = 0.0, 0
    for row, y in zip(logits, labels):
        for c, x in enumerate(row):
            t = 1.0 if c == y else 0.0
            s = 1.0 / (1.0 + math.exp(-x))
            total += -(t * math.log(s) + (1 - t) * math.log(1 - s))
            count += 1
    return total / count


def kl_oracle(old, new, temperature):
    total = 0.0
    for o, n in zip(old, new):
        po = [math.exp(v / temperature) for v in o]
        zo = sum(po)
        po = [v / zo for v in po]
        pn = [math.exp(v / temperature) for v in n]
        zn = sum(pn)
        pn = [v / zn for v in pn]
        total += sum(a * math.log(a / b) for a, b in zip(po, pn))
    return total / len(old) * temperature**2


def l1_oracle(a, b):
    flat_a = np.asarray(a, dtype=float).ravel().tolist()
    flat_b = np.asarray(b, dtype=float).ravel().tolist()
    return sum(abs(x - y) for x, y in zip(flat_a, flat_b)) / len(flat_a)


def conv_loop(x, w, pad):
    """Direct 6-loop stride-1 cross-correlation."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh, ow = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    s = 0.0
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                s += xp[b, c, i + di, j + dj] * w[o, c, di, dj]
                    out[b, o, i, j] = s
    return out
