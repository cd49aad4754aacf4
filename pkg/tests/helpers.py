"""Independent oracles shared by the test modules."""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch


def sample_entries(named_params, count, rng):
    """Pick ``count`` (name, param, flat index) triples uniformly over all entries."""
    named_params = list(named_params)
    sizes = np.array([p.numel() for _, p in named_params])
    flat = rng.choice(sizes.sum(), size=min(count, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for f in flat:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        name, p = named_params[i]
        out.append((name, p, int(f - offsets[i])))
    return out


def finite_difference_check(loss_fn, entries, h=1e-6):
    """Compare autograd against central differences at the given parameter entries.

    Returns a list of (name, index, analytic, numeric, relative error).
    Relative error is |a - n| / max(|a|, |n|, 1e-6).
    """
    for _, p, _ in entries:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.reshape(-1)[i].item() if p.grad is not None else 0.0 for _, p, i in entries]
    results = []
    with torch.no_grad():
        for (name, p, i), a in zip(entries, grads):
            flat = p.view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            n = (up - down) / (2 * h)
            rel = abs(a - n) / max(abs(a), abs(n), 1e-6)
            results.append((name, i, a, n, rel))
    return results


def brute_hausdorff(p: np.ndarray, t: np.ndarray) -> float:
    """All-pairs Hausdorff over six-connected boundary voxels, loops only."""

    def surface(m):
        pts = []
        for idx in itertools.product(*(range(n) for n in m.shape)):
            if not m[idx]:
                continue
            for ax in range(3):
                for step in (-1, 1):
                    j = list(idx)
                    j[ax] += step
                    if not 0 <= j[ax] < m.shape[ax] or not m[tuple(j)]:
                        pts.append(idx)
                        break
                else:
                    continue
                break
        return pts

    sp, st = surface(p), surface(t)

    def directed(a, b):
        return max(min(math.sqrt(sum((x - y) ** 2 for x, y in zip(u, v))) for v in b) for u in a)

    return max(directed(sp, st), directed(st, sp))


def brute_dice(p, t):
    inter = sum(1 for a, b in zip(p.ravel(), t.ravel()) if a and b)
    sp, stt = int(p.sum()), int(t.sum())
    return 1.0 if sp + stt == 0 else 2 * inter / (sp + stt)


def brute_accuracy(p, t):
    tp = tn = fp = fn = 0
    for a, b in zip(p.ravel(), t.ravel()):
        if a and b:
            tp += 1
        elif not a and not b:
            tn += 1
        elif a:
            fp += 1
        else:
            fn += 1
    return (tp + tn) / (tp + tn + fp + fn)
