"""Pure-Python engine loop; reference twin of the compiled ``_engine`` module."""
import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_TWO_M53 = 1.0 / 9007199254740992.0


def _next(s):
    s = (s + 0x9E3779B97F4A7C15) & _MASK
    z = s
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return s, z ^ (z >> 31)


def _uniform(s):
    s, z = _next(s)
    return s, (z >> 11) * _TWO_M53


def _accepted(s, alpha, k):
    j = 0
    while j < k:
        s, u = _uniform(s)
        if u < alpha:
            j += 1
        else:
            break
    return s, j + 1


def _coverage(s, active, total, t, perm, touched):
    if t <= 0:
        return s, 0.0
    for i in range(total):
        perm[i] = i
        touched[i] = 0
    distinct = 0
    for _ in range(t):
        for j in range(active):
            s, u = _uniform(s)
            r = j + int(u * (total - j))
            perm[j], perm[r] = perm[r], perm[j]
            e = perm[j]
            if not touched[e]:
                touched[e] = 1
                distinct += 1
        if distinct == total:
            break
    return s, distinct / total


def accept_counts(n, alpha, k, state):
    out = np.empty(n, dtype=np.int64)
    s = int(state)
    for i in range(n):
        s, out[i] = _accepted(s, alpha, k)
    return out, s


def coverage_samples(n, active, total, t, state):
    out = np.empty(n, dtype=np.float64)
    perm = [0] * total
    touched = [0] * total
    s = int(state)
    for i in range(n):
        s, out[i] = _coverage(s, active, total, t, perm, touched)
    return out, s


def simulate(arrivals, closed_loop, g, k, alpha, costs, moe_costs, moe_active,
             moe_total, max_conc, state):
    n = arrivals.shape[0]
    arr = [float(a) for a in arrivals]
    s1p, s2p, s1v, s2v, s1d, s2d = (float(c) for c in costs)
    s1vs, s2vs = float(moe_costs[0]), float(moe_costs[1])
    moe_on = moe_total > 0
    per_req = k if k > 0 else 1

    completion = [0.0] * n
    tokens = [0] * n
    cycles = [0] * n
    decoding = [False] * n
    perm = [0] * max(moe_total, 1)
    touched = [0] * max(moe_total, 1)
    active = []
    s = int(state)
    t = 0.0
    next_admit = done = iters = 0

    if closed_loop and n > 0:
        arr[0] = 0.0

    while done < n:
        if not active and arr[next_admit] > t:
            t = arr[next_admit]
        while next_admit < n and (max_conc == 0 or len(active) < max_conc):
            if closed_loop and next_admit > done:
                break
            if arr[next_admit] > t:
                break
            active.append(next_admit)
            decoding[next_admit] = False
            next_admit += 1

        B = float(len(active))
        n_prefill = sum(1 for i in active if not decoding[i])
        n_decode = len(active) - n_prefill

        dur = 0.0
        if n_prefill > 0:
            dur = dur + (s1p + B * s2p)
        if n_decode > 0:
            cov = 0.0
            if moe_on:
                s, cov = _coverage(s, moe_active, moe_total, n_decode * per_req, perm, touched)
            dur = dur + ((s1v + cov * s1vs) + B * (s2v + cov * s2vs))
            if k > 0:
                dur = dur + k * (s1d + B * s2d)
        t = t + dur
        iters += 1

        kept = []
        for idx in active:
            if not decoding[idx]:
                decoding[idx] = True
                kept.append(idx)
                continue
            if k > 0:
                s, tok = _accepted(s, alpha, k)
            else:
                tok = 1
            tokens[idx] += tok
            cycles[idx] += 1
            if tokens[idx] >= g:
                completion[idx] = t
                done += 1
                if closed_loop and idx + 1 < n:
                    arr[idx + 1] = t
            else:
                kept.append(idx)
        active = kept

    arrivals[:] = arr
    return (np.array(completion), np.array(tokens, dtype=np.int64),
            np.array(cycles, dtype=np.int64), iters, s)
