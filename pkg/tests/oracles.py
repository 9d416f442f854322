"""Independent reference computations used by the tests.

Nothing here imports the scheduler or the simulator; the oracles re-derive
expected values from first principles so the implementation can be checked
against them.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

# -- ideal reuse: exhaustive interleavings ---------------------------------


def modulo_order(n: int, team: int, k: int) -> tuple[int, ...]:
    """Task numbers 1..n in the order team ``team`` runs them."""
    if k == 1:
        return tuple(range(1, n + 1))
    out = []
    for j in range(1, k + 1):
        residue = (j + team) % k
        out += [i for i in range(1, n + 1) if i % k == residue]
    return tuple(out)


def _pick(order, pos, db, reused):
    """Advance past every received task; return the next one to compute."""
    db = set(db)
    while pos < len(order) and order[pos] in db:
        db.discard(order[pos])
        reused += 1
        pos += 1
    if pos == len(order):
        return pos, None, frozenset(db), reused
    return pos + 1, order[pos], frozenset(db), reused


def ideal_reuse_outcomes(n: int, k: int, instant: bool = False) -> set[tuple[tuple[int, int], ...]]:
    """Every reachable per-team ``(computed, reused)`` result.

    Model: ``k`` teams start together, every task costs one time unit, one
    task at a time, zero transfer latency.  At each instant all busy teams
    finish their task together; the order in which those completions and
    the resulting deliveries are processed is enumerated exhaustively.

    With ``instant=False`` a delivery from team A to team B can precede B's
    next pick only if A's completion was processed before B's, and B may
    also pick before it arrives.  With ``instant=True`` every completion of
    an instant is visible to every team before any of them picks again.
    """
    orders = [modulo_order(n, t, k) for t in range(k)]
    start = []
    for t in range(k):
        pos, cur, db, reused = _pick(orders[t], 0, frozenset(), 0)
        start.append((pos, cur, db, 0, reused))
    results: set = set()
    seen: set = set()
    frontier = {tuple(start)}
    while frontier:
        nxt = set()
        for state in frontier:
            if state in seen:
                continue
            seen.add(state)
            active = [t for t in range(k) if state[t][1] is not None]
            if not active:
                results.add(tuple((s[3], s[4]) for s in state))
                continue
            nxt |= _successors(state, active, orders, k, instant)
        frontier = nxt
    return results


def _instant_successors(state, active, orders, k):
    out = set()
    for perm in itertools.permutations(active):
        new = list(state)
        sent = {}
        for u in perm:
            pos, cur, db, comp, reused = new[u]
            sent[u] = None if cur in db else cur
            new[u] = (pos, cur, db - {cur}, comp + 1, reused)
        for u in range(k):
            pos, cur, db, comp, reused = new[u]
            db = db | {x for t, x in sent.items() if t != u and x is not None}
            if u in sent:
                pos, cur, db, reused = _pick(orders[u], pos, db, reused)
            new[u] = (pos, cur, db, comp, reused)
        out.add(tuple(new))
    return out


def _successors(state, active, orders, k, instant=False):
    if instant:
        return _instant_successors(state, active, orders, k)
    out = set()
    for perm in itertools.permutations(active):
        # deliveries each team may see before its own pick
        before = {u: [t for t in perm[: perm.index(u)]] for u in perm}
        choices = [
            [frozenset(c) for r in range(len(before[u]) + 1) for c in itertools.combinations(before[u], r)]
            for u in perm
        ]
        for early in itertools.product(*choices):
            early_of = dict(zip(perm, early))
            new = list(state)
            # completions: task counted; send unless already received
            sent = {}
            for u in perm:
                pos, cur, db, comp, reused = new[u]
                comp += 1
                db = set(db)
                for t in early_of[u]:
                    if sent[t] is not None:
                        db.add(sent[t])
                if cur in db:
                    db.discard(cur)
                    sent[u] = None
                else:
                    sent[u] = cur
                pos, cur2, db2, reused = _pick(orders[u], pos, frozenset(db), reused)
                new[u] = (pos, cur2, db2, comp, reused)
            # late deliveries land before the next instant
            for u in range(k):
                pos, cur, db, comp, reused = new[u]
                db = set(db)
                for t in active:
                    if t == u or sent.get(t) is None:
                        continue
                    if u in early_of and t in early_of[u]:
                        continue
                    db.add(sent[t])
                new[u] = (pos, cur, frozenset(db), comp, reused)
            out.add(tuple(new))
    return out


# -- closed forms ------------------------------------------------------------


def pingpong_elapsed(i_max: int, n: int, alpha: float, beta: float) -> float:
    return 2 * i_max * (alpha + n / beta)


def cost_law(baseline: float, f: float, k: int) -> float:
    """Per-team compute with ideal sharing across ``k`` teams."""
    return baseline * (1 - f * (k - 1) / k)


def speedup_ceiling(f: float, k: int) -> float:
    return 1.0 / (1.0 - f * (k - 1) / k)


def fnv1a_64_reference(data: bytes) -> int:
    """Textbook FNV-1a, written independently of the package version."""
    h = 14695981039346656037
    for b in data:
        h = ((h ^ b) * 1099511628211) % 2**64
    return h


@lru_cache(maxsize=None)
def protocol_counts(m: int, r: int, c: int) -> tuple[int, int]:
    """Mirror and parallel message counts by explicit enumeration."""
    mirror = sum(1 for _ in range(m) for _src in range(r) for _dst in range(r)) + c
    parallel = sum(1 for _ in range(m) for _pair in range(r)) + c
    return mirror, parallel
