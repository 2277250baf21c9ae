"""Independent reference implementations used to verify the real ones.

These deliberately use naive algorithms (repeated max-scan selection,
nested-loop silencing, slice/any labeling) so equivalence tests never share
a code path with the implementations they check.
"""

import math


def brute_force_takeover(rows, trace, budget, m, unit="steps"):
    n = len(trace.entries)
    k = math.ceil(budget * n - 1e-9)
    remaining = list(trace.entries)
    selected = []
    for _ in range(k):
        best = None
        for e in remaining:
            if (
                best is None
                or e[2] > best[2]
                or (e[2] == best[2] and (e[0], e[1]) < (best[0], best[1]))
            ):
                best = e
        selected.append(best)
        remaining.remove(best)
    silenced = set()
    for eid, t, _score in selected:
        for r in rows:
            if r.episode_id == eid and t <= r.t <= t + m:
                silenced.add((r.episode_id, r.t))

    def fails(r):
        return r.g if unit == "steps" else r.g_horizon

    baseline = sum(fails(r) for r in rows)
    if baseline == 0:
        return 1.0
    rem = sum(fails(r) for r in rows if (r.episode_id, r.t) not in silenced)
    return 1.0 - rem / baseline


def brute_force_horizon(g_seq, t, m):
    return 1 if any(g_seq[t : t + m + 1]) else 0
