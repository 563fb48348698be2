"""Inner loops of the graphical construction.

Timelines are passed in CSR form: the atoms of site ``i`` are
``times[offsets[i]:offsets[i+1]]`` (ascending) with selectors ``us`` and
marks ``vs``.  Sites are merged through a binary heap keyed by
``(time, site)``, which realizes the global order "time, then site, then
atom index" without a global sort.

Every function here is plain numpy/Python and is compiled by numba unless
``IPSHARP_DISABLE_NUMBA`` is set; see :mod:`ipsharp._jit`.
"""
from __future__ import annotations

import numpy as np

from ._jit import kernel


@kernel
def local_index(state, nbr, i):
    idx = 0
    for k in range(nbr.shape[1]):
        j = nbr[i, k]
        if j >= 0 and state[j] != 0:
            idx |= 1 << k
    return idx


@kernel
def update_value(state, i, u, v, nbr, c0, c1, M, h):
    """Value of site i right after an atom (u, v) under perturbation h."""
    if v < h:
        return 0
    idx = local_index(state, nbr, i)
    if u < c0[idx]:
        return 0
    if u < M - c1[idx]:
        return int(state[i])
    return 1


@kernel
def a_value(state, i, u, nbr, c0, c1, M):
    """Value produced by an A-marked atom with selector u."""
    idx = local_index(state, nbr, i)
    if u < c0[idx]:
        return 0
    if u < M - c1[idx]:
        return int(state[i])
    return 1


@kernel
def _less(ta, sa, tb, sb):
    return ta < tb or (ta == tb and sa < sb)


@kernel
def heap_push(ht, hs, size, t, s):
    pos = size
    ht[pos] = t
    hs[pos] = s
    while pos > 0:
        parent = (pos - 1) >> 1
        if _less(ht[pos], hs[pos], ht[parent], hs[parent]):
            ht[pos], ht[parent] = ht[parent], ht[pos]
            hs[pos], hs[parent] = hs[parent], hs[pos]
            pos = parent
        else:
            break
    return size + 1


@kernel
def heap_pop(ht, hs, size):
    """Remove the root; the caller reads ``ht[0], hs[0]`` beforehand."""
    size -= 1
    ht[0] = ht[size]
    hs[0] = hs[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        best = left
        right = left + 1
        if right < size and _less(ht[right], hs[right], ht[left], hs[left]):
            best = right
        if _less(ht[best], hs[best], ht[pos], hs[pos]):
            ht[pos], ht[best] = ht[best], ht[pos]
            hs[pos], hs[best] = hs[best], hs[pos]
            pos = best
        else:
            break
    return size


@kernel
def first_after(times, lo, hi, t):
    """First index in [lo, hi) with times[k] > t (binary search)."""
    while lo < hi:
        mid = (lo + hi) >> 1
        if times[mid] <= t:
            lo = mid + 1
        else:
            hi = mid
    return lo


@kernel
def seek(ptr, offsets, times, t):
    """Point every site at its first atom strictly after time t."""
    for i in range(ptr.size):
        ptr[i] = first_after(times, offsets[i], offsets[i + 1], t)


@kernel
def sweep(state, ptr, offsets, times, us, vs, nbr, c0, c1, M, h, t_start, t_end, watch):
    """Apply atoms with time in (current, t_end] in merged order.

    ``ptr`` holds, per site, the next unprocessed atom and is advanced in
    place.  Returns the time site ``watch`` spends at 1 during
    (t_start, t_end]; pass ``watch = -1`` to skip.
    """
    n = ptr.size
    ht = np.empty(n, dtype=np.float64)
    hs = np.empty(n, dtype=np.int64)
    size = 0
    for i in range(n):
        k = ptr[i]
        if k < offsets[i + 1] and times[k] <= t_end:
            size = heap_push(ht, hs, size, times[k], i)
    occ = 0.0
    last = t_start
    while size > 0:
        t = ht[0]
        i = hs[0]
        size = heap_pop(ht, hs, size)
        k = ptr[i]
        new = update_value(state, i, us[k], vs[k], nbr, c0, c1, M, h)
        if i == watch and new != state[i]:
            if state[i] != 0:
                occ += t - last
            last = t
        state[i] = new
        k += 1
        ptr[i] = k
        if k < offsets[i + 1] and times[k] <= t_end:
            size = heap_push(ht, hs, size, times[k], i)
    if watch >= 0 and state[watch] != 0:
        occ += t_end - last
    return occ


@kernel
def sweep_record(state, ptr, offsets, times, us, vs, nbr, c0, c1, M, h, t_end, ev_t, ev_s, ev_v, n_ev):
    """Like :func:`sweep` but appends every state change to (ev_t, ev_s, ev_v)."""
    n = ptr.size
    ht = np.empty(n, dtype=np.float64)
    hs = np.empty(n, dtype=np.int64)
    size = 0
    for i in range(n):
        k = ptr[i]
        if k < offsets[i + 1] and times[k] <= t_end:
            size = heap_push(ht, hs, size, times[k], i)
    while size > 0:
        t = ht[0]
        i = hs[0]
        size = heap_pop(ht, hs, size)
        k = ptr[i]
        new = update_value(state, i, us[k], vs[k], nbr, c0, c1, M, h)
        if new != state[i]:
            ev_t[n_ev] = t
            ev_s[n_ev] = i
            ev_v[n_ev] = new
            n_ev += 1
            state[i] = new
        k += 1
        ptr[i] = k
        if k < offsets[i + 1] and times[k] <= t_end:
            size = heap_push(ht, hs, size, times[k], i)
    return n_ev


@kernel
def evolve_forced(state, offsets, times, us, vs, nbr, c0, c1, M, h, f_sites, f_times, f_vals, t_end, ev_t, ev_s, ev_v):
    """Full path with forcings; at equal times the atom is applied first.

    Forcings must be sorted by time.  Returns the number of change events.
    """
    ptr = offsets[:-1].copy()
    n_ev = 0
    for j in range(f_sites.size):
        n_ev = sweep_record(state, ptr, offsets, times, us, vs, nbr, c0, c1, M, h, f_times[j],
                            ev_t, ev_s, ev_v, n_ev)
        x = f_sites[j]
        if state[x] != f_vals[j]:
            state[x] = f_vals[j]
            ev_t[n_ev] = f_times[j]
            ev_s[n_ev] = x
            ev_v[n_ev] = f_vals[j]
            n_ev += 1
    n_ev = sweep_record(state, ptr, offsets, times, us, vs, nbr, c0, c1, M, h, t_end, ev_t, ev_s, ev_v, n_ev)
    return n_ev


@kernel
def checkpoints(init, offsets, times, us, vs, nbr, c0, c1, M, h, t_grid, target, vals, occ):
    """Target value and cumulative occupation time at every t in ``t_grid``."""
    state = init.copy()
    ptr = offsets[:-1].copy()
    acc = 0.0
    prev = 0.0
    for j in range(t_grid.size):
        acc += sweep(state, ptr, offsets, times, us, vs, nbr, c0, c1, M, h, prev, t_grid[j], target)
        prev = t_grid[j]
        vals[j] = state[target]
        occ[j] = acc


@kernel
def batch_checkpoints(init, offsets, times, us, vs, n_sites, nbr, c0, c1, M, hs, t_grid, target, vals, occ):
    """Run :func:`checkpoints` for every replication and every h.

    ``offsets`` has ``B * n_sites + 1`` entries (replication-major).
    Output arrays have shape (B, len(hs), len(t_grid)).
    """
    B = (offsets.size - 1) // n_sites
    for b in range(B):
        off = offsets[b * n_sites: (b + 1) * n_sites + 1]
        for a in range(hs.size):
            checkpoints(init, off, times, us, vs, nbr, c0, c1, M, hs[a], t_grid, target, vals[b, a], occ[b, a])


@kernel
def outcome_from(state, ptr, x, b, offsets, times, us, vs, nbr, c0, c1, M, h, t, T, target):
    """Target value at T when site x is set to b at time t (state/ptr at t-)."""
    s2 = state.copy()
    p2 = ptr.copy()
    s2[x] = b
    sweep(s2, p2, offsets, times, us, vs, nbr, c0, c1, M, h, t, T, -1)
    return s2[target]


@kernel
def pivot_probe(init, offsets, times, us, vs, nbr, c0, c1, M, h, x, t, u, w_b, T, target, out):
    """Everything the pivotal and influence estimators need for one point.

    Fills ``out`` with: [a-condition, f(x:=0 at t), f(x:=1 at t),
    X_{t-}(x), value at x after adding (x,t,u,w)].  The outcome at the
    target only depends on the value at (x, t), so two continuations cover
    all cases.
    """
    state = init.copy()
    ptr = offsets[:-1].copy()
    sweep(state, ptr, offsets, times, us, vs, nbr, c0, c1, M, h, 0.0, t, -1)
    old = state[x]
    av = a_value(state, x, u, nbr, c0, c1, M)
    added = 0 if w_b else av
    f0 = outcome_from(state, ptr, x, 0, offsets, times, us, vs, nbr, c0, c1, M, h, t, T, target)
    f1 = outcome_from(state, ptr, x, 1, offsets, times, us, vs, nbr, c0, c1, M, h, t, T, target)
    out[0] = av
    out[1] = f0
    out[2] = f1
    out[3] = old
    out[4] = added


@kernel
def batch_pivot(init, offsets, times, us, vs, n_sites, nbr, c0, c1, M, h, qx, qt, qu, qb, T, target, out):
    B = (offsets.size - 1) // n_sites
    for b in range(B):
        off = offsets[b * n_sites: (b + 1) * n_sites + 1]
        pivot_probe(init, off, times, us, vs, nbr, c0, c1, M, h, qx[b], qt[b], qu[b], qb[b], T, target, out[b])


@kernel
def explore_window(offsets, times, us, vs, nbr, c0, c1, M, h, t0, t1, target,
                   st_site, st_lo, st_hi, n_st):
    """Exploration of the dynamics started from all ones at time t0.

    Only atoms at sites of E = {x : some y in x + Lambda_R is 1} are
    revealed.  Each maximal stretch during which a site belongs to E is
    appended as a strip (site, lo, hi], meaning (x, t) is revealed for
    lo < t <= hi.  Returns (target value at t1, strip count, revealed atoms).
    """
    n = offsets.size - 1
    K = nbr.shape[1]
    state = np.ones(n, dtype=np.uint8)
    cnt = np.zeros(n, dtype=np.int64)
    for x in range(n):
        for k in range(K):
            if nbr[x, k] >= 0:
                cnt[x] += 1
    enter = np.full(n, t0)
    ptr = np.empty(n, dtype=np.int64)
    inheap = np.zeros(n, dtype=np.bool_)
    ht = np.empty(n, dtype=np.float64)
    hs = np.empty(n, dtype=np.int64)
    size = 0
    for x in range(n):
        ptr[x] = first_after(times, offsets[x], offsets[x + 1], t0)
        if cnt[x] > 0 and ptr[x] < offsets[x + 1] and times[ptr[x]] <= t1:
            size = heap_push(ht, hs, size, times[ptr[x]], x)
            inheap[x] = True
    revealed = 0
    while size > 0:
        t = ht[0]
        i = hs[0]
        size = heap_pop(ht, hs, size)
        inheap[i] = False
        if cnt[i] == 0:
            continue
        k = ptr[i]
        if t <= enter[i]:
            # stale entry from before the site re-entered E
            k = first_after(times, offsets[i], offsets[i + 1], enter[i])
            ptr[i] = k
            if k < offsets[i + 1] and times[k] <= t1:
                size = heap_push(ht, hs, size, times[k], i)
                inheap[i] = True
            continue
        revealed += 1
        new = update_value(state, i, us[k], vs[k], nbr, c0, c1, M, h)
        ptr[i] = k + 1
        if ptr[i] < offsets[i + 1] and times[ptr[i]] <= t1:
            size = heap_push(ht, hs, size, times[ptr[i]], i)
            inheap[i] = True
        if new == state[i]:
            continue
        state[i] = new
        delta = 1 if new else -1
        # y in x + Lambda_R  <=>  x in y + Lambda_R (symmetric box)
        for kk in range(K):
            x = nbr[i, kk]
            if x < 0:
                continue
            before = cnt[x]
            cnt[x] += delta
            if before == 0 and cnt[x] > 0:
                enter[x] = t
                if not inheap[x]:
                    p = first_after(times, offsets[x], offsets[x + 1], t)
                    ptr[x] = p
                    if p < offsets[x + 1] and times[p] <= t1:
                        size = heap_push(ht, hs, size, times[p], x)
                        inheap[x] = True
            elif before > 0 and cnt[x] == 0:
                st_site[n_st] = x
                st_lo[n_st] = enter[x]
                st_hi[n_st] = t
                n_st += 1
    for x in range(n):
        if cnt[x] > 0 and t1 > enter[x]:
            st_site[n_st] = x
            st_lo[n_st] = enter[x]
            st_hi[n_st] = t1
            n_st += 1
    return int(state[target]), n_st, revealed


@kernel
def strip_overlap(site_a, lo_a, hi_a, site_b, lo_b, hi_b):
    """Total overlap length between two strip families (same-site pairs)."""
    tot = 0.0
    for i in range(site_a.size):
        for j in range(site_b.size):
            if site_a[i] == site_b[j]:
                lo = max(lo_a[i], lo_b[j])
                hi = min(hi_a[i], hi_b[j])
                if hi > lo:
                    tot += hi - lo
    return tot


@kernel
def explore_full(offsets, times, us, vs, nbr, c0, c1, M, h, S, T, target, st_site, st_lo, st_hi, st_phase):
    """Two-phase exploration started at time S.

    Returns (phase-1 outcome, f, strip count, revealed atoms, union length).
    """
    v1, n1, r1 = explore_window(offsets, times, us, vs, nbr, c0, c1, M, h, S, T, target,
                                st_site, st_lo, st_hi, 0)
    for j in range(n1):
        st_phase[j] = 1
    if v1 == 0:
        length = 0.0
        for j in range(n1):
            length += st_hi[j] - st_lo[j]
        return v1, 0, n1, r1, length
    f, n2, r2 = explore_window(offsets, times, us, vs, nbr, c0, c1, M, h, 0.0, T, target,
                               st_site, st_lo, st_hi, n1)
    length = 0.0
    for j in range(n2):
        length += st_hi[j] - st_lo[j]
    for j in range(n1, n2):
        st_phase[j] = 2
    length -= strip_overlap(st_site[:n1], st_lo[:n1], st_hi[:n1], st_site[n1:n2], st_lo[n1:n2], st_hi[n1:n2])
    # revealed atoms counted once: phase-2 atoms inside phase-1 strips were already seen
    dup = 0
    for j in range(n1, n2):
        x = st_site[j]
        for k in range(offsets[x], offsets[x + 1]):
            tk = times[k]
            if tk > st_lo[j] and tk <= st_hi[j]:
                for i in range(n1):
                    if st_site[i] == x and tk > st_lo[i] and tk <= st_hi[i]:
                        dup += 1
                        break
    return v1, f, n2, r1 + r2 - dup, length


@kernel
def batch_explore(offsets, times, us, vs, n_sites, nbr, c0, c1, M, h, S, T, target,
                  cell_site, cell_time, f_out, phase1_out, full_out, member, zlen):
    """Exploration, full evolution and strip membership of grid cells per replication."""
    B = (offsets.size - 1) // n_sites
    K = nbr.shape[1]
    init = np.ones(n_sites, dtype=np.uint8)
    for b in range(B):
        off = offsets[b * n_sites: (b + 1) * n_sites + 1]
        n_atoms = off[-1] - off[0]
        size = 2 * (n_sites + K * n_atoms) + 8
        st_site = np.empty(size, dtype=np.int64)
        st_lo = np.empty(size, dtype=np.float64)
        st_hi = np.empty(size, dtype=np.float64)
        st_phase = np.empty(size, dtype=np.int64)
        v1, f, ns, rev, length = explore_full(off, times, us, vs, nbr, c0, c1, M, h, S[b], T, target,
                                              st_site, st_lo, st_hi, st_phase)
        f_out[b] = f
        phase1_out[b] = v1
        zlen[b] = length
        state = init.copy()
        ptr = off[:-1].copy()
        sweep(state, ptr, off, times, us, vs, nbr, c0, c1, M, h, 0.0, T, -1)
        full_out[b] = state[target]
        for c in range(cell_site.size):
            x = cell_site[c]
            t = cell_time[c]
            hit = 0
            for j in range(ns):
                if st_site[j] == x and t > st_lo[j] and t <= st_hi[j]:
                    hit = 1
                    break
            member[b, c] = hit


@kernel
def _prev_atom(times, lo, hi, t):
    """Largest index in [lo, hi) with times[k] < t, or -1."""
    k = first_after(times, lo, hi, t) - 1
    while k >= lo and times[k] >= t:
        k -= 1
    return k if k >= lo else -1


@kernel
def backward_cone(offsets, times, nbr, target, T, clip, entry, step_t, step_s):
    """Influence cone of (target, T), built backward through the atoms.

    ``entry[x]`` receives the time at which x joins the cone (-1 if never);
    x belongs to the cone at time t iff ``t <= entry[x]``.  Every atom met
    at a cone site is a growth step and is recorded in (step_t, step_s).
    Returns (steps, escaped): ``escaped`` flags a neighbour outside the box,
    which is skipped when ``clip`` is set and aborts the construction
    otherwise.
    """
    n = offsets.size - 1
    K = nbr.shape[1]
    for x in range(n):
        entry[x] = -1.0
    ht = np.empty(n, dtype=np.float64)
    hs = np.empty(n, dtype=np.int64)
    size = 0
    entry[target] = T
    k = _prev_atom(times, offsets[target], offsets[target + 1], T)
    if k >= 0:
        size = heap_push(ht, hs, size, -times[k], target)
    steps = 0
    escaped = False
    while size > 0:
        s = -ht[0]
        x = hs[0]
        size = heap_pop(ht, hs, size)
        step_t[steps] = s
        step_s[steps] = x
        steps += 1
        for kk in range(K):
            y = nbr[x, kk]
            if y < 0:
                escaped = True
                if not clip:
                    return steps, escaped
                continue
            if entry[y] < 0.0:
                entry[y] = s
                p = _prev_atom(times, offsets[y], offsets[y + 1], s)
                if p >= 0:
                    size = heap_push(ht, hs, size, -times[p], y)
        p = _prev_atom(times, offsets[x], offsets[x + 1], s)
        if p >= 0:
            size = heap_push(ht, hs, size, -times[p], x)
    return steps, escaped
