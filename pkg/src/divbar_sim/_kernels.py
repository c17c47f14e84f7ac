"""Compiled inner loop for the backpressure family.

This is a line-for-line translation of the pure-Python epoch loop in
``engine._run_divbar`` into array state so numba can compile it.  The Python
loop remains the reference implementation (and the only one that can emit
traces); `tests` pin the two paths to identical outputs.  If numba is not
importable the engine transparently falls back to the Python loop.

State layout:
  - receiver lists and their link columns in CSR form (recv_ids / recv_cols
    with recv_off offsets),
  - per-(node, commodity) FIFO queues as ring ranges inside one int64 arena;
    entries pack (source << 44) | pid,
  - the MIA partial-information ledger as a typed dict keyed by
    (receiver << 44) | pid,
  - first-successful-set bitmasks and epoch ends precomputed per node,
  - decode probabilities per (node, ranking permutation) in a dense table
    indexed by the ranking's Lehmer code.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
    from numba.core import types as _nb_types
    from numba.typed import Dict as _NumbaDict

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        return deco


PID_SHIFT = 44  # packets and receivers fit comfortably below 2**44


def perm_code(order) -> int:
    """Lehmer code of a permutation given as a tuple of positions (mixed
    radix, most significant digit first).  Mirrored inside the kernel."""
    kk = len(order)
    used = [False] * kk
    code = 0
    for pos, v in enumerate(order):
        rank = sum(1 for u in range(v) if not used[u])
        used[v] = True
        code = code * (kk - pos) + rank
    return code


def make_ppq_dict():
    if HAVE_NUMBA:
        return _NumbaDict.empty(_nb_types.int64, _nb_types.float64)
    return {}


@njit(cache=True)
def divbar_kernel(
    slots,
    n_nodes,
    ncomm,
    is_rep,
    is_mia,
    retain_losers,
    use_dormancy,
    commodity_ids,  # int32[ncomm] -> destination node id
    recv_ids,  # int32[R] CSR receiver node ids (ascending per node)
    recv_cols,  # int32[R] CSR link columns, parallel to recv_ids
    recv_off,  # int32[n_nodes + 1]
    prefix_flat,  # float64[(slots + 1) * n_links]
    n_links,
    ends,  # int64[n_nodes, slots] epoch end per start slot (slots = never)
    bits_arr,  # int16[n_nodes, slots] first-success masks (by start; by end for REP)
    phi_perm,  # float64[n_nodes, max_code, kmax] decode probs per ranking
    h0,
    h0_eff,
    arr_slot,  # int64[A] arrival event slots (ascending)
    arr_node,  # int32[A]
    arr_ci,  # int32[A]
    arr_cnt,  # int32[A]
    init_node,  # int32[I] pre-run packets
    init_ci,  # int32[I]
    ring,  # int64[arena]
    ring_off,  # int64[n_nodes, ncomm] arena offsets
    ring_cap,  # int64[n_nodes, ncomm]
    ppq,  # typed dict (receiver << 44 | pid) -> float64
    occ_out,  # int64[slots]
    dlv_out,  # int64[P, slots] cumulative deliveries per tracked pair
    dlv_row,  # int32[n_nodes, ncomm] tracked-pair row index or -1
    backlog_out,  # int64[n_nodes * ncomm, slots] or (0, 0)
    flows_out,  # int64[n_nodes, n_nodes, ncomm] forwarded-packet counts
):
    NEVER = slots
    record_backlogs = backlog_out.shape[0] > 0
    kmax = phi_perm.shape[2]

    q = np.zeros((n_nodes, ncomm), dtype=np.int64)
    head = np.zeros((n_nodes, ncomm), dtype=np.int64)
    tail = np.zeros((n_nodes, ncomm), dtype=np.int64)
    total_backlog = np.zeros(n_nodes, dtype=np.int64)
    end_due = np.full(n_nodes, NEVER, dtype=np.int64)
    dormant = np.full(n_nodes, -1, dtype=np.int64)
    ctx_ci = np.full(n_nodes, -1, dtype=np.int64)
    ctx_entry = np.zeros(n_nodes, dtype=np.int64)
    ctx_start = np.zeros(n_nodes, dtype=np.int64)
    ctx_w = np.zeros((n_nodes, kmax), dtype=np.int64)
    ctx_pre = np.zeros((n_nodes, kmax), dtype=np.float64)
    w_tmp = np.zeros(kmax, dtype=np.int64)
    cum_tmp = np.zeros(kmax, dtype=np.float64)
    used_tmp = np.zeros(kmax, dtype=np.bool_)
    restart = np.empty(n_nodes, dtype=np.int64)
    delivered_counts = np.zeros((n_nodes, ncomm), dtype=np.int64)

    occupancy = 0
    next_pid = 0
    packets_created = 0
    packets_delivered = 0
    epochs = 0
    integrity = 0  # 0 ok; >0 encodes the violated invariant

    # seed initial packets
    for i in range(init_node.shape[0]):
        n = init_node[i]
        ci = init_ci[i]
        pos = ring_off[n, ci] + tail[n, ci] % ring_cap[n, ci]
        ring[pos] = (n << PID_SHIFT) | next_pid
        tail[n, ci] += 1
        next_pid += 1
        q[n, ci] += 1
        total_backlog[n] += 1
        occupancy += 1
        packets_created += 1

    restart_count = 0
    for n in range(n_nodes):
        if recv_off[n + 1] > recv_off[n]:
            restart[restart_count] = n
            restart_count += 1

    arr_ptr = 0
    n_arr = arr_slot.shape[0]

    for slot in range(-1, slots):
        # --- epoch endings (skipped for the priming pass at slot == -1)
        if slot >= 0:
            new_restart = 0
            for n in range(n_nodes):
                if end_due[n] != slot:
                    continue
                end_due[n] = NEVER
                ci = ctx_ci[n]
                if ci >= 0:
                    base = recv_off[n]
                    kk = recv_off[n + 1] - base
                    start = ctx_start[n]
                    if is_rep:
                        bits = bits_arr[n, slot]
                    else:
                        bits = bits_arr[n, start]
                    if bits == 0:
                        integrity = 1  # epoch ended without an ACK
                        ctx_ci[n] = -1
                        continue
                    if is_mia:
                        base_end = (slot + 1) * n_links
                        base_start = start * n_links
                        ack_bits = 0
                        for i in range(kk):
                            j = recv_cols[base + i]
                            cum_tmp[i] = (
                                prefix_flat[base_end + j]
                                - prefix_flat[base_start + j]
                            )
                            if ctx_pre[n, i] + cum_tmp[i] >= h0_eff:
                                ack_bits |= 1 << i
                        if (ack_bits & bits) != bits:
                            integrity = 2  # MIA ACK set lost a renewal ACK
                            ctx_ci[n] = -1
                            continue
                    else:
                        ack_bits = bits
                    winner = -1
                    winner_w = 0
                    for i in range(kk):
                        if ack_bits >> i & 1:
                            wi = ctx_w[n, i]
                            if wi > winner_w:
                                winner = i
                                winner_w = wi
                    entry = ctx_entry[n]
                    pid = entry & ((1 << PID_SHIFT) - 1)
                    if winner >= 0:
                        k = recv_ids[base + winner]
                        cap = ring_cap[n, ci]
                        pos = ring_off[n, ci] + head[n, ci] % cap
                        if ring[pos] != entry:
                            integrity = 3  # epoch packet not at CPQ head
                            ctx_ci[n] = -1
                            continue
                        head[n, ci] += 1
                        q[n, ci] -= 1
                        total_backlog[n] -= 1
                        commodity = commodity_ids[ci]
                        flows_out[n, k, ci] += 1
                        if k == commodity:
                            occupancy -= 1
                            packets_delivered += 1
                            src = entry >> PID_SHIFT
                            delivered_counts[src, ci] += 1
                        else:
                            kpos = ring_off[k, ci] + tail[k, ci] % ring_cap[k, ci]
                            ring[kpos] = entry
                            tail[k, ci] += 1
                            q[k, ci] += 1
                            total_backlog[k] += 1
                            # wake k if it was skipping null epochs
                            if dormant[k] >= 0:
                                e = ends[k, dormant[k]]
                                while e < slot:
                                    epochs += 1
                                    e = ends[k, e + 1]
                                dormant[k] = -1
                                if e == slot:
                                    restart[new_restart] = k
                                    new_restart += 1
                                elif e < slots:
                                    end_due[k] = e
                    if is_mia:
                        delivered = winner >= 0 and recv_ids[base + winner] == commodity_ids[ci]
                        if delivered:
                            for i in range(kk):
                                key = (np.int64(recv_ids[base + i]) << PID_SHIFT) | pid
                                if key in ppq:
                                    del ppq[key]
                        else:
                            for i in range(kk):
                                k2 = recv_ids[base + i]
                                key = (np.int64(k2) << PID_SHIFT) | pid
                                if winner == i:
                                    if key in ppq:
                                        del ppq[key]
                                elif ack_bits >> i & 1:
                                    if retain_losers:
                                        v = ctx_pre[n, i] + cum_tmp[i]
                                        ppq[key] = v if v < h0 else h0
                                    elif key in ppq:
                                        del ppq[key]
                                elif cum_tmp[i] > 0.0 or ctx_pre[n, i] > 0.0:
                                    ppq[key] = ctx_pre[n, i] + cum_tmp[i]
                    ctx_ci[n] = -1
                restart[new_restart] = n
                new_restart += 1
            restart_count = new_restart

            # --- exogenous arrivals
            while arr_ptr < n_arr and arr_slot[arr_ptr] == slot:
                n = arr_node[arr_ptr]
                ci = arr_ci[arr_ptr]
                cnt = arr_cnt[arr_ptr]
                off = ring_off[n, ci]
                cap = ring_cap[n, ci]
                for _ in range(cnt):
                    pos = off + tail[n, ci] % cap
                    ring[pos] = (np.int64(n) << PID_SHIFT) | next_pid
                    tail[n, ci] += 1
                    next_pid += 1
                q[n, ci] += cnt
                total_backlog[n] += cnt
                occupancy += cnt
                packets_created += cnt
                if dormant[n] >= 0:
                    e = ends[n, dormant[n]]
                    while e < slot:
                        epochs += 1
                        e = ends[n, e + 1]
                    dormant[n] = -1
                    if e == slot:
                        restart[restart_count] = n
                        restart_count += 1
                    elif e < slots:
                        end_due[n] = e
                arr_ptr += 1

        # --- new epochs (effective at slot + 1)
        start = slot + 1
        if start < slots:
            for ri in range(restart_count):
                n = restart[ri]
                if total_backlog[n] == 0 and use_dormancy:
                    dormant[n] = start
                    continue
                epochs += 1
                base = recv_off[n]
                kk = recv_off[n + 1] - base
                best_metric = 0.0
                best_ci = -1
                for ci in range(ncomm):
                    qnc = q[n, ci]
                    if qnc == 0:
                        continue
                    mx = 0
                    for i in range(kk):
                        d = qnc - q[recv_ids[base + i], ci]
                        if d < 0:
                            d = 0
                        elif d > mx:
                            mx = d
                        w_tmp[i] = d
                    if mx == 0:
                        continue
                    # Lehmer code of the stable descending ranking
                    for i in range(kk):
                        used_tmp[i] = False
                    code = 0
                    for pos in range(kk):
                        best_i = -1
                        best_w = -1
                        for i in range(kk):
                            if not used_tmp[i] and w_tmp[i] > best_w:
                                best_i = i
                                best_w = w_tmp[i]
                        rank = 0
                        for u in range(best_i):
                            if not used_tmp[u]:
                                rank += 1
                        used_tmp[best_i] = True
                        code = code * (kk - pos) + rank
                    metric = 0.0
                    for i in range(kk):
                        if w_tmp[i] > 0:
                            metric += w_tmp[i] * phi_perm[n, code, i]
                    if metric > best_metric:
                        best_metric = metric
                        best_ci = ci
                        for i in range(kk):
                            ctx_w[n, i] = w_tmp[i]
                if best_ci < 0:
                    ctx_ci[n] = -1
                else:
                    ctx_ci[n] = best_ci
                    ctx_start[n] = start
                    pos = ring_off[n, best_ci] + head[n, best_ci] % ring_cap[n, best_ci]
                    entry = ring[pos]
                    ctx_entry[n] = entry
                    if is_mia:
                        pid = entry & ((1 << PID_SHIFT) - 1)
                        for i in range(kk):
                            key = (np.int64(recv_ids[base + i]) << PID_SHIFT) | pid
                            ctx_pre[n, i] = ppq.get(key, 0.0)
                e = ends[n, start]
                end_due[n] = e if e < slots else NEVER
            restart_count = 0

        # --- record
        if slot >= 0:
            occ_out[slot] = occupancy
            for n in range(n_nodes):
                for ci in range(ncomm):
                    row = dlv_row[n, ci]
                    if row >= 0:
                        dlv_out[row, slot] = delivered_counts[n, ci]
            if record_backlogs:
                for n in range(n_nodes):
                    for ci in range(ncomm):
                        backlog_out[n * ncomm + ci, slot] = q[n, ci]
        if integrity:
            return (
                integrity,
                packets_created,
                packets_delivered,
                epochs,
                next_pid,
                q,
                head,
                tail,
            )

    return (0, packets_created, packets_delivered, epochs, next_pid, q, head, tail)
