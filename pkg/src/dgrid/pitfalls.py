"""Interval-family layout descriptions and redistribution schedules.

One dimension of a distribution is a family of equally spaced line
segments per processor.  Intersecting the families of two layouts tells
exactly which processor pairs must communicate and which global index
blocks move, turning redistribution between any two block-cyclic
(with overlap) layouts into interval arithmetic instead of per-element
bookkeeping.
"""

import itertools
from dataclasses import dataclass

from .mapdist import DistSpec, Map, MapError, coord_to_rank, local_extent


@dataclass(frozen=True)
class Falls:
    """Family of line segments: n segments [l+k*s, r+k*s], k = 0..n-1.

    Segment bounds are inclusive.  Segments never overlap: s >= r-l+1
    unless there is only one.
    """

    l: int
    r: int
    s: int
    n: int

    def __post_init__(self):
        if self.l > self.r:
            raise ValueError(f"empty segment: l={self.l} > r={self.r}")
        if self.n < 1:
            raise ValueError(f"need at least one segment, got n={self.n}")
        if self.n > 1 and self.s < self.r - self.l + 1:
            raise ValueError(f"stride {self.s} lets segments overlap")

    def segments(self):
        """Half-open [lo, hi) intervals, ascending."""
        w = self.r - self.l + 1
        return [(self.l + k * self.s, self.l + k * self.s + w)
                for k in range(self.n)]

    def span(self):
        """Smallest half-open interval containing every segment."""
        return (self.l, self.r + (self.n - 1) * self.s + 1)

    def shifted(self, offset):
        return Falls(self.l + offset, self.r + offset, self.s, self.n)


@dataclass(frozen=True)
class Pitfalls:
    """Processor-indexed family: processor q owns falls shifted by q*d."""

    falls: Falls
    d: int
    p: int

    def proc_falls(self, q):
        if not 0 <= q < self.p:
            raise ValueError(f"processor index {q} outside [0, {self.p})")
        return self.falls.shifted(q * self.d)

    def per_proc(self):
        return [[self.proc_falls(q)] for q in range(self.p)]


def _intervals_to_falls(intervals):
    """Minimal list of Falls generating the given disjoint sorted intervals."""
    out = []
    i = 0
    while i < len(intervals):
        lo, hi = intervals[i]
        w = hi - lo
        # longest run of equal-width, equally spaced segments
        j = i + 1
        stride = None
        while j < len(intervals):
            nlo, nhi = intervals[j]
            if nhi - nlo != w:
                break
            st = nlo - intervals[j - 1][0]
            if stride is None:
                stride = st
            elif st != stride:
                break
            j += 1
        n = j - i
        out.append(Falls(lo, hi - 1, stride if stride is not None else w, n))
        i = j
    return out


def dist_to_pitfalls(dim_size, dist, n_procs):
    """Layout of one dimension as interval families.

    Returns a single Pitfalls when every processor's family is the same
    shape (uniform case); otherwise a per-processor list of Falls lists.
    A processor owning nothing gets an empty list.
    """
    dist = DistSpec.parse(dist) if not isinstance(dist, DistSpec) else dist
    per_proc = []
    for q in range(n_procs):
        ext = local_extent(dim_size, dist, n_procs, q)
        per_proc.append(_intervals_to_falls(list(ext.owned)))
    # uniform collapse: every proc one Falls, identical shape, constant shift
    if all(len(fl) == 1 for fl in per_proc):
        f0 = per_proc[0][0]
        w = f0.r - f0.l
        if all(fl[0].r - fl[0].l == w and fl[0].s == f0.s and fl[0].n == f0.n
               for fl in per_proc):
            if n_procs == 1:
                return Pitfalls(f0, 0, 1)
            d = per_proc[1][0].l - f0.l
            if all(fl[0].l - f0.l == q * d for q, fl in enumerate(per_proc)):
                return Pitfalls(f0, d, n_procs)
    return per_proc


def ownership_falls(dim_size, dist, n_procs):
    """Per-processor Falls lists, expanding the uniform collapse."""
    pit = dist_to_pitfalls(dim_size, dist, n_procs)
    if isinstance(pit, Pitfalls):
        return pit.per_proc()
    return pit


def _merge_intervals(intervals):
    """Sort and merge touching/overlapping half-open intervals."""
    out = []
    for lo, hi in sorted(intervals):
        if hi <= lo:
            continue
        if out and lo <= out[-1][1]:
            if hi > out[-1][1]:
                out[-1] = (out[-1][0], hi)
        else:
            out.append((lo, hi))
    return out


def intersect_intervals(xs, ys):
    """Intersection of two sorted disjoint interval lists (two-pointer)."""
    out = []
    i = j = 0
    while i < len(xs) and j < len(ys):
        lo = max(xs[i][0], ys[j][0])
        hi = min(xs[i][1], ys[j][1])
        if lo < hi:
            out.append((lo, hi))
        if xs[i][1] < ys[j][1]:
            i += 1
        else:
            j += 1
    return _merge_intervals(out)


def subtract_intervals(xs, ys):
    """Set difference xs \\ ys of sorted disjoint interval lists."""
    out = []
    j = 0
    for lo, hi in xs:
        cur = lo
        while j < len(ys) and ys[j][1] <= cur:
            j += 1
        k = j
        while k < len(ys) and ys[k][0] < hi:
            if ys[k][0] > cur:
                out.append((cur, ys[k][0]))
            cur = max(cur, ys[k][1])
            k += 1
        if cur < hi:
            out.append((cur, hi))
    return out


def falls_segments(falls_list, clip=None):
    """Merged sorted segment intervals generated by a list of Falls."""
    segs = []
    for f in falls_list:
        segs.extend(f.segments())
    segs = _merge_intervals(segs)
    if clip is not None:
        segs = intersect_intervals(segs, [clip])
    return segs


def falls_intersect(a, b):
    """Exact intersection of two families as maximal disjoint intervals.

    Both families are sorted disjoint segment lists, so a linear
    two-pointer sweep over the segments in the overlapping window is
    exact; no per-element work.
    """
    a_list = a if isinstance(a, (list, tuple)) else [a]
    b_list = b if isinstance(b, (list, tuple)) else [b]
    return intersect_intervals(falls_segments(a_list), falls_segments(b_list))


@dataclass(frozen=True)
class Transfer:
    """One hyper-rectangular block moving between two ranks.

    block is a per-dimension tuple of half-open [lo, hi) intervals.
    ghost marks fills of the receiver's ghost region; non-ghost
    transfers partition the receiver's owned set exactly.
    """

    sender: int
    receiver: int
    block: tuple
    ghost: bool = False

    def count(self):
        n = 1
        for lo, hi in self.block:
            n *= hi - lo
        return n


@dataclass(frozen=True)
class RedistSchedule:
    """All transfers converting one layout into another."""

    shape: tuple
    transfers: tuple

    def data_transfers(self):
        return [t for t in self.transfers if not t.ghost]

    def ghost_transfers(self):
        return [t for t in self.transfers if t.ghost]

    def pair_count(self, include_ghost=False):
        """Distinct (sender, receiver) pairs: the messages the transfer
        matrix implies when blocks per pair coalesce into one message."""
        pairs = {(t.sender, t.receiver) for t in self.transfers
                 if include_ghost or not t.ghost}
        return len(pairs)


def schedule_message_count(sched):
    """Number of data transfers whose sender and receiver differ."""
    return sum(1 for t in sched.transfers if not t.ghost and t.sender != t.receiver)


def _dim_ownership(dmap, shape_d, d):
    """Owned (and ghost-only) intervals per grid index along dimension d."""
    owned = []
    ghost_only = []
    for i in range(dmap.grid[d]):
        ext = local_extent(shape_d, dmap.dists[d], dmap.grid[d], i, dmap.overlap[d])
        own = _merge_intervals(list(ext.owned))
        gho = subtract_intervals(_merge_intervals(list(ext.ghost)), own)
        owned.append(own)
        ghost_only.append(gho)
    return owned, ghost_only


def compute_schedule(shape, src_map, dst_map):
    """Exact transfer set for redistributing shape from src_map to dst_map.

    Per dimension, every (src grid index, dst grid index) pair of
    interval families is intersected; a transfer exists for each
    combination of non-empty per-dimension intersections, with the block
    being their Cartesian product.  Destination ghost indices are filled
    by separate ghost-flagged transfers sourced from the owners under
    src_map.  Transfers are sorted (sender, receiver, ghost, origin) so
    schedules are reproducible.
    """
    shape = tuple(shape)
    if not isinstance(src_map, Map) or not isinstance(dst_map, Map):
        raise MapError("compute_schedule needs Map instances")
    if len(shape) != src_map.ndim or len(shape) != dst_map.ndim:
        raise MapError(
            f"shape {shape} does not match map dims "
            f"{src_map.ndim}/{dst_map.ndim}")
    nd = len(shape)

    src_own = []
    dst_own = []
    dst_gho = []
    for d in range(nd):
        so, _ = _dim_ownership(src_map, shape[d], d)
        do, dg = _dim_ownership(dst_map, shape[d], d)
        src_own.append(so)
        dst_own.append(do)
        dst_gho.append(dg)

    transfers = []
    src_coords = itertools.product(*[range(g) for g in src_map.grid])
    for ci in src_coords:
        sender = coord_to_rank(src_map, ci)
        for cj in itertools.product(*[range(g) for g in dst_map.grid]):
            receiver = coord_to_rank(dst_map, cj)
            # per dim: (interval, from_ghost_region) choices
            per_dim = []
            alive = True
            for d in range(nd):
                own = intersect_intervals(src_own[d][ci[d]], dst_own[d][cj[d]])
                gho = intersect_intervals(src_own[d][ci[d]], dst_gho[d][cj[d]])
                choices = [(iv, False) for iv in own] + [(iv, True) for iv in gho]
                if not choices:
                    alive = False
                    break
                per_dim.append(choices)
            if not alive:
                continue
            for combo in itertools.product(*per_dim):
                block = tuple(iv for iv, _ in combo)
                ghost = any(g for _, g in combo)
                transfers.append(Transfer(sender, receiver, block, ghost))

    transfers.sort(key=lambda t: (t.sender, t.receiver, t.ghost,
                                  tuple(iv[0] for iv in t.block)))
    return RedistSchedule(shape, tuple(transfers))
