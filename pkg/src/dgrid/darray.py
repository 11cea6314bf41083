"""Distributed arrays and the parallel support-function set.

A distributed array couples a global shape with a map and stores only
the owned (plus ghost) elements locally.  The programming style is
fragmented: code pulls the local part out with local(), works on plain
arrays, and puts it back with put_local(); communication happens only
in the collective operations (subscripted-assignment redistribution,
agg, synch).  Every factory and support function also accepts plain
arrays and the turned-off scalar map 1, so a program can switch between
serial and parallel execution without code changes.

All collective operations must be called by every rank of the
communicator in the same order, including ranks outside the map's
processor list.
"""

import itertools
import zlib

import numpy as np

from . import fsmpi
from .mapdist import Map, MapError, is_serial_map, local_extent, rank_to_coord
from .pitfalls import compute_schedule, dist_to_pitfalls

_SUPPORTED_DTYPES = ("f8", "f4", "i8", "i4", "u8", "c16", "u1")


def _check_dtype(dtype):
    dt = np.dtype(dtype)
    if dt not in [np.dtype(s) for s in _SUPPORTED_DTYPES]:
        raise MapError(f"unsupported element type {dt}")
    return dt


class DArray:
    """Globally shaped array with a map and a local owned(+ghost) buffer."""

    def __init__(self, shape, dtype, dmap, ctx):
        if ctx is None:
            raise MapError("distributed arrays need a communicator context")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        if len(shape) != dmap.ndim:
            raise MapError(f"shape {shape} does not match map grid {dmap.grid}")
        self.shape = shape
        self.dtype = _check_dtype(dtype)
        self.dmap = dmap
        self.ctx = ctx
        self.pit = tuple(dist_to_pitfalls(shape[d], dmap.dists[d], dmap.grid[d])
                         for d in range(dmap.ndim))
        if ctx.rank in dmap.procs:
            coord = rank_to_coord(dmap, ctx.rank)
            exts = [local_extent(shape[d], dmap.dists[d], dmap.grid[d],
                                 coord[d], dmap.overlap[d])
                    for d in range(dmap.ndim)]
        else:
            exts = [local_extent(0, dmap.dists[d], 1, 0, 0)
                    for d in range(dmap.ndim)]
        self.owned = tuple(e.owned for e in exts)
        self.ghost = tuple(e.ghost for e in exts)
        self._gidx = []
        for e in exts:
            idx = set()
            for lo, hi in e.owned:
                idx.update(range(lo, hi))
            for lo, hi in e.ghost:
                idx.update(range(lo, hi))
            self._gidx.append(np.array(sorted(idx), dtype=np.int64))
        self.local = np.zeros(tuple(len(g) for g in self._gidx), dtype=self.dtype)

    @property
    def ndim(self):
        return len(self.shape)

    def _box_slices(self, block):
        """Local buffer slices covering a global box; every index of the
        box must be present locally."""
        sl = []
        for d, (lo, hi) in enumerate(block):
            g = self._gidx[d]
            i = int(np.searchsorted(g, lo, side="left"))
            j = int(np.searchsorted(g, hi, side="left"))
            if j - i != hi - lo:
                raise MapError(f"global box {block} is not fully local")
            sl.append(slice(i, j))
        return tuple(sl)

    def owned_boxes(self):
        return _owned_boxes(self.owned)

    # --- element-wise arithmetic (purely local, zero messages) ---

    def _binary(self, other, op, reflected=False):
        if isinstance(other, DArray):
            if other.dmap != self.dmap or other.shape != self.shape:
                raise MapError(
                    "element-wise operands must share one map; "
                    "redistribute explicitly first")
            rhs = other.local
        elif np.isscalar(other):
            rhs = other
        else:
            return NotImplemented
        out = DArray(self.shape, np.result_type(self.dtype, rhs), self.dmap, self.ctx)
        out.local[...] = op(rhs, self.local) if reflected else op(self.local, rhs)
        return out

    def __add__(self, other):
        return self._binary(other, np.add)

    def __radd__(self, other):
        return self._binary(other, np.add, reflected=True)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return self._binary(other, np.subtract, reflected=True)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    def __rmul__(self, other):
        return self._binary(other, np.multiply, reflected=True)

    def __truediv__(self, other):
        return self._binary(other, np.divide)

    def __rtruediv__(self, other):
        return self._binary(other, np.divide, reflected=True)

    def __setitem__(self, key, value):
        if not _is_full_slice(key, self.ndim):
            raise MapError("only whole-array assignment a[:, ..., :] redistributes")
        assign_redistribute(self, value)

    def describe(self):
        crc = zlib.crc32(np.ascontiguousarray(self.local).tobytes())
        return (f"rank={self.ctx.rank} owned={list(self.owned)} "
                f"ghost={list(self.ghost)} crc={crc:08x}")

    def __repr__(self):
        return (f"DArray(shape={self.shape}, dtype={self.dtype}, "
                f"grid={self.dmap.grid}, rank={self.ctx.rank})")


def _is_full_slice(key, ndim):
    if key is Ellipsis:
        return True
    if isinstance(key, slice):
        key = (key,)
    if not isinstance(key, tuple) or len(key) != ndim:
        return False
    return all(isinstance(k, slice) and k == slice(None) for k in key)


def _owned_boxes(owned_per_dim):
    """Cartesian product of per-dimension owned intervals, lexicographic."""
    if any(len(iv) == 0 for iv in owned_per_dim):
        return []
    return [tuple(c) for c in itertools.product(*owned_per_dim)]


# --- factories -----------------------------------------------------------


def zeros(shape, dmap=1, dtype=np.float64, ctx=None):
    """Distributed zeros; a plain numpy array when maps are turned off."""
    if is_serial_map(dmap):
        return np.zeros(shape, dtype=_check_dtype(dtype))
    return DArray(shape, dtype, dmap, ctx)


def ones(shape, dmap=1, dtype=np.float64, ctx=None):
    return constant(1, shape, dmap, dtype, ctx)


def constant(value, shape, dmap=1, dtype=np.float64, ctx=None):
    if is_serial_map(dmap):
        return np.full(shape, value, dtype=_check_dtype(dtype))
    a = DArray(shape, dtype, dmap, ctx)
    a.local.fill(value)
    return a


_MASK64 = (1 << 64) - 1


def _splitmix64(z):
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix_seed(seed, rank):
    """Per-rank stream seed: splitmix64 of the user seed and the rank."""
    return _splitmix64((seed & _MASK64) ^ _splitmix64(rank))


def rand(shape, dmap=1, seed=None, dtype=np.float64, ctx=None):
    """Uniform [0, 1) random array.

    Each rank draws from its own stream: the seed is mixed with the
    rank, so two ranks never repeat each other.  Without a seed the
    streams come from OS entropy and differ per process anyway.
    """
    if is_serial_map(dmap):
        rank = ctx.rank if ctx is not None else 0
        rng = np.random.default_rng(None if seed is None else mix_seed(seed, rank))
        return rng.random(shape).astype(dtype, copy=False)
    a = DArray(shape, dtype, dmap, ctx)
    rng = np.random.default_rng(
        None if seed is None else mix_seed(seed, ctx.rank))
    a.local[...] = rng.random(a.local.shape)
    return a


# --- support functions (total over plain arrays) -------------------------


def local(a):
    """The local owned(+ghost) part; plain arrays pass through whole."""
    return a.local if isinstance(a, DArray) else a


def put_local(a, data):
    """Replace the local part; inverse of local()."""
    data = np.asarray(data)
    target = a.local if isinstance(a, DArray) else a
    if data.shape != target.shape:
        raise MapError(f"put_local shape {data.shape} != local {target.shape}")
    np.copyto(target, data)


def inmap(dmap, rank):
    """Does the rank hold data under this map?  Serial maps hold everywhere."""
    if is_serial_map(dmap):
        return True
    return rank in dmap.procs


def grid(a):
    """Processor ranks arranged on the map's grid."""
    m = a.dmap if isinstance(a, DArray) else a
    if is_serial_map(m):
        return np.array([0])
    order = "C" if m.order == "row" else "F"
    return np.array(m.procs).reshape(m.grid, order=order)


def global_block_range(a, rank):
    """Owned global [lo, hi) intervals per dimension for one rank."""
    if not isinstance(a, DArray):
        a = np.asarray(a)
        return tuple(((0, e),) for e in a.shape)
    if rank not in a.dmap.procs:
        raise MapError(f"rank {rank} is not in the processor list")
    coord = rank_to_coord(a.dmap, rank)
    return tuple(
        local_extent(a.shape[d], a.dmap.dists[d], a.dmap.grid[d], coord[d]).owned
        for d in range(a.ndim))


def global_block_ranges(a):
    if not isinstance(a, DArray):
        return [global_block_range(a, 0)]
    return [global_block_range(a, r) for r in a.dmap.procs]


# --- collective operations ------------------------------------------------


def _rank_owned_boxes(shape, dmap, rank):
    coord = rank_to_coord(dmap, rank)
    per_dim = [local_extent(shape[d], dmap.dists[d], dmap.grid[d], coord[d]).owned
               for d in range(len(shape))]
    return _owned_boxes(per_dim)


def _extract_concat(darr, blocks):
    if not blocks:
        return np.zeros(0, dtype=darr.dtype)
    parts = [darr.local[darr._box_slices(b)].reshape(-1) for b in blocks]
    return np.concatenate(parts) if len(parts) > 1 else parts[0].copy()


def _paste_flat(darr, blocks, flat):
    off = 0
    for b in blocks:
        sl = darr._box_slices(b)
        n = 1
        for lo, hi in b:
            n *= hi - lo
        darr.local[sl] = flat[off:off + n].reshape(
            tuple(hi - lo for lo, hi in b))
        off += n
    if off != flat.size:
        raise MapError(f"redistribution payload size mismatch: {flat.size} vs {off}")


def _grouped(transfers):
    """Deterministic {(sender, receiver): [blocks]} grouping."""
    groups = {}
    for t in transfers:
        groups.setdefault((t.sender, t.receiver), []).append(t.block)
    return dict(sorted(groups.items()))


def _execute_transfers(ctx, sched, src, dst, lanes):
    """Run schedule transfers over the messaging layer.

    Every transfer is carried as a message, one per (sender, receiver)
    pair and lane, self-pairs included: the message file is the unit of
    accounting the transfer matrix promises.  All sends are posted
    before any receive is drained, so the exchange is one-sided.
    """
    seq = ctx.next_collective_seq()
    plan = []
    for base_tag, transfers in lanes:
        groups = _grouped(transfers)
        plan.append((base_tag + seq, groups))
    me = ctx.rank
    for tag, groups in plan:
        for (sender, receiver), blocks in groups.items():
            if sender == me:
                fsmpi.send(ctx, receiver, tag,
                           fsmpi.TypedPayload.from_array(_extract_concat(src, blocks)))
    for tag, groups in plan:
        for (sender, receiver), blocks in groups.items():
            if receiver == me:
                flat = fsmpi.recv(ctx, sender, tag).to_array()
                _paste_flat(dst, blocks, flat.astype(dst.dtype, copy=False))


def assign_redistribute(dst, src):
    """Whole-array assignment dst[...] = src with redistribution.

    With identical maps this is a pure local copy and sends nothing.
    Otherwise the schedule between the two maps is executed: every rank
    posts all its outgoing blocks first, then drains its incoming ones,
    and destination ghost regions are refreshed from the source owners.
    A plain-array source is copied locally on every rank with no
    messages (each rank already sees the whole thing).
    """
    if not isinstance(dst, DArray):
        raise MapError("assignment target must be a distributed array")
    ctx = dst.ctx
    if not isinstance(src, DArray):
        src = np.asarray(src)
        if src.shape != dst.shape:
            raise MapError(f"shape mismatch: {src.shape} -> {dst.shape}")
        if dst.local.size:
            dst.local[...] = src[np.ix_(*[g for g in dst._gidx])]
        return
    if src.shape != dst.shape:
        raise MapError(f"shape mismatch: {src.shape} -> {dst.shape}")
    if src.dtype != dst.dtype:
        raise MapError(f"element type mismatch: {src.dtype} -> {dst.dtype}")
    if src.dmap == dst.dmap:
        dst.local[...] = src.local
        return
    sched = compute_schedule(dst.shape, src.dmap, dst.dmap)
    try:
        _execute_transfers(ctx, sched, src, dst,
                           [(fsmpi.TAG_REDIST, sched.data_transfers()),
                            (fsmpi.TAG_REDIST_GHOST, sched.ghost_transfers())])
    except fsmpi.FsmpiError as exc:
        raise fsmpi.FsmpiError(
            f"redistribution {src.dmap} -> {dst.dmap} failed: {exc}") from exc


def sync_overlap(a):
    """Refresh ghost regions from their owning ranks under a's own map."""
    sched = compute_schedule(a.shape, a.dmap, a.dmap)
    _execute_transfers(a.ctx, sched, a, a,
                       [(fsmpi.TAG_REDIST_GHOST, sched.ghost_transfers())])


def agg(a, ctx=None):
    """Aggregate the global array onto the leader rank.

    The leader (lowest rank in the processor list) returns the
    assembled array; every other rank returns its local part.  Plain
    arrays are returned unchanged.  Collective: all ranks must call.
    """
    if not isinstance(a, DArray):
        return a
    ctx = a.ctx if ctx is None else ctx
    seq = ctx.next_collective_seq()
    tag = fsmpi.TAG_AGG + seq
    leader = min(a.dmap.procs)
    me = ctx.rank
    if me == leader:
        full = np.zeros(a.shape, dtype=a.dtype)
        for b in a.owned_boxes():
            full[tuple(slice(lo, hi) for lo, hi in b)] = a.local[a._box_slices(b)]
        for r in sorted(a.dmap.procs):
            if r == leader:
                continue
            flat = fsmpi.recv(ctx, r, tag).to_array()
            off = 0
            for b in _rank_owned_boxes(a.shape, a.dmap, r):
                n = 1
                for lo, hi in b:
                    n *= hi - lo
                full[tuple(slice(lo, hi) for lo, hi in b)] = \
                    flat[off:off + n].reshape(tuple(hi - lo for lo, hi in b))
                off += n
        return full
    if me in a.dmap.procs:
        fsmpi.send(ctx, leader, tag,
                   fsmpi.TypedPayload.from_array(_extract_concat(a, a.owned_boxes())))
    return a.local


def agg_all(a, ctx=None):
    """agg plus a broadcast: every rank returns the full array."""
    if not isinstance(a, DArray):
        return a
    ctx = a.ctx if ctx is None else ctx
    full = agg(a, ctx)
    leader = min(a.dmap.procs)
    payload = fsmpi.TypedPayload.from_array(full) if ctx.rank == leader else None
    return fsmpi.bcast(ctx, leader, payload).to_array()


def synch(ctx):
    """Barrier: no rank returns until every rank has entered.

    Gather-to-0 then broadcast release, both on reserved tag lanes; the
    collective counter keeps back-to-back barriers from colliding.
    """
    if ctx.size == 1:
        ctx.next_collective_seq()  # keep counters aligned with size>1 logic
        fsmpi  # no messages needed
        return
    seq = ctx.next_collective_seq()
    tag = fsmpi.TAG_SYNC + seq
    token = fsmpi.TypedPayload.from_array(np.array([ctx.rank], dtype=np.uint64))
    if ctx.rank == 0:
        for r in range(1, ctx.size):
            fsmpi.recv(ctx, r, tag)
        fsmpi.bcast(ctx, 0, token)
    else:
        fsmpi.send(ctx, 0, tag, token)
        fsmpi.bcast(ctx, 0)
