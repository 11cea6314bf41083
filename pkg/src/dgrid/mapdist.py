"""Declarative data-distribution maps.

A map couples a processor grid with a per-dimension distribution rule
(block, cyclic or block-cyclic), a ghost-cell overlap, an explicit
processor list and a grid ordering convention.  Maps are pure metadata:
they describe where the elements of a global array live, never how they
get there.  Everything here is immutable and safe to share.
"""

from dataclasses import dataclass, field

MAX_DIMS = 4


class MapError(ValueError):
    """Invalid map construction or use."""


@dataclass(frozen=True)
class DistSpec:
    """Distribution rule for one array dimension.

    kind is 'b' (block), 'c' (cyclic) or 'bc' (block-cyclic).  block is
    the chunk size and is required for 'bc'; cyclic behaves exactly like
    block-cyclic with a chunk of one.
    """

    kind: str
    block: int | None = None

    def __post_init__(self):
        if self.kind not in ("b", "c", "bc"):
            raise MapError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "bc":
            if self.block is None:
                raise MapError("block-cyclic distribution needs a block size")
            if self.block < 1:
                raise MapError(f"block size must be >= 1, got {self.block}")
        elif self.block is not None:
            raise MapError(f"distribution {self.kind!r} takes no block size")

    @staticmethod
    def parse(token):
        """Parse 'b', 'c' or 'bc<k>' (e.g. 'bc3'); DistSpec passes through."""
        if isinstance(token, DistSpec):
            return token
        if not isinstance(token, str):
            raise MapError(f"cannot parse distribution from {token!r}")
        t = token.strip()
        if t == "b":
            return DistSpec("b")
        if t == "c":
            return DistSpec("c")
        if t.startswith("bc"):
            try:
                return DistSpec("bc", int(t[2:]))
            except ValueError:
                raise MapError(f"bad block-cyclic token {token!r}") from None
        raise MapError(f"unknown distribution token {token!r}")

    def token(self):
        return f"bc{self.block}" if self.kind == "bc" else self.kind


BLOCK = DistSpec("b")
CYCLIC = DistSpec("c")


@dataclass(frozen=True)
class Map:
    """Assignment of a global array onto a processor grid.

    grid      processors per dimension, 1 to 4 dims
    dists     one DistSpec per dimension
    overlap   ghost indices replicated toward the next-higher neighbor
    procs     global ranks holding data, one per grid cell
    order     'row' fills the last grid dimension fastest, 'col' the first
    """

    grid: tuple
    dists: tuple
    overlap: tuple
    procs: tuple
    order: str = "row"

    def __post_init__(self):
        nd = len(self.grid)
        if not 1 <= nd <= MAX_DIMS:
            raise MapError(f"grid must have 1..{MAX_DIMS} dims, got {nd}")
        if any(not isinstance(g, int) or g < 1 for g in self.grid):
            raise MapError(f"grid extents must be positive integers: {self.grid}")
        if len(self.dists) != nd or len(self.overlap) != nd:
            raise MapError("grid, dists and overlap must have equal length")
        if any(not isinstance(v, int) or v < 0 for v in self.overlap):
            raise MapError(f"overlap entries must be non-negative: {self.overlap}")
        n = 1
        for g in self.grid:
            n *= g
        if len(self.procs) != n:
            raise MapError(
                f"processor list has {len(self.procs)} entries, grid needs {n}")
        if any(not isinstance(p, int) or p < 0 for p in self.procs):
            raise MapError(f"ranks must be non-negative integers: {self.procs}")
        if len(set(self.procs)) != len(self.procs):
            raise MapError(f"duplicate ranks in processor list: {self.procs}")
        if self.order not in ("row", "col"):
            raise MapError(f"order must be 'row' or 'col', got {self.order!r}")

    @property
    def ndim(self):
        return len(self.grid)

    def __str__(self):
        return format_map_literal(self)


def make_map(grid, dists=None, procs=None, overlap=None, order="row"):
    """Build a validated Map.

    dists may be empty/None (block everywhere), a single spec applied to
    every dimension, or one spec per dimension.  Specs are DistSpec
    objects or shorthand tokens ('b', 'c', 'bc<k>').
    """
    if isinstance(grid, int):
        grid = (grid,)
    grid = tuple(int(g) for g in grid)
    nd = len(grid)
    if dists is None or dists == {} or dists == "" or dists == []:
        dlist = [BLOCK] * nd
    elif isinstance(dists, (str, DistSpec)):
        dlist = [DistSpec.parse(dists)] * nd
    else:
        dlist = [DistSpec.parse(d) for d in dists]
        if len(dlist) == 1:
            dlist = dlist * nd
    if overlap is None:
        overlap = (0,) * nd
    elif isinstance(overlap, int):
        overlap = (overlap,) * nd
    else:
        overlap = tuple(int(v) for v in overlap)
    if procs is None:
        raise MapError("a processor list is required")
    return Map(grid, tuple(dlist), overlap, tuple(int(p) for p in procs), order)


def _strides(grid, order):
    nd = len(grid)
    st = [1] * nd
    if order == "row":
        for d in range(nd - 2, -1, -1):
            st[d] = st[d + 1] * grid[d + 1]
    else:
        for d in range(1, nd):
            st[d] = st[d - 1] * grid[d - 1]
    return st


def rank_to_coord(dmap, rank):
    """Grid coordinate of a rank under the map's ordering."""
    try:
        idx = dmap.procs.index(rank)
    except ValueError:
        raise MapError(f"rank {rank} is not in the processor list") from None
    st = _strides(dmap.grid, dmap.order)
    return tuple((idx // st[d]) % dmap.grid[d] for d in range(dmap.ndim))


def coord_to_rank(dmap, coord):
    """Inverse of rank_to_coord."""
    coord = tuple(coord)
    if len(coord) != dmap.ndim:
        raise MapError(f"coordinate {coord} has wrong rank for grid {dmap.grid}")
    for d, c in enumerate(coord):
        if not 0 <= c < dmap.grid[d]:
            raise MapError(f"coordinate {coord} outside grid {dmap.grid}")
    st = _strides(dmap.grid, dmap.order)
    return dmap.procs[sum(c * s for c, s in zip(coord, st))]


@dataclass(frozen=True)
class Extent:
    """Global index intervals one processor holds along one dimension.

    owned are half-open [lo, hi) intervals partitioning the dimension
    across processors; ghost intervals extend each owned interval by the
    overlap toward the next-higher neighbor, clipped to the dimension.
    Ghost intervals may overlap the processor's own ownership for large
    overlaps; consumers take the union.
    """

    owned: tuple
    ghost: tuple = field(default=())

    def size(self):
        return sum(hi - lo for lo, hi in self.owned)


def block_sizes(dim_size, n_procs):
    """Fair-share block sizes: the remainder goes to the lowest ranks."""
    base, rem = divmod(dim_size, n_procs)
    return [base + 1 if i < rem else base for i in range(n_procs)]


def local_extent(dim_size, dist, n_procs, proc_idx, overlap=0):
    """Owned (and ghost) global intervals of one processor in a dimension."""
    if dim_size < 0:
        raise MapError(f"dimension size must be >= 0, got {dim_size}")
    if not 0 <= proc_idx < n_procs:
        raise MapError(f"processor index {proc_idx} outside [0, {n_procs})")
    dist = DistSpec.parse(dist) if not isinstance(dist, DistSpec) else dist
    owned = []
    if dist.kind == "b":
        base, rem = divmod(dim_size, n_procs)
        if proc_idx < rem:
            lo = proc_idx * (base + 1)
            hi = lo + base + 1
        else:
            lo = rem * (base + 1) + (proc_idx - rem) * base
            hi = lo + base
        if hi > lo:
            owned.append((lo, hi))
    else:
        b = 1 if dist.kind == "c" else dist.block
        k = 0
        while True:
            lo = (k * n_procs + proc_idx) * b
            if lo >= dim_size:
                break
            owned.append((lo, min(dim_size, lo + b)))
            k += 1
    ghost = []
    if overlap > 0:
        for _, hi in owned:
            g = (hi, min(dim_size, hi + overlap))
            if g[1] > g[0]:
                ghost.append(g)
    return Extent(tuple(owned), tuple(ghost))


def is_serial_map(m):
    """True iff the map is "turned off": the scalar 1 or absent.

    Array factories return plain local arrays in that case.  Any scalar
    other than 1 is an error rather than silently serial.
    """
    if m is None:
        return True
    if isinstance(m, Map):
        return False
    if isinstance(m, (int, float)) and not isinstance(m, bool):
        if m == 1:
            return True
        raise MapError(f"only the scalar 1 turns maps off, got {m!r}")
    raise MapError(f"not a map: {m!r}")


# --- textual map literals ------------------------------------------------
#
# grid=2x2;dist=b,c;procs=0-3;overlap=0,1;order=row
#
# procs accepts comma-separated entries, each a rank or an inclusive
# a-b range.  dist/overlap/order may be omitted and default to block,
# zeros and row.


def _parse_procs(text):
    out = []
    for item in text.split(","):
        item = item.strip()
        if "-" in item:
            a, b = item.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(item))
    return out


def _format_procs(procs):
    out = []
    i = 0
    while i < len(procs):
        j = i
        while j + 1 < len(procs) and procs[j + 1] == procs[j] + 1:
            j += 1
        if j > i:
            out.append(f"{procs[i]}-{procs[j]}")
        else:
            out.append(str(procs[i]))
        i = j + 1
    return ",".join(out)


def parse_map_literal(text):
    """Parse the CLI/test map literal into a Map."""
    fields = {}
    for part in text.strip().split(";"):
        if not part:
            continue
        if "=" not in part:
            raise MapError(f"bad map literal field {part!r}")
        key, val = part.split("=", 1)
        fields[key.strip()] = val.strip()
    if "grid" not in fields or "procs" not in fields:
        raise MapError("map literal needs at least grid= and procs=")
    grid = tuple(int(g) for g in fields["grid"].split("x"))
    dists = fields.get("dist", "")
    dlist = [d for d in dists.split(",") if d] if dists else None
    procs = _parse_procs(fields["procs"])
    overlap = None
    if "overlap" in fields:
        overlap = tuple(int(v) for v in fields["overlap"].split(","))
    order = fields.get("order", "row")
    return make_map(grid, dlist, procs, overlap, order)


def format_map_literal(dmap):
    """Canonical literal; parse_map_literal round-trips it."""
    return ";".join([
        "grid=" + "x".join(str(g) for g in dmap.grid),
        "dist=" + ",".join(d.token() for d in dmap.dists),
        "procs=" + _format_procs(dmap.procs),
        "overlap=" + ",".join(str(v) for v in dmap.overlap),
        "order=" + dmap.order,
    ])
