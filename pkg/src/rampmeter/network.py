"""Road network: 1D routes over shared segments of a two-entry roundabout.

Default geometry (every length is config-overridable):

    west route  : entry_west (86.6) -> ring_approach (12) -> ring_shared (35)
                  -> exit_west (309.4); a U-turn through the ring, spanning
                  frame coordinates [0, 443].
    north route : entry_north (74.3) -> ring_shared (35) -> exit_west (309.4),
                  spanning frame coordinates [24.3, 443].
    ring        : ring_approach -> ring_shared -> ring_closure (33) -> back,
                  circumference 80.

Both routes share ring_shared and exit_west; shared segments are mapped to
identical absolute "frame" coordinates so cross-route distance queries reduce
to frame differences.  All query functions are pure; the network is immutable
after construction.
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

NORTH = "north"
WEST = "west"
ROUTE_IDS = (NORTH, WEST)

DEFAULT_SEGMENT_LENGTHS = {
    "entry_north": 74.3,
    "entry_west": 86.6,
    "ring_approach": 12.0,
    "ring_shared": 35.0,
    "ring_closure": 33.0,
    "exit_west": 309.4,
}
_SUCCESSORS = {
    "entry_north": ("ring_shared",),
    "entry_west": ("ring_approach",),
    "ring_approach": ("ring_shared",),
    "ring_shared": ("ring_closure", "exit_west"),
    "ring_closure": ("ring_approach",),
    "exit_west": (),
}
_ROUTE_SEGMENTS = {
    WEST: ("entry_west", "ring_approach", "ring_shared", "exit_west"),
    NORTH: ("entry_north", "ring_shared", "exit_west"),
}
_ROUNDABOUT_IDS = frozenset({"ring_approach", "ring_shared", "ring_closure"})


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    id: str
    length: float
    successors: tuple[str, ...]


@dataclass(frozen=True)
class Route:
    id: str
    segments: tuple[str, ...]
    total_length: float
    starts: tuple[float, ...]       # cumulative start offset of each segment
    frame_offset: float
    suffix_masks: tuple[int, ...]   # bit k set <=> global segment k lies on the path from here on


class RoadNetwork:
    def __init__(self, segments: dict[str, Segment], route_segments: dict[str, tuple[str, ...]],
                 roundabout_ids: frozenset[str]):
        self.segments = dict(segments)
        self.roundabout_ids = frozenset(roundabout_ids)
        self.seg_ids = tuple(sorted(self.segments))
        self._seg_index = {sid: i for i, sid in enumerate(self.seg_ids)}
        self._validate_segments()
        self.routes = {rid: self._build_route(rid, tuple(segs)) for rid, segs in route_segments.items()}
        self._validate_routes()
        self._ring_order, self._ring_start = self._trace_ring()
        self.ring_circumference = sum(self.segments[s].length for s in self._ring_order)
        self.entry_lengths = {rid: self.segments[r.segments[0]].length for rid, r in self.routes.items()}
        self.frame_length = max(r.frame_offset + r.total_length for r in self.routes.values())

    # -- construction / validation -------------------------------------------------

    def _validate_segments(self):
        if len(self.segments) > 64:
            raise NetworkError("at most 64 segments supported (path masks are 64-bit)")
        for seg in self.segments.values():
            if not seg.length > 0:
                raise NetworkError(f"segment {seg.id}: length must be > 0")
            for succ in seg.successors:
                if succ not in self.segments:
                    raise NetworkError(f"segment {seg.id}: unknown successor {succ!r}")
        for rid in self.roundabout_ids:
            if rid not in self.segments:
                raise NetworkError(f"roundabout segment {rid!r} not defined")

    def _build_route(self, rid: str, segs: tuple[str, ...]) -> Route:
        starts, total = [], 0.0
        for prev, cur in zip(segs, segs[1:]):
            if cur not in self.segments[prev].successors:
                raise NetworkError(f"route {rid}: {cur!r} is not a successor of {prev!r}")
        for sid in segs:
            starts.append(total)
            total += self.segments[sid].length
        masks = []
        for k in range(len(segs)):
            m = 0
            for sid in segs[k:]:
                m |= 1 << self._seg_index[sid]
            masks.append(m)
        return Route(id=rid, segments=segs, total_length=total, starts=tuple(starts),
                     frame_offset=0.0, suffix_masks=tuple(masks))

    def _validate_routes(self):
        if WEST not in self.routes or NORTH not in self.routes:
            raise NetworkError("both a 'west' and a 'north' route are required")
        finals = {r.segments[-1] for r in self.routes.values()}
        if len(finals) != 1:
            raise NetworkError("routes must share the west exit segment")
        for r in self.routes.values():
            if r.segments[0] in self.roundabout_ids:
                raise NetworkError(f"route {r.id}: first segment must be an entry, not a ring arc")
        # Anchor the frame on the west route, then align every other route on
        # its first segment shared with west and check all shared segments agree.
        west = self.routes[WEST]
        west_start = {sid: west.starts[i] for i, sid in enumerate(west.segments)}
        aligned = {}
        for rid, r in self.routes.items():
            if rid == WEST:
                aligned[rid] = r
                continue
            offset = None
            for i, sid in enumerate(r.segments):
                if sid in west_start:
                    off = west_start[sid] - r.starts[i]
                    if offset is None:
                        offset = off
                    elif abs(off - offset) > 1e-9:
                        raise NetworkError(f"route {rid}: shared segment {sid!r} breaks frame alignment")
            if offset is None:
                raise NetworkError(f"route {rid}: shares no segment with the west route")
            aligned[rid] = Route(id=r.id, segments=r.segments, total_length=r.total_length,
                                 starts=r.starts, frame_offset=offset, suffix_masks=r.suffix_masks)
        self.routes = aligned

    def _trace_ring(self):
        start = next(s for s in self.routes[WEST].segments if s in self.roundabout_ids)
        order, cur = [], start
        for _ in range(len(self.roundabout_ids)):
            order.append(cur)
            nxt = [s for s in self.segments[cur].successors if s in self.roundabout_ids]
            if len(nxt) != 1:
                raise NetworkError(f"ring segment {cur!r} must have exactly one ring successor")
            cur = nxt[0]
        if cur != start or len(set(order)) != len(self.roundabout_ids):
            raise NetworkError("roundabout segments must form a single directed cycle")
        ring_start = {}
        pos = 0.0
        for sid in order:
            ring_start[sid] = pos
            pos += self.segments[sid].length
        return tuple(order), ring_start

    # -- queries --------------------------------------------------------------------

    def seg_index(self, segment_id: str) -> int:
        return self._seg_index[segment_id]

    def segment_pos(self, route_id: str, progress: float) -> int:
        """Index within the route of the segment containing `progress`."""
        r = self.routes[route_id]
        if progress <= 0.0:
            return 0
        k = bisect_right(r.starts, progress) - 1
        return min(k, len(r.segments) - 1)

    def segment_at(self, route_id: str, progress: float) -> str:
        r = self.routes[route_id]
        return r.segments[self.segment_pos(route_id, progress)]

    def frame(self, route_id: str, progress: float) -> float:
        """Absolute frame coordinate; accepts out-of-route progress (staged vehicles)."""
        return self.routes[route_id].frame_offset + progress

    def position_1d(self, route_id: str, progress: float) -> float:
        r = self.routes[route_id]
        if not 0.0 <= progress <= r.total_length:
            raise ValueError(f"progress {progress} outside route {route_id} [0, {r.total_length}]")
        return r.frame_offset + progress

    def on_roundabout(self, route_id: str, progress: float) -> bool:
        return self.segment_at(route_id, progress) in self.roundabout_ids

    def distance_to_roundabout(self, route_id: str, progress: float) -> float:
        """Distance from the ring along the entry segment; 0 once at or past the ring."""
        if self.segment_pos(route_id, progress) != 0:
            return 0.0
        return max(self.entry_lengths[route_id] - progress, 0.0)

    def ring_coordinate(self, route_id: str, progress: float) -> float:
        """Position around the ring cycle, measured from the west-route ring entry."""
        sid = self.segment_at(route_id, progress)
        if sid not in self.roundabout_ids:
            raise ValueError(f"position not on the roundabout: {route_id} @ {progress}")
        r = self.routes[route_id]
        offset = progress - r.starts[self.segment_pos(route_id, progress)]
        return self._ring_start[sid] + offset

    def merge_ring_coordinate(self, route_id: str) -> float:
        """Ring coordinate at which the route's entry joins the ring."""
        r = self.routes[route_id]
        sid = next(s for s in r.segments if s in self.roundabout_ids)
        return self._ring_start[sid]

    def shared_ring_span(self) -> tuple[float, float]:
        """Frame interval of the merge arc traversed by both routes inside the ring."""
        shared = [s for s in self.routes[NORTH].segments
                  if s in self.roundabout_ids and s in self.routes[WEST].segments]
        if not shared:
            raise NetworkError("routes share no ring segment")
        west = self.routes[WEST]
        starts = [west.starts[west.segments.index(s)] for s in shared]
        ends = [st + self.segments[s].length for st, s in zip(starts, shared)]
        return min(starts), max(ends)


def build_network(lengths: dict[str, float] | None = None,
                  successors: dict[str, tuple[str, ...]] | None = None,
                  route_segments: dict[str, tuple[str, ...]] | None = None,
                  roundabout_ids=None, scale: float = 1.0) -> RoadNetwork:
    lens = dict(DEFAULT_SEGMENT_LENGTHS)
    if lengths:
        unknown = set(lengths) - set(lens) if successors is None else set()
        if unknown:
            raise NetworkError(f"unknown segment ids in length overrides: {sorted(unknown)}")
        lens.update(lengths)
    succ = successors or _SUCCESSORS
    segs = {sid: Segment(id=sid, length=lens[sid] * scale, successors=tuple(succ[sid]))
            for sid in succ}
    return RoadNetwork(segs, route_segments or _ROUTE_SEGMENTS,
                       frozenset(roundabout_ids or _ROUNDABOUT_IDS))


def default_network(scale: float = 1.0) -> RoadNetwork:
    return build_network(scale=scale)


def network_from_dict(spec: dict) -> RoadNetwork:
    """Build a network from a config mapping.

    Either {"segment_lengths": {...}} overriding the default topology, or a
    full description {"segments": [{id,length,successors}], "routes": {...},
    "roundabout": [...]}.
    """
    if "segments" in spec:
        succ = {s["id"]: tuple(s.get("successors", ())) for s in spec["segments"]}
        lens = {s["id"]: float(s["length"]) for s in spec["segments"]}
        routes = {rid: tuple(segs) for rid, segs in spec["routes"].items()}
        return build_network(lens, succ, routes, frozenset(spec["roundabout"]))
    return build_network(lengths=spec.get("segment_lengths"))
