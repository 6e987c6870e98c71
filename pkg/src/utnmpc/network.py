"""Network topology: links, junctions, turning fractions and the subsystem partition.

Topologies are described in a YAML file with four main sections::

    defaults:                 # optional, applied where an entry omits a field
      veh_length: 7.0         # m
      cycle_time: 120.0       # s
      lost_time: 10.0         # s
    links:
      - {id: 1, upstream: null, downstream: 1, capacity: 1000,
         lanes: 2, free_speed: 40, sat_flow: 1.0}
    junctions:
      - {id: 1, cycle_time: 120, lost_time: 10, offsets: {2: 0.0},
         phase_streams: [[1, 10], [1, 7]]}        # phase_streams optional
    turning:
      1: {10: 0.7, 7: 0.3}    # beta[from][to]; sink links have no row
    partition:
      - {id: 1, center: 1, links: [1, 2, 3]}

Optional top-level keys: ``stream_capacity`` (list of ``{from, to, capacity}``),
``neighbors`` (explicit ``{subsystem: [subsystems]}``; derived from boundary
links when absent) and ``turning_profile`` (list of turning tables, one per
control step, for time-varying fractions).

Units: capacity in vehicles, free_speed in km/h, sat_flow in veh/s, lengths in
metres, times in seconds.  A link with ``upstream: null`` is a network entry
(source); ``downstream: null`` marks an exit (sink) link.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Mapping

import yaml

BETA_TOL = 1e-12


class ConfigParseError(ValueError):
    """The configuration text could not be parsed."""


class TopologyError(ValueError):
    """A topology invariant does not hold."""


@dataclass(frozen=True)
class LinkParams:
    id: int
    upstream_junction: int | None
    downstream_junction: int | None
    capacity: float
    lanes: int
    free_speed: float  # km/h
    sat_flow: float  # veh/s
    veh_length: float = 7.0

    @property
    def is_source(self) -> bool:
        return self.upstream_junction is None

    @property
    def is_sink(self) -> bool:
        return self.downstream_junction is None

    @property
    def free_speed_ms(self) -> float:
        return self.free_speed / 3.6


@dataclass(frozen=True)
class JunctionParams:
    id: int
    cycle_time: float
    lost_time: float
    incoming_links: tuple[int, ...]
    phase_streams: tuple[tuple[int, int], ...]
    offsets: tuple[tuple[int, float], ...] = ()

    def offset_to(self, other: int) -> float:
        return dict(self.offsets).get(other, 0.0)


@dataclass(frozen=True)
class TurningTable:
    """Turning fractions ``beta[z][d]``, optionally varying per control step."""

    beta: tuple[tuple[int, tuple[tuple[int, float], ...]], ...]
    profile: tuple[tuple[tuple[int, tuple[tuple[int, float], ...]], ...], ...] = ()

    @staticmethod
    def from_mapping(beta: Mapping, profile=()) -> "TurningTable":
        return TurningTable(_freeze_beta(beta), tuple(_freeze_beta(b) for b in profile))

    def as_dict(self, step: int | None = None) -> dict[int, dict[int, float]]:
        table = self.beta
        if step is not None and self.profile:
            table = self.profile[min(step, len(self.profile) - 1)]
        return {z: dict(row) for z, row in table}

    def fraction(self, z: int, d: int, step: int | None = None) -> float:
        return self.as_dict(step).get(z, {}).get(d, 0.0)


def _freeze_beta(beta: Mapping) -> tuple:
    return tuple(
        (int(z), tuple((int(d), float(v)) for d, v in sorted(row.items())))
        for z, row in sorted(beta.items())
    )


@dataclass(frozen=True)
class Subsystem:
    id: int
    center: int
    links: tuple[int, ...]


@dataclass(frozen=True)
class SubsystemPartition:
    subsystems: tuple[Subsystem, ...]
    neighbor_map: tuple[tuple[int, tuple[int, ...]], ...]

    def neighbors(self, m: int) -> tuple[int, ...]:
        return dict(self.neighbor_map).get(m, ())

    def by_id(self, m: int) -> Subsystem:
        for s in self.subsystems:
            if s.id == m:
                return s
        raise KeyError(m)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.subsystems)


@dataclass(frozen=True)
class NetworkTopology:
    links: tuple[LinkParams, ...]
    junctions: tuple[JunctionParams, ...]
    turning: TurningTable
    partition: SubsystemPartition
    stream_capacity: tuple[tuple[tuple[int, int], float], ...] = field(default=())

    # -- lookups ---------------------------------------------------------
    @cached_property
    def link_by_id(self) -> dict[int, LinkParams]:
        return {l.id: l for l in self.links}

    @cached_property
    def junction_by_id(self) -> dict[int, JunctionParams]:
        return {j.id: j for j in self.junctions}

    def link(self, z: int) -> LinkParams:
        return self.link_by_id[z]

    def junction(self, j: int) -> JunctionParams:
        return self.junction_by_id[j]

    @cached_property
    def link_ids(self) -> tuple[int, ...]:
        return tuple(l.id for l in self.links)

    @cached_property
    def streams(self) -> tuple[tuple[int, int], ...]:
        """All turning movements ``(from, to)`` with positive fraction, sorted."""
        out = []
        for z, row in self.turning.beta:
            for d, b in row:
                if b > 0.0:
                    out.append((z, d))
        return tuple(sorted(out))

    @cached_property
    def controlled_streams(self) -> tuple[tuple[int, int], ...]:
        """Streams carrying a green-time decision, grouped by junction id."""
        out = []
        for j in sorted(self.junction_by_id):
            out.extend(sorted(self.junction(j).phase_streams))
        return tuple(out)

    def out_streams(self, z: int) -> tuple[tuple[int, int], ...]:
        return tuple(s for s in self.streams if s[0] == z)

    def in_streams(self, z: int) -> tuple[tuple[int, int], ...]:
        return tuple(s for s in self.streams if s[1] == z)

    def outgoing_links(self, j: int) -> tuple[int, ...]:
        return tuple(l.id for l in self.links if l.upstream_junction == j)

    @cached_property
    def cycle_of_link(self) -> dict[int, float]:
        """Clock of each link: its downstream junction, or upstream for sinks."""
        out = {}
        for l in self.links:
            j = l.downstream_junction if l.downstream_junction is not None else l.upstream_junction
            out[l.id] = self.junction(j).cycle_time
        return out

    @cached_property
    def stream_capacities(self) -> dict[tuple[int, int], float]:
        """``C_{z,d}``; defaults to the capacity of ``d`` split by incoming beta."""
        explicit = dict(self.stream_capacity)
        out = {}
        for z, d in self.streams:
            if (z, d) in explicit:
                out[(z, d)] = explicit[(z, d)]
            else:
                out[(z, d)] = self.link(d).capacity * self.inflow_share(z, d)
        return out

    def inflow_share(self, z: int, d: int, step: int | None = None) -> float:
        """``beta[z][d] / sum_u beta[u][d]``: share of ``d`` fed by ``z``."""
        beta = self.turning.as_dict(step)
        tot = sum(row.get(d, 0.0) for row in beta.values())
        return beta.get(z, {}).get(d, 0.0) / tot if tot > 0 else 0.0

    @cached_property
    def subsystem_of_link(self) -> dict[int, int]:
        out = {}
        for s in self.partition.subsystems:
            for z in s.links:
                out[z] = s.id
        return out

    @cached_property
    def sweep_order(self) -> tuple[int, ...]:
        """Links ordered so that upstream links precede their successors.

        Kahn's algorithm on the stream graph; on a cycle the lowest remaining
        id is released first, which turns the closing stream into a back edge.
        """
        preds = {z: set() for z in self.link_ids}
        for z, d in self.streams:
            preds[d].add(z)
        done: list[int] = []
        remaining = set(self.link_ids)
        while remaining:
            ready = sorted(z for z in remaining if not (preds[z] & remaining))
            if not ready:
                ready = [min(remaining)]
            z = ready[0]
            done.append(z)
            remaining.remove(z)
        return tuple(done)

    @property
    def uniform_cycle(self) -> bool:
        return len({j.cycle_time for j in self.junctions}) == 1


# ---------------------------------------------------------------------------
# validation


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise TopologyError(msg)


def validate_topology(t: NetworkTopology) -> None:
    """Raise :class:`TopologyError` on the first violated invariant."""
    ids = [l.id for l in t.links]
    _check(len(set(ids)) == len(ids), "duplicate link id")
    jids = [j.id for j in t.junctions]
    _check(len(set(jids)) == len(jids), "duplicate junction id")
    for l in t.links:
        _check(l.capacity > 0, f"link {l.id}: capacity must be > 0")
        _check(l.lanes >= 1, f"link {l.id}: lanes must be >= 1")
        _check(l.free_speed > 0, f"link {l.id}: free_speed must be > 0")
        _check(l.sat_flow > 0, f"link {l.id}: sat_flow must be > 0")
        _check(l.veh_length > 0, f"link {l.id}: veh_length must be > 0")
        for j in (l.upstream_junction, l.downstream_junction):
            _check(j is None or j in t.junction_by_id, f"link {l.id}: unknown junction {j}")
        _check(not (l.is_source and l.is_sink), f"link {l.id}: cannot be both source and sink")
    for j in t.junctions:
        _check(j.cycle_time > 0, f"junction {j.id}: cycle_time must be > 0")
        _check(0 <= j.lost_time < j.cycle_time, f"junction {j.id}: need 0 <= lost_time < cycle_time")
        expected = tuple(sorted(l.id for l in t.links if l.downstream_junction == j.id))
        _check(tuple(sorted(j.incoming_links)) == expected,
               f"junction {j.id}: incoming_links {j.incoming_links} do not match links {expected}")
        phased = {s[0] for s in j.phase_streams}
        for z in j.incoming_links:
            _check(z in phased, f"junction {j.id}: incoming link {z} has no phase stream")
        for z, d in j.phase_streams:
            _check(z in j.incoming_links, f"junction {j.id}: phase stream ({z},{d}) not from an incoming link")
            _check(t.turning.fraction(z, d) > 0, f"junction {j.id}: phase stream ({z},{d}) has zero turning fraction")
        for other, _ in j.offsets:
            _check(other in t.junction_by_id, f"junction {j.id}: offset to unknown junction {other}")

    tables = [t.turning.as_dict()] + [t.turning.as_dict(k) for k in range(len(t.turning.profile))]
    for beta in tables:
        for z, row in beta.items():
            _check(z in t.link_by_id, f"turning: unknown link {z}")
            link = t.link(z)
            _check(not link.is_sink, f"turning: sink link {z} must not have a turning row")
            outs = set(t.outgoing_links(link.downstream_junction))
            for d, b in row.items():
                _check(0.0 <= b <= 1.0, f"turning: beta[{z}][{d}] = {b} outside [0, 1]")
                _check(b == 0.0 or d in outs,
                       f"turning: link {d} is not an outgoing link of link {z}'s downstream junction")
            s = sum(row.values())
            _check(abs(s - 1.0) <= BETA_TOL, f"turning: fractions of link {z} sum to {s!r}, expected 1")
        for l in t.links:
            _check(l.is_sink or l.id in beta, f"turning: non-sink link {l.id} has no turning row")

    phased = {s for j in t.junctions for s in j.phase_streams}
    for z, d in t.streams:
        if not t.link(z).is_sink:
            _check((z, d) in phased, f"stream ({z},{d}) has no green-time decision")
    for (z, d), cap in t.stream_capacity:
        _check((z, d) in t.streams, f"stream_capacity: ({z},{d}) is not a stream")
        _check(cap > 0, f"stream_capacity: ({z},{d}) must be > 0")

    diags = validate_partition(t)
    _check(not diags, "partition: " + "; ".join(diags))


def validate_partition(t: NetworkTopology) -> list[str]:
    """Diagnostics for the subsystem partition; empty when it is valid."""
    diags = []
    owner: dict[int, list[int]] = {}
    for s in t.partition.subsystems:
        if s.center not in t.junction_by_id:
            diags.append(f"subsystem {s.id}: unknown center junction {s.center}")
        for z in s.links:
            owner.setdefault(z, []).append(s.id)
    for z in t.link_ids:
        if z not in owner:
            diags.append(f"unowned link {z}")
        elif len(owner[z]) > 1:
            diags.append(f"link {z} owned by several subsystems {owner[z]}")
    for z in owner:
        if z not in t.link_by_id:
            diags.append(f"partition references unknown link {z}")
    nmap = dict(t.partition.neighbor_map)
    for m, ns in sorted(nmap.items()):
        for i in ns:
            if m not in nmap.get(i, ()):
                diags.append(f"asymmetric neighbor: {i} in N({m}) but {m} not in N({i})")
    return diags


def derive_neighbors(links, subsystems) -> tuple[tuple[int, tuple[int, ...]], ...]:
    """Subsystems are neighbors when a link owned by one touches the other's center."""
    owner = {z: s.id for s in subsystems for z in s.links}
    center_of = {s.center: s.id for s in subsystems}
    nb: dict[int, set[int]] = {s.id: set() for s in subsystems}
    for l in links:
        m = owner.get(l.id)
        for j in (l.upstream_junction, l.downstream_junction):
            i = center_of.get(j)
            if m is not None and i is not None and i != m:
                nb[m].add(i)
                nb[i].add(m)
    return tuple((m, tuple(sorted(v))) for m, v in sorted(nb.items()))


# ---------------------------------------------------------------------------
# config text


def _opt_int(v):
    return None if v is None else int(v)


def topology_from_dict(doc: Mapping) -> NetworkTopology:
    if not isinstance(doc, Mapping):
        raise ConfigParseError("topology config must be a mapping")
    for key in ("links", "junctions", "turning", "partition"):
        if key not in doc:
            raise ConfigParseError(f"missing section [{key}]")
    defaults = doc.get("defaults") or {}
    try:
        links = tuple(
            LinkParams(
                id=int(e["id"]),
                upstream_junction=_opt_int(e.get("upstream")),
                downstream_junction=_opt_int(e.get("downstream")),
                capacity=float(e["capacity"]),
                lanes=int(e["lanes"]),
                free_speed=float(e["free_speed"]),
                sat_flow=float(e["sat_flow"]),
                veh_length=float(e.get("veh_length", defaults.get("veh_length", 7.0))),
            )
            for e in doc["links"]
        )
        beta = {int(z): {int(d): float(b) for d, b in row.items()} for z, row in doc["turning"].items()}
        turning = TurningTable.from_mapping(beta, [
            {int(z): {int(d): float(b) for d, b in row.items()} for z, row in tab.items()}
            for tab in doc.get("turning_profile") or []
        ])
        junctions = []
        for e in doc["junctions"]:
            jid = int(e["id"])
            incoming = tuple(sorted(l.id for l in links if l.downstream_junction == jid))
            if "phase_streams" in e and e["phase_streams"] is not None:
                phases = tuple(sorted((int(a), int(b)) for a, b in e["phase_streams"]))
            else:
                phases = tuple(sorted((z, d) for z in incoming for d, b in beta.get(z, {}).items() if b > 0))
            offsets = tuple(sorted((int(k), float(v)) for k, v in (e.get("offsets") or {}).items()))
            junctions.append(JunctionParams(
                id=jid,
                cycle_time=float(e.get("cycle_time", defaults.get("cycle_time", 120.0))),
                lost_time=float(e.get("lost_time", defaults.get("lost_time", 0.0))),
                incoming_links=incoming,
                phase_streams=phases,
                offsets=offsets,
            ))
        subsystems = tuple(
            Subsystem(id=int(e["id"]), center=int(e["center"]), links=tuple(int(z) for z in e["links"]))
            for e in doc["partition"]
        )
        if doc.get("neighbors") is not None:
            nmap = tuple(sorted((int(m), tuple(sorted(int(i) for i in v))) for m, v in doc["neighbors"].items()))
        else:
            nmap = derive_neighbors(links, subsystems)
        scap = tuple(sorted(((int(e["from"]), int(e["to"])), float(e["capacity"]))
                            for e in doc.get("stream_capacity") or []))
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ConfigParseError(f"malformed topology entry: {exc!r}") from exc
    topo = NetworkTopology(
        links=links,
        junctions=tuple(junctions),
        turning=turning,
        partition=SubsystemPartition(subsystems, nmap),
        stream_capacity=scap,
    )
    validate_topology(topo)
    return topo


def load_topology(config_text: str) -> NetworkTopology:
    """Parse and validate a YAML topology description."""
    try:
        doc = yaml.safe_load(config_text)
    except yaml.YAMLError as exc:
        raise ConfigParseError(str(exc)) from exc
    return topology_from_dict(doc)


def load_topology_file(path) -> NetworkTopology:
    with open(path, encoding="utf-8") as fh:
        return load_topology(fh.read())


def topology_to_dict(t: NetworkTopology) -> dict:
    doc = {
        "links": [
            {"id": l.id, "upstream": l.upstream_junction, "downstream": l.downstream_junction,
             "capacity": l.capacity, "lanes": l.lanes, "free_speed": l.free_speed,
             "sat_flow": l.sat_flow, "veh_length": l.veh_length}
            for l in t.links
        ],
        "junctions": [
            {"id": j.id, "cycle_time": j.cycle_time, "lost_time": j.lost_time,
             "offsets": dict(j.offsets), "phase_streams": [list(s) for s in j.phase_streams]}
            for j in t.junctions
        ],
        "turning": t.turning.as_dict(),
        "partition": [{"id": s.id, "center": s.center, "links": list(s.links)} for s in t.partition.subsystems],
        "neighbors": {m: list(v) for m, v in t.partition.neighbor_map},
    }
    if t.turning.profile:
        doc["turning_profile"] = [t.turning.as_dict(k) for k in range(len(t.turning.profile))]
    if t.stream_capacity:
        doc["stream_capacity"] = [{"from": z, "to": d, "capacity": c} for (z, d), c in t.stream_capacity]
    return doc


def serialize_topology(t: NetworkTopology) -> str:
    return yaml.safe_dump(topology_to_dict(t), sort_keys=False, default_flow_style=None)


def default_benchmark() -> NetworkTopology:
    """The shipped 8-junction, 17-link benchmark network."""
    text = resources.files("utnmpc.data").joinpath("benchmark_8x17.yaml").read_text(encoding="utf-8")
    return load_topology(text)


def describe(t: NetworkTopology) -> str:
    lines = [f"{len(t.junctions)} junctions, {len(t.links)} links, "
             f"{len(t.partition.subsystems)} subsystems, {len(t.controlled_streams)} controlled streams"]
    for l in t.links:
        kind = "source" if l.is_source else "sink" if l.is_sink else "internal"
        lines.append(f"  link {l.id:>3}: {str(l.upstream_junction):>4} -> {str(l.downstream_junction):<4} "
                     f"{kind:<8} C={l.capacity:g} lanes={l.lanes} v={l.free_speed:g} mu={l.sat_flow:g}")
    for j in t.junctions:
        lines.append(f"  junction {j.id}: c={j.cycle_time:g} L={j.lost_time:g} streams={list(j.phase_streams)}")
    for s in t.partition.subsystems:
        lines.append(f"  subsystem {s.id}: center {s.center} links {list(s.links)} "
                     f"neighbors {list(t.partition.neighbors(s.id))}")
    return "\n".join(lines)
