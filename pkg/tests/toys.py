"""Small networks shared by the test modules."""

from __future__ import annotations

import numpy as np

from utnmpc.network import topology_from_dict


def _link(i, up, down, capacity=400.0, lanes=1, sat=1.0, speed=40.0):
    return {"id": i, "upstream": up, "downstream": down, "capacity": capacity, "lanes": lanes,
            "free_speed": speed, "sat_flow": sat}


def two_link(cycle=120.0, lost=0.0, capacity=400.0, sat=0.5):
    """Source link 1 -> junction 1 -> sink link 2."""
    return topology_from_dict({
        "defaults": {"cycle_time": cycle, "lost_time": lost},
        "links": [_link(1, None, 1, capacity, sat=sat), _link(2, 1, None, capacity, sat=sat)],
        "junctions": [{"id": 1}],
        "turning": {1: {2: 1.0}},
        "partition": [{"id": 1, "center": 1, "links": [1, 2]}],
    })


def two_subsystems(cycle=60.0, lost=6.0, capacity=400.0, sat=1.0):
    """Sources 1, 2 merge at junction 1 into link 3; link 3 and source 4 merge
    at junction 2 into sink 5.  Subsystem 1 owns {1, 2}, subsystem 2 {3, 4, 5}."""
    return topology_from_dict({
        "defaults": {"cycle_time": cycle, "lost_time": lost},
        "links": [_link(1, None, 1, capacity, sat=sat), _link(2, None, 1, capacity, sat=sat),
                  _link(3, 1, 2, capacity, sat=sat), _link(4, None, 2, capacity, sat=sat),
                  _link(5, 2, None, capacity, sat=sat)],
        "junctions": [{"id": 1}, {"id": 2}],
        "turning": {1: {3: 1.0}, 2: {3: 1.0}, 3: {5: 1.0}, 4: {5: 1.0}},
        "partition": [{"id": 1, "center": 1, "links": [1, 2]}, {"id": 2, "center": 2, "links": [3, 4, 5]}],
    })


def random_network(rng: np.random.Generator, n_junctions: int, cyclic: bool = True):
    """Random valid topology with one subsystem per junction.

    Every junction gets a source and a sink; internal links join random
    junction pairs (only increasing ids unless ``cyclic``).  Cycle times are
    60 or 120 s so the common interval is 120 s.
    """
    links, lid = [], 1
    for j in range(1, n_junctions + 1):
        links.append(_link(lid, None, j, float(rng.uniform(300, 1000)), int(rng.integers(1, 3)),
                           float(rng.uniform(0.5, 1.5))))
        lid += 1
    for a in range(1, n_junctions + 1):
        for b in range(1, n_junctions + 1):
            if a == b or (not cyclic and b < a) or rng.random() > 0.5:
                continue
            links.append(_link(lid, a, b, float(rng.uniform(300, 1000)), int(rng.integers(1, 3)),
                               float(rng.uniform(0.5, 1.5))))
            lid += 1
    for j in range(1, n_junctions + 1):
        links.append(_link(lid, j, None, 1000.0, 3, 3.0))
        lid += 1
    turning = {}
    for l in links:
        if l["downstream"] is None:
            continue
        outs = [m["id"] for m in links if m["upstream"] == l["downstream"]]
        w = rng.dirichlet(np.ones(len(outs)))
        w = w / w.sum()
        row = {d: float(v) for d, v in zip(outs, w)}
        # absorb rounding so the row sums to one exactly enough
        row[outs[-1]] = 1.0 - sum(row[d] for d in outs[:-1])
        turning[l["id"]] = row
    partition = []
    for j in range(1, n_junctions + 1):
        own = [l["id"] for l in links if l["downstream"] == j or (l["downstream"] is None and l["upstream"] == j)]
        partition.append({"id": j, "center": j, "links": own})
    junctions = [{"id": j, "cycle_time": float(rng.choice([60.0, 120.0])), "lost_time": 6.0}
                 for j in range(1, n_junctions + 1)]
    return topology_from_dict({"links": links, "junctions": junctions, "turning": turning,
                               "partition": partition})
