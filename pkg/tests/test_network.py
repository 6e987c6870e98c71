import dataclasses

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from toys import random_network, two_link
from utnmpc.network import (
    ConfigParseError, SubsystemPartition, TopologyError, default_benchmark, load_topology, serialize_topology,
    topology_to_dict, validate_partition,
)

MINIMAL = """
links:
  - {id: 1, upstream: null, downstream: 1, capacity: 100, lanes: 1, free_speed: 40, sat_flow: 0.5}
  - {id: 2, upstream: 1, downstream: null, capacity: 100, lanes: 1, free_speed: 40, sat_flow: 0.5}
junctions:
  - {id: 1, cycle_time: 60, lost_time: 0}
turning:
  1: {2: 1.0}
partition:
  - {id: 1, center: 1, links: [1, 2]}
"""


@pytest.fixture(scope="module")
def bench():
    return default_benchmark()


def test_benchmark_counts(bench):
    assert len(bench.junctions) == 8
    assert len(bench.links) == 17
    assert len(bench.partition.subsystems) == 8


def test_benchmark_parameters(bench):
    assert {j.cycle_time for j in bench.junctions} == {120.0}
    assert {l.capacity for l in bench.links} == {1000.0}
    assert {l.free_speed for l in bench.links} == {40.0}


def test_benchmark_subsystem5_wiring(bench):
    assert bench.partition.neighbors(5) == (1, 4)
    assert set(bench.partition.by_id(5).links) >= {10, 11}
    owner = bench.subsystem_of_link
    feeders_10 = {z for z, d in bench.streams if d == 10}
    feeders_11 = {z for z, d in bench.streams if d == 11}
    assert feeders_10 and {owner[z] for z in feeders_10} == {1}
    assert feeders_10 <= {1, 2, 3}
    assert feeders_11 and {owner[z] for z in feeders_11} == {4}


def test_benchmark_partition_is_clean(bench):
    assert validate_partition(bench) == []


def test_minimal_network_is_valid():
    t = load_topology(MINIMAL)
    assert len(t.partition.subsystems) == 1
    assert t.link(1).is_source and t.link(2).is_sink
    assert t.controlled_streams == ((1, 2),)


def test_beta_row_not_summing_to_one_names_link():
    bad = MINIMAL.replace("1: {2: 1.0}", "1: {2: 0.9}")
    with pytest.raises(TopologyError, match="link 1"):
        load_topology(bad)


def test_malformed_text_is_a_parse_error():
    with pytest.raises(ConfigParseError):
        load_topology("links: [unclosed")
    with pytest.raises(ConfigParseError, match="partition"):
        load_topology("links: []\njunctions: []\nturning: {}\n")


@pytest.mark.parametrize("edit, fragment", [
    (lambda d: d["links"][0].update(capacity=0), "capacity"),
    (lambda d: d["links"][0].update(lanes=0), "lanes"),
    (lambda d: d["junctions"][0].update(lost_time=60), "lost_time"),
    (lambda d: d["links"][1].update(downstream=9), "unknown junction"),
])
def test_invalid_fields_are_named(edit, fragment):
    doc = yaml.safe_load(MINIMAL)
    edit(doc)
    with pytest.raises(TopologyError, match=fragment):
        load_topology(yaml.safe_dump(doc))


def test_unowned_link_diagnostic():
    t = two_link()
    sub = t.partition.subsystems[0]
    part = SubsystemPartition((dataclasses.replace(sub, links=(1,)),), t.partition.neighbor_map)
    diags = validate_partition(dataclasses.replace(t, partition=part))
    assert diags == ["unowned link 2"]


def test_asymmetric_neighbor_diagnostic(bench):
    nmap = dict(bench.partition.neighbor_map)
    nmap[5] = tuple(i for i in nmap[5] if i != 4)
    part = SubsystemPartition(bench.partition.subsystems, tuple(sorted(nmap.items())))
    diags = validate_partition(dataclasses.replace(bench, partition=part))
    assert len(diags) == 1 and diags[0].startswith("asymmetric neighbor")


def test_round_trip(bench):
    again = load_topology(serialize_topology(bench))
    assert again == bench
    assert topology_to_dict(again) == topology_to_dict(bench)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
def test_round_trip_random(seed, n):
    t = random_network(np.random.default_rng(seed), n)
    assert load_topology(serialize_topology(t)) == t


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
def test_positive_turns_have_capacity_and_green(seed, n):
    t = random_network(np.random.default_rng(seed), n)
    caps = t.stream_capacities
    green = set(t.controlled_streams)
    for z, row in t.turning.as_dict().items():
        for d, b in row.items():
            if b > 0:
                assert caps[(z, d)] > 0
                assert (z, d) in green
    # default stream capacities split the downstream capacity by inflow share
    for d in {d for _, d in t.streams}:
        into = [z for z, dd in t.streams if dd == d]
        assert sum(caps[(z, d)] for z in into) == pytest.approx(t.link(d).capacity, rel=1e-12)


def test_sweep_order_puts_upstream_first(bench):
    pos = {z: i for i, z in enumerate(bench.sweep_order)}
    assert sorted(pos) == sorted(bench.link_ids)
    # the benchmark is acyclic, so every stream is swept upstream first
    assert all(pos[z] < pos[d] for z, d in bench.streams)
