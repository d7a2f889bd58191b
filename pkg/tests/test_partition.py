import json

import pytest
from hypothesis import given, strategies as st

from secure_mle.errors import LayoutError
from secure_mle.partition import NodeSpec, PartitionLayout, plan_subroutines


def section5_layout(n1=158, n=244, waves=7):
    return PartitionLayout(
        (NodeSpec("node1", range(n1), [0]), NodeSpec("node2", range(n1, n), [0]),
         NodeSpec("node3", range(n), range(1, waves))), n, waves)


def test_kinds():
    assert PartitionLayout.vertical([[0], [1, 2]], 5).kind == "vertical"
    assert PartitionLayout.horizontal([range(2), range(2, 5)], 3).kind == "horizontal"
    assert section5_layout().kind == "complex"


def test_vertical_is_one_band():
    layout = PartitionLayout.vertical([[0, 1], [2], [3, 4]], 10)
    plan = plan_subroutines(layout)
    assert len(plan) == 1
    assert plan.bands[0].rows == tuple(range(10))
    assert plan.bands[0].node_names == ["node1", "node2", "node3"]
    assert plan.bands[0].sizes == [2, 1, 2]


def test_horizontal_bands_per_node():
    layout = PartitionLayout.horizontal([range(0, 3), range(3, 7), range(7, 9)], 2)
    plan = plan_subroutines(layout)
    assert [b.node_names for b in plan.bands] == [["node1"], ["node2"], ["node3"]]
    assert [b.n for b in plan.bands] == [3, 4, 2]


def test_section5_layout_bands():
    plan = plan_subroutines(section5_layout())
    assert len(plan) == 2
    first, second = plan.bands
    assert first.rows == tuple(range(158)) and first.node_names == ["node1", "node3"]
    assert second.rows == tuple(range(158, 244)) and second.node_names == ["node2", "node3"]
    assert first.column_order == list(range(7))
    assert plan.first_nodes() == ["node1", "node2"]


def test_plan_is_stable():
    layout = section5_layout()
    assert plan_subroutines(layout) == plan_subroutines(layout)
    shuffled = PartitionLayout(tuple(reversed(layout.nodes)), layout.n, layout.p)
    assert plan_subroutines(shuffled) == plan_subroutines(layout)


@pytest.mark.parametrize("nodes", [
    # overlap
    (NodeSpec("a", range(4), [0, 1]), NodeSpec("b", range(4), [1, 2])),
    # gap
    (NodeSpec("a", range(4), [0]), NodeSpec("b", range(4), [1])),
    # rows missing
    (NodeSpec("a", range(3), [0, 1, 2]), NodeSpec("b", range(3), [0, 1, 2])),
])
def test_bad_tilings(nodes):
    with pytest.raises(LayoutError):
        PartitionLayout(nodes, 4, 3)


def test_degenerate_and_reserved():
    with pytest.raises(LayoutError):
        NodeSpec("a", [], [0])
    with pytest.raises(LayoutError):
        NodeSpec("a", [0], [])
    with pytest.raises(LayoutError):
        PartitionLayout((NodeSpec("central", range(2), [0]), NodeSpec("b", range(2), [1])), 2, 2)
    with pytest.raises(LayoutError):
        PartitionLayout.horizontal([range(3)], 2)
    with pytest.raises(LayoutError):
        PartitionLayout((NodeSpec("a", range(2), [0]), NodeSpec("a", range(2), [1])), 2, 2)


def test_json_round_trip(tmp_path):
    layout = PartitionLayout(section5_layout().nodes, 244, 7, tuple(f"w{j}" for j in range(7)))
    path = tmp_path / "layout.json"
    layout.save(path)
    assert PartitionLayout.load(path) == layout
    raw = json.loads(path.read_text())
    assert raw["nodes"][0]["rows"] == [[0, 158]]
    raw["kind"] = "vertical"
    with pytest.raises(LayoutError):
        PartitionLayout.from_dict(raw)
    raw.pop("kind")
    raw["nodes"][0]["columns"] = ["nope"]
    with pytest.raises(LayoutError):
        PartitionLayout.from_dict(raw)
    path.write_text("{not json")
    with pytest.raises(LayoutError):
        PartitionLayout.load(path)
    with pytest.raises(LayoutError):
        PartitionLayout.from_dict({"n": 3})


@given(data=st.data())
def test_random_tilings_plan(data):
    n = data.draw(st.integers(4, 30))
    p = data.draw(st.integers(2, 6))
    cuts = sorted(data.draw(st.lists(st.integers(1, n - 1), min_size=1, max_size=3, unique=True)))
    bounds = [0, *cuts, n]
    nodes = []
    for b, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
        split = data.draw(st.integers(1, p - 1))
        nodes.append(NodeSpec(f"left{b}", range(lo, hi), range(split)))
        nodes.append(NodeSpec(f"right{b}", range(lo, hi), range(split, p)))
    layout = PartitionLayout(tuple(nodes), n, p)
    plan = plan_subroutines(layout)
    rows = sorted(r for band in plan.bands for r in band.rows)
    assert rows == list(range(n))
    for band in plan.bands:
        assert sorted(band.column_order) == list(range(p))
