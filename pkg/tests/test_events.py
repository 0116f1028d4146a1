import logging
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tms.errors import (CycleError, DuplicateListenerId, ParentCycle, UnknownListener,
                        ValidationError)
from tms.events import (DEFAULT_ACTION, EventDescriptor, EventSourceNode, ListenerRegistration,
                        propagate_event, register_listener, resolve_listener_order,
                        set_source_parent, unregister_listener)
from tms.ordering import topological_order

from tests.oracles import (has_cycle, inject_cycle, is_cycle, lexicographic_ready_order,
                           random_dag, respects)


def noop(ev):
    pass


def ev(kind="message_received", target="v1"):
    return EventDescriptor(kind, target)


def source_with(deps, default=None):
    s = EventSourceNode("s", default_action=default)
    for lid, ds in deps.items():
        s.add_listener(lid, noop, ds)
    return s


def names(trace):
    return [(e.source_id, e.handler_id) for e in trace]


def test_event_descriptor_is_immutable_and_typed():
    e = ev()
    with pytest.raises(AttributeError):
        e.event_type = "other"
    with pytest.raises(ValidationError):
        EventDescriptor("", "v1")


@pytest.mark.parametrize("deps", [["a", "a"], ["self"]])
def test_registration_rejects_bad_dependency_lists(deps):
    with pytest.raises(ValidationError):
        ListenerRegistration("self", noop, deps)


def test_register_on_empty_source():
    s = EventSourceNode("s")
    register_listener(s, ListenerRegistration("L1", noop))
    assert s.listener_ids == ["L1"]


def test_register_duplicate_rejected():
    s = EventSourceNode("s")
    s.add_listener("L1", noop)
    with pytest.raises(DuplicateListenerId):
        s.add_listener("L1", noop)


def test_register_before_dependency_warns(caplog):
    s = EventSourceNode("s")
    with caplog.at_level(logging.WARNING):
        s.add_listener("L2", noop, ["L1"])
    assert s.listener_ids == ["L2"]
    assert any("L1" in w for w in s.warnings)
    assert "L1" in caplog.text


def test_late_dependency_is_honoured_once_registered():
    s = EventSourceNode("s")
    s.add_listener("a_first_alphabetically", noop, ["z_dep"])
    assert s.resolve_listener_order() == ["a_first_alphabetically"]
    s.add_listener("z_dep", noop)
    assert s.resolve_listener_order() == ["z_dep", "a_first_alphabetically"]


def test_unregister():
    s = source_with({"L1": []})
    unregister_listener(s, "L1")
    assert propagate_event(s, ev()) == []
    with pytest.raises(UnknownListener):
        s.unregister_listener("LX")


def test_unregistered_dependency_counts_as_satisfied():
    calls = []
    s = EventSourceNode("s")
    s.add_listener("L1", lambda e: calls.append("L1"))
    s.add_listener("L2", lambda e: calls.append("L2"), ["L1"])
    s.unregister_listener("L1")
    s.propagate_event(ev())
    assert calls == ["L2"]


def test_set_source_parent():
    a, b = EventSourceNode("A"), EventSourceNode("B")
    set_source_parent(a, b)
    assert a.parent is b
    with pytest.raises(ParentCycle):
        set_source_parent(a, a)
    with pytest.raises(ParentCycle):
        set_source_parent(b, a)
    assert b.parent is None


def test_longer_parent_cycle_rejected():
    chain = [EventSourceNode(f"s{i}") for i in range(5)]
    for child, parent in zip(chain, chain[1:]):
        set_source_parent(child, parent)
    with pytest.raises(ParentCycle):
        set_source_parent(chain[-1], chain[0])


def test_order_chain_and_cycle():
    assert resolve_listener_order(source_with({"C": ["B"], "B": ["A"], "A": []})) == ["A", "B", "C"]
    with pytest.raises(CycleError) as info:
        source_with({"A": ["B"], "B": ["A"]}).resolve_listener_order()
    assert set(info.value.members) == {"A", "B"}


def test_order_ties_are_lexicographic():
    assert source_with({"b": [], "c": [], "a": []}).resolve_listener_order() == ["a", "b", "c"]


def test_random_dag_of_50_listeners():
    rng = random.Random(7)
    deps = random_dag(rng, 50, 0.1)
    order = source_with(deps).resolve_listener_order()
    assert respects(order, deps)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 25), st.floats(0, 0.5))
def test_order_is_valid_complete_and_deterministic(seed, n, density):
    deps = random_dag(random.Random(seed), n, density)
    s = source_with(deps)
    order = s.resolve_listener_order()
    assert respects(order, deps)
    assert len(order) == len(set(order)) == n
    assert order == s.resolve_listener_order() == source_with(deps).resolve_listener_order()
    assert order == lexicographic_ready_order(deps)


@settings(max_examples=300, deadline=None)
@given(st.dictionaries(st.sampled_from("abcdef"),
                       st.lists(st.sampled_from("abcdefg"), unique=True, max_size=4),
                       max_size=6))
def test_cycle_error_iff_cycle(deps):
    deps = {k: [d for d in v if d != k] for k, v in deps.items()}
    try:
        order = topological_order(deps)
    except CycleError as exc:
        assert has_cycle(deps)
        assert is_cycle(deps, exc.members)
    else:
        assert not has_cycle(deps)
        assert respects(order, deps)


def test_injected_cycle_is_named():
    rng = random.Random(3)
    deps = inject_cycle(rng, random_dag(rng, 20, 0.15))
    with pytest.raises(CycleError) as info:
        topological_order(deps)
    assert is_cycle(deps, info.value.members)


def test_propagate_default_only():
    s = EventSourceNode("s", default_action=noop)
    assert names(s.propagate_event(ev())) == [("s", DEFAULT_ACTION)]


def test_propagate_default_then_ordered_listeners():
    calls = []
    s = EventSourceNode("s", default_action=lambda e: calls.append("D"))
    s.add_listener("L2", lambda e: calls.append("L2"), ["L1"])
    s.add_listener("L1", lambda e: calls.append("L1"))
    trace = s.propagate_event(ev())
    assert calls == ["D", "L1", "L2"]
    assert [e.handler_id for e in trace] == [DEFAULT_ACTION, "L1", "L2"]


def test_propagate_bubbles_to_parent():
    calls = []
    parent = EventSourceNode("p", default_action=lambda e: calls.append("Dp"))
    parent.add_listener("Lp", lambda e: calls.append("Lp"))
    child = EventSourceNode("c", default_action=lambda e: calls.append("Dc"), parent=parent)
    child.add_listener("Lc", lambda e: calls.append("Lc"))
    trace = child.propagate_event(ev())
    assert calls == ["Dc", "Lc", "Dp", "Lp"]
    assert names(trace) == [("c", DEFAULT_ACTION), ("c", "Lc"), ("p", DEFAULT_ACTION), ("p", "Lp")]


def test_listener_failure_is_recorded_and_propagation_continues(caplog):
    calls = []
    s = EventSourceNode("s")

    def boom(e):
        raise RuntimeError("bad module")

    s.add_listener("a", boom)
    s.add_listener("b", lambda e: calls.append("b"))
    with caplog.at_level(logging.ERROR):
        trace = s.propagate_event(ev())
    assert calls == ["b"]
    assert trace[0].error == "RuntimeError: bad module" and not trace[0].ok
    assert trace[1].ok
    assert "bad module" in caplog.text


def test_listeners_see_the_same_descriptor():
    seen = []
    s = EventSourceNode("s")
    s.add_listener("a", seen.append)
    s.add_listener("b", seen.append)
    e = EventDescriptor("t", "v9", {"k": 1})
    s.propagate_event(e)
    assert seen[0] is e and seen[1] is e


def test_child_segment_precedes_ancestors():
    root = EventSourceNode("root", default_action=noop)
    mid = EventSourceNode("mid", parent=root)
    leaf = EventSourceNode("leaf", default_action=noop, parent=mid)
    for s in (root, mid, leaf):
        s.add_listener("x", noop)
    full = names(leaf.propagate_event(ev()))
    assert full[:2] == [("leaf", DEFAULT_ACTION), ("leaf", "x")]
    assert full[2:] == names(mid.propagate_event(ev()))


def test_concurrent_registration_and_propagation():
    s = EventSourceNode("s")
    errors = []

    def churn(k):
        try:
            for i in range(200):
                s.add_listener(f"l{k}-{i}", noop, [f"l{k}-{i - 1}"] if i else [])
                s.propagate_event(ev())
                if i % 3 == 0:
                    s.unregister_listener(f"l{k}-{i}")
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=churn, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    order = s.resolve_listener_order()
    assert len(order) == 4 * (200 - 67)
