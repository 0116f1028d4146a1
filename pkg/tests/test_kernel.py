import random
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tms.datastore import Status
from tms.errors import (CycleError, DuplicateModuleId, InitError, ParseError, QueueFull,
                        UnknownDependency, UnknownFactory, UnknownVehicle)
from tms.events import EventSourceNode
from tms.kernel import (DecisionModule, Kernel, KernelConfig, ModuleSpec, init_decision_modules,
                        load_module_config, parse_module_config, topological_module_order)
from tms.protocol import MessageFactory

from tests.conftest import SCENARIOS, wait_for
from tests.netutil import Client
from tests.oracles import random_dag, respects

mf = MessageFactory()

TWO_MODULES = """
<tms>
  <module id="congestion" factory="congestion"/>
  <module id="route_advisor" factory="route_advisor">
    <depends>congestion</depends>
    <param key="destinations" value="v1:C"/>
  </module>
</tms>
"""


def test_load_shipped_config():
    specs = load_module_config(SCENARIOS / "tms.xml")
    assert [s.module_id for s in specs] == ["fleet_logger", "congestion", "route_advisor",
                                            "legacy_proxy"]
    advisor = specs[2]
    assert advisor.dependencies == ("congestion",)
    assert advisor.params == {"destinations": "car2:C,car3:A"}


def test_two_module_config(tmp_path):
    path = tmp_path / "m.xml"
    path.write_text(TWO_MODULES)
    specs = load_module_config(path)
    assert len(specs) == 2
    assert specs[1] == ModuleSpec("route_advisor", "route_advisor", ("congestion",),
                                  {"destinations": "v1:C"})


def test_config_errors(tmp_path):
    with pytest.raises(DuplicateModuleId, match="m1"):
        parse_module_config('<tms><module id="m1" factory="f"/><module id="m1" factory="g"/></tms>')
    with pytest.raises(UnknownDependency, match="m9"):
        parse_module_config('<tms><module id="m1" factory="f"/>'
                            '<module id="m2" factory="f"><depends>m9</depends></module></tms>')
    for bad in ("<tms><module id='a' factory='f'>", "<modules/>",
                "<tms><module factory='f'/></tms>", "<tms><module id='a' factory='f'><x/></module></tms>"):
        with pytest.raises(ParseError):
            parse_module_config(bad)
    with pytest.raises(ParseError):
        load_module_config(tmp_path / "missing.xml")


def spec(mid, *deps, factory="plain"):
    return ModuleSpec(mid, factory, tuple(deps))


def test_module_order():
    assert topological_module_order([spec("route_advisor", "congestion"), spec("congestion")]) == \
        ["congestion", "route_advisor"]
    with pytest.raises(CycleError) as info:
        topological_module_order([spec("a", "b"), spec("b", "a")])
    assert set(info.value.members) == {"a", "b"}


def test_thirty_random_modules():
    deps = random_dag(random.Random(11), 30, 0.15)
    order = topological_module_order([spec(m, *d) for m, d in deps.items()])
    assert respects(order, deps)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_module_order_agrees_with_listener_order(seed, n):
    deps = random_dag(random.Random(seed), n, 0.2)
    src = EventSourceNode("s")
    for lid, ds in deps.items():
        src.add_listener(lid, lambda e: None, ds)
    assert topological_module_order([spec(m, *d) for m, d in deps.items()]) == \
        src.resolve_listener_order()


class Recorder(DecisionModule):
    log: list = []

    def init(self, api, module_id, dependencies, params):
        super().init(api, module_id, dependencies, params)
        Recorder.log.append(module_id)


class Background(DecisionModule):
    background = True
    instances: list = []

    def init(self, api, module_id, dependencies, params):
        super().init(api, module_id, dependencies, params)
        self.running = False
        Background.instances.append(self)

    def start(self):
        self.running = True

    def stop(self, timeout=5.0):
        self.running = False


class Broken(DecisionModule):
    def init(self, api, module_id, dependencies, params):
        raise RuntimeError("no config")


FACTORIES = {"plain": Recorder, "bg": Background, "broken": Broken}


@pytest.fixture(autouse=True)
def _reset():
    Recorder.log = []
    Background.instances = []


def make_kernel(specs, factories=FACTORIES, roads=None, **cfg):
    cfg.setdefault("port", 0)
    return Kernel(specs, factories, roads, KernelConfig(**cfg))


def test_init_order_and_registration():
    # the dependent sorts first alphabetically, so only the dependency puts it second
    k = make_kernel([spec("advisor", "traffic"), spec("traffic")])
    assert k.init_decision_modules() == ["traffic", "advisor"]
    assert Recorder.log == ["traffic", "advisor"]
    assert k.root.resolve_listener_order() == ["traffic", "advisor"]
    assert all(m.api is k.api for m in k.modules.values())


def test_unknown_factory():
    with pytest.raises(UnknownFactory, match="nope"):
        make_kernel([spec("m", factory="nope")]).init_decision_modules()


def test_init_failure_is_fail_fast():
    k = make_kernel([spec("bg", factory="bg"), spec("z", "bg", factory="broken")])
    with pytest.raises(InitError) as info:
        k.start()
    assert info.value.module_id == "z"
    assert [b.running for b in Background.instances] == [False]
    assert k.root.listener_ids == []
    assert not any(t.is_alive() for t in k.comms.threads())


def test_module_level_init_function():
    k = make_kernel([])
    order = init_decision_modules([spec("b", "a"), spec("a")], FACTORIES, k.api)
    assert order == ["a", "b"]


def test_background_tasks_start_after_all_inits():
    seen = []

    class Watcher(Background):
        def start(self):
            seen.append(list(Recorder.log))
            super().start()

    k = make_kernel([spec("w", factory="w"), spec("x"), spec("y", "x")],
                    {**FACTORIES, "w": Watcher})
    k.init_decision_modules()
    assert seen == [["x", "y"]]
    k.shutdown()
    assert not Background.instances[0].running


@pytest.fixture
def kernel():
    k = make_kernel([], local_queue_capacity=2).start()
    yield k
    k.shutdown()


def login(k, *vids):
    clients = []
    for v in vids:
        c = Client(("127.0.0.1", k.port))
        c.send(mf.login(v))
        clients.append(c)
    assert wait_for(lambda: set(vids) <= set(k.api.logged_in()))
    return clients


def test_send_to_vehicle(kernel):
    (c,) = login(kernel, "v1")
    kernel.api.send_to_vehicle("v1", mf.ack("v1", 5))
    assert c.recv() == mf.ack("v1", 5)
    with pytest.raises(UnknownVehicle):
        kernel.api.send_to_vehicle("ghost", mf.ack("ghost", 1))
    c.close()


def fill_queue(k, vid):
    big = mf.app(vid, b"x" * 1_000_000)
    for _ in range(200):
        try:
            k.send_to_vehicle(vid, big)
        except QueueFull:
            return True
        time.sleep(0.005)
    return False


def test_send_to_stalled_vehicle_overflows(kernel):
    (c,) = login(kernel, "slow")
    assert fill_queue(kernel, "slow")
    # once full, exactly the configured capacity is waiting
    assert len(kernel.comms.worker_for("slow").local_queue) == 2
    with pytest.raises(QueueFull):
        kernel.send_to_vehicle("slow", mf.ack("slow", 1))
    c.close()


def test_broadcast(kernel):
    assert kernel.broadcast(mf.ack("", 1)) == 0
    clients = login(kernel, "v1", "v2", "v3")
    assert kernel.api.broadcast(mf.warning("", 1, "ice")) == 3
    for c in clients:
        assert c.recv().body.text == "ice"
    more = login(kernel, "v4", "v5")
    assert fill_queue(kernel, "v5")
    assert kernel.broadcast(mf.ack("", 2)) == 4
    for c in clients + more[:1]:
        assert c.recv() == mf.ack("", 2)
    for c in clients + more:
        c.close()


def test_login_and_telemetry_reach_fleet_store(kernel):
    (c,) = login(kernel, "v1")
    assert kernel.fleet.get_vehicle_state("v1").status is Status.LOGGED_IN
    c.send(mf.telemetry("v1", 1234, 48.7, 6.18, 4.0))
    assert wait_for(lambda: kernel.fleet.get_vehicle_state("v1").last_update == 1234)
    c.close()
    assert wait_for(lambda: kernel.fleet.get_vehicle_state("v1").status is Status.LOGGED_OUT)
    assert kernel.fleet.get_vehicle_state("v1").latitude == 48.7


def test_modules_share_the_store_in_event_order():
    seen = []

    class Writer(DecisionModule):
        def on_event(self, ev):
            if ev.event_type == "message_received":
                self.api.fleet.set_status("marker-" + ev.source_target, Status.LOGGED_OUT)

    class Reader(DecisionModule):
        def on_event(self, ev):
            if ev.event_type == "message_received":
                seen.append((self.api.fleet.get_vehicle_state("marker-" + ev.source_target),
                             self.api.fleet.get_vehicle_state(ev.source_target).last_update))

    k = make_kernel([spec("a_reader", "z_writer", factory="r"), spec("z_writer", factory="w")],
                    {"r": Reader, "w": Writer}).start()
    try:
        (c,) = login(k, "v1")
        c.send(mf.telemetry("v1", 77, 1.0, 1.0, 1.0))
        assert wait_for(lambda: len(seen) == 1)
        marker, ts = seen[0]
        assert marker is not None and ts == 77
        c.close()
    finally:
        k.shutdown()


def test_shutdown_idempotent_and_joins_with_vehicles():
    Recorder.log = []
    k = make_kernel([spec("bg", factory="bg")]).start()
    clients = login(k, "v1", "v2", "v3")
    t0 = time.monotonic()
    assert k.shutdown()
    assert time.monotonic() - t0 < 5
    assert not any(t.is_alive() for t in k.comms.threads())
    assert not Background.instances[0].running
    assert all(c.closed_by_peer() for c in clients)
    assert k.shutdown()
    names = [t.name for t in threading.enumerate() if t.name.startswith("tms-")]
    assert names == []
