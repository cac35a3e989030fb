"""Scheduling: admission, retries, failure policy, scatter completion."""

import threading
import time

import pytest

from miniwfl import parser, planner, scheduler
from miniwfl.model import CLAUSE_RESOURCE, Clause
from miniwfl.planner import DataflowGraph, TaskNode
from miniwfl.runtime import AttemptResult, TaskAttempt
from miniwfl.scheduler import (
    Machine,
    RunConfig,
    Services,
    _Ledger,
    _Unit,
    admission,
    classify_failure,
    fits_machine,
    resolve_resources,
    run,
)

TOOL_RAW = {
    "cwlVersion": "v1.2", "class": "CommandLineTool",
    "baseCommand": ["stub"],
    "inputs": [{"id": "x", "type": "string?"},
               {"id": "go", "type": "boolean?"},
               {"id": "xs", "type": "string[]?"}],
    "outputs": [{"id": "out", "type": "string?", "glob": "o"}],
}
TOOL = parser.parse_raw(TOOL_RAW).body


class StubRuntime:
    """In-process runtime: records execution order, returns canned outputs."""

    def __init__(self, fail=(), temp_fail_counts=None, delay=0.0):
        self.fail = set(fail)
        self.temp_fail_counts = dict(temp_fail_counts or {})
        self.delay = delay
        self.lock = threading.Lock()
        self.calls = []       # (task id, attempt)
        self.active = 0
        self.max_active = 0
        self.spawn_count = 0

    def run_task(self, node, bindings, attempt_number, resources):
        with self.lock:
            self.calls.append((node.id, attempt_number))
            self.spawn_count += 1
            self.active += 1
            self.max_active = max(self.max_active, self.active)
        if self.delay:
            time.sleep(self.delay)
        try:
            attempt = TaskAttempt(task_id=node.id,
                                  attempt_number=attempt_number)
            base = node.id.split("[")[0]
            remaining = self.temp_fail_counts.get(node.id, 0)
            if remaining > 0:
                self.temp_fail_counts[node.id] = remaining - 1
                attempt.failure_kind = "Timeout"
                attempt.error = "stubbed timeout"
                return AttemptResult(attempt=attempt)
            if base in self.fail or node.id in self.fail:
                attempt.failure_kind = "ExitCode"
                attempt.exit_code = 1
                attempt.error = "stubbed failure"
                return AttemptResult(attempt=attempt)
            attempt.outcome = "Success"
            attempt.exit_code = 0
            return AttemptResult(attempt=attempt,
                                 outputs={"out": f"{node.id}-value"})
        finally:
            with self.lock:
                self.active -= 1


def _node(tid, deps=(), layer=0, scatter=(), guard=None, bindings=None,
          requirements=()):
    b = dict(bindings or {})
    for i, dep in enumerate(deps):
        b[f"dep{i}" if i else "x"] = ("edge", (dep, "out"))
    return TaskNode(id=tid, tool=TOOL, bindings=b, layer=layer,
                    scatter=tuple(scatter), guard=guard,
                    requirements=tuple(requirements))


def _graph(*nodes, outputs=None):
    g = DataflowGraph()
    for n in nodes:
        g.nodes[n.id] = n
        for input_id, binding in n.bindings.items():
            if binding[0] == "edge":
                g.edges.add((binding[1], (n.id, input_id)))
    g.workflow_outputs = outputs or {}
    return g


def _run(graph, runtime=None, **cfg_kwargs):
    cfg_kwargs.setdefault("parallelism", 2)
    cfg = RunConfig(**cfg_kwargs)
    return run(graph, cfg, Services(runtime or StubRuntime(), cache=None))


# --- pure admission ---------------------------------------------------------

def _units(spec):
    """spec: list of (tid, layer, cores)."""
    out = []
    for tid, layer, cores in spec:
        node = _node(tid, layer=layer)
        res = {"coresMin": cores, "ramMin": 1, "diskMin": 0}
        out.append(_Unit(node=node, exec_node=node, bindings={},
                         resources=res))
    return out

def test_admission_respects_core_capacity():
    units = _units([(f"t{i}", 0, 1) for i in range(4)])
    cfg = RunConfig(parallelism=8, machine=Machine(cores=2, ram_mib=64,
                                                   disk_mib=64))
    admitted = admission(units, _Ledger(), cfg)
    assert [u.node.id for u in admitted] == ["t0", "t1"]


def test_admission_respects_parallelism():
    units = _units([(f"t{i}", 0, 1) for i in range(4)])
    cfg = RunConfig(parallelism=1, machine=Machine(cores=16))
    admitted = admission(units, _Ledger(), cfg)
    assert [u.node.id for u in admitted] == ["t0"]


def test_admission_first_fit_skips_oversized():
    units = _units([("big", 0, 3), ("s1", 0, 1), ("s2", 0, 1), ("s3", 0, 1)])
    cfg = RunConfig(parallelism=8, machine=Machine(cores=4))
    admitted = admission(units, _Ledger(), cfg)
    # big takes 3, then first-fit squeezes in exactly one 1-core task
    assert [u.node.id for u in admitted] == ["big", "s1"]


def test_admission_orders_by_layer_then_id():
    units = _units([("z", 0, 1), ("a", 1, 1), ("m", 0, 1)])
    cfg = RunConfig(parallelism=8, machine=Machine(cores=16))
    admitted = admission(units, _Ledger(), cfg)
    assert [u.node.id for u in admitted] == ["m", "z", "a"]


def test_admission_accounts_for_running_work():
    units = _units([("t1", 0, 2)])
    cfg = RunConfig(parallelism=4, machine=Machine(cores=3))
    ledger = _Ledger(running=1, cores=2, ram=1, disk=0)
    assert admission(units, ledger, cfg) == []


def test_resolve_resources_defaults_and_expressions():
    plain = _node("t")
    assert resolve_resources(plain, {}, Machine()) == {
        "coresMin": 1, "ramMin": 256, "diskMin": 0}
    clause = Clause(CLAUSE_RESOURCE, {"coresMin": 2, "wallTimeMax": 5,
                                      "ramMin": "$(runtime.ram)"})
    node = _node("t2", requirements=[clause])
    res = resolve_resources(node, {}, Machine(cores=8, ram_mib=512))
    assert res == {"coresMin": 2, "ramMin": 512, "diskMin": 0,
                   "wallTimeMax": 5.0}


def test_fits_machine():
    m = Machine(cores=2, ram_mib=100, disk_mib=10)
    assert fits_machine({"coresMin": 2, "ramMin": 100, "diskMin": 10}, m)
    assert not fits_machine({"coresMin": 3, "ramMin": 1, "diskMin": 0}, m)


def test_classify_failure():
    for kind, expected in [("Timeout", scheduler.TEMPORARY),
                           ("LaunchRace", scheduler.TEMPORARY),
                           ("ExitCode", scheduler.PERMANENT),
                           ("OutputMissing", scheduler.PERMANENT),
                           ("StagingError", scheduler.PERMANENT),
                           ("ExprError", scheduler.PERMANENT),
                           ("LaunchError", scheduler.PERMANENT)]:
        attempt = TaskAttempt(task_id="t", attempt_number=1,
                              failure_kind=kind)
        assert classify_failure(attempt) == expected


# --- end-to-end scheduling over the stub runtime ----------------------------

def test_chain_runs_in_dependency_order():
    g = _graph(_node("a"), _node("b", deps=["a"], layer=1),
               _node("c", deps=["b"], layer=2),
               outputs={"final": ("edge", ("c", "out"))})
    rt = StubRuntime()
    result = _run(g, rt)
    assert result.status == "Success"
    assert [c[0] for c in rt.calls] == ["a", "b", "c"]
    assert result.outputs == {"final": "c-value"}


def test_parallel_siblings_overlap():
    g = _graph(*[_node(f"t{i}") for i in range(4)])
    rt = StubRuntime(delay=0.1)
    result = _run(g, rt, parallelism=4, machine=Machine(cores=4))
    assert result.status == "Success"
    assert rt.max_active >= 2


def test_parallelism_one_serializes():
    g = _graph(*[_node(f"t{i}") for i in range(4)])
    rt = StubRuntime(delay=0.02)
    _run(g, rt, parallelism=1)
    assert rt.max_active == 1


def test_temporary_failures_retry_until_budget():
    g = _graph(_node("flaky"))
    rt = StubRuntime(temp_fail_counts={"flaky": 2})
    result = _run(g, rt, retries=3)
    assert result.status == "Success"
    assert rt.calls == [("flaky", 1), ("flaky", 2), ("flaky", 3)]
    attempts = result.tasks["flaky"]["attempts"]
    assert len(attempts) == 3


def test_retry_budget_exhaustion_fails():
    g = _graph(_node("flaky"))
    rt = StubRuntime(temp_fail_counts={"flaky": 5})
    result = _run(g, rt, retries=2)
    assert result.status == "PermanentFail"
    assert len(rt.calls) == 3  # 1 + retries


def test_permanent_failure_never_retries():
    g = _graph(_node("bad"))
    rt = StubRuntime(fail={"bad"})
    result = _run(g, rt, retries=5)
    assert result.status == "PermanentFail"
    assert rt.calls == [("bad", 1)]
    assert result.tasks["bad"]["state"] == planner.FAILED


def test_on_error_stop_skips_downstream_and_independent_work():
    g = _graph(_node("bad"), _node("down", deps=["bad"], layer=1),
               _node("indep", layer=1))
    rt = StubRuntime(fail={"bad"})
    result = _run(g, rt, parallelism=1, on_error="stop")
    assert result.status == "PermanentFail"
    assert ("down", 1) not in rt.calls
    assert ("indep", 1) not in rt.calls


def test_on_error_continue_runs_independent_work():
    g = _graph(_node("bad"), _node("down", deps=["bad"], layer=1),
               _node("indep", layer=1))
    rt = StubRuntime(fail={"bad"})
    result = _run(g, rt, parallelism=1, on_error="continue")
    assert result.status == "PermanentFail"
    assert ("indep", 1) in rt.calls
    assert ("down", 1) not in rt.calls  # its input never publishes


def test_skipped_guard_publishes_nulls():
    g = _graph(_node("maybe", guard="$(inputs.go)",
                     bindings={"go": ("lit", False)}),
               _node("down", deps=["maybe"], layer=1),
               outputs={"o": ("edge", ("maybe", "out"))})
    rt = StubRuntime()
    result = _run(g, rt)
    assert result.status == "Success"
    assert result.tasks["maybe"]["state"] == planner.SKIPPED
    assert result.outputs == {"o": None}
    assert ("maybe", 1) not in rt.calls
    assert ("down", 1) in rt.calls  # consumes the published null


def test_guard_true_runs_normally():
    g = _graph(_node("maybe", guard="$(inputs.go)",
                     bindings={"go": ("lit", True)}))
    rt = StubRuntime()
    result = _run(g, rt)
    assert rt.calls == [("maybe", 1)]
    assert result.tasks["maybe"]["state"] == planner.SUCCEEDED


def test_guard_type_error_fails_node():
    g = _graph(_node("maybe", guard="$(inputs.x)",
                     bindings={"x": ("lit", "strings are not guards")}))
    result = _run(g, StubRuntime())
    assert result.status == "PermanentFail"


def test_scatter_shards_gather_in_index_order():
    g = _graph(_node("fan", scatter=["xs"],
                     bindings={"xs": ("lit", ["a", "b", "c"])}),
               outputs={"all": ("edge", ("fan", "out"))})
    rt = StubRuntime(delay=0.01)
    result = _run(g, rt, parallelism=3)
    assert result.status == "Success"
    assert result.outputs == {
        "all": ["fan[0]-value", "fan[1]-value", "fan[2]-value"]}
    assert result.tasks["fan"]["state"] == planner.SUCCEEDED


def test_scatter_width_zero_completes_without_spawns():
    g = _graph(_node("fan", scatter=["xs"], bindings={"xs": ("lit", [])}),
               outputs={"all": ("edge", ("fan", "out"))})
    rt = StubRuntime()
    result = _run(g, rt)
    assert result.status == "Success"
    assert result.outputs == {"all": []}
    assert rt.calls == []


def test_scatter_shard_failure_fails_the_node():
    g = _graph(_node("fan", scatter=["xs"],
                     bindings={"xs": ("lit", ["a", "b"])}))
    rt = StubRuntime(fail={"fan[1]"})
    result = _run(g, rt, parallelism=2)
    assert result.status == "PermanentFail"
    assert result.tasks["fan"]["state"] == planner.FAILED


def test_scatter_length_mismatch_fails_at_readiness():
    g = _graph(_node("fan", scatter=["xs", "x"],
                     bindings={"xs": ("lit", ["a"]), "x": ("lit", [1, 2])}))
    rt = StubRuntime()
    result = _run(g, rt)
    assert result.status == "PermanentFail"
    assert rt.calls == []


def test_per_shard_guards():
    # guard references the scattered element itself
    g = _graph(_node("fan", scatter=["xs"], guard="$(inputs.xs == 'go')",
                     bindings={"xs": ("lit", ["go", "stop", "go"])}),
               outputs={"all": ("edge", ("fan", "out"))})
    rt = StubRuntime()
    result = _run(g, rt, parallelism=2)
    assert result.status == "Success"
    assert result.outputs == {"all": ["fan[0]-value", None, "fan[2]-value"]}


def test_event_log_dependencies_precede_consumers():
    g = _graph(_node("a"), _node("b", deps=["a"], layer=1))
    result = _run(g, StubRuntime())
    order = [(e["task"], e["transition"]) for e in result.event_log]
    assert order.index(("a", planner.SUCCEEDED)) \
        < order.index(("b", planner.RUNNING))


def test_resource_minima_beyond_machine_fail_without_spawn():
    clause = Clause(CLAUSE_RESOURCE, {"coresMin": 64})
    g = _graph(_node("huge", requirements=[clause]))
    rt = StubRuntime()
    result = _run(g, rt, machine=Machine(cores=2))
    assert result.status == "PermanentFail"
    assert rt.calls == []


def test_deterministic_outputs_across_parallelism():
    def build():
        return _graph(
            _node("a"), _node("b"),
            _node("c", deps=["a"], layer=1),
            _node("d", deps=["b"], layer=1),
            outputs={"o1": ("edge", ("c", "out")),
                     "o2": ("edge", ("d", "out"))})
    r1 = _run(build(), StubRuntime(delay=0.01), parallelism=1)
    r4 = _run(build(), StubRuntime(delay=0.01), parallelism=4)
    assert r1.outputs == r4.outputs
    assert r1.status == r4.status == "Success"
