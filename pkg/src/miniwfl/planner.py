"""Planning: job order loading, sub-workflow inlining, scatter, readiness.

The planned graph is static: node and edge sets are fixed here and never
change during execution.  A scattered step stays one graph node; its
run-time expansion into shards happens inside the scheduler and is invisible
to the graph shape.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace
from typing import Any, Optional

import yaml

from . import model
from .errors import (
    JobOrderError,
    PlanError,
    ScatterLengthMismatchError,
)
from .expression import EvalContext, eval_guard
from .model import (
    Clause,
    DataType,
    Document,
    Step,
    ToolDescription,
    WorkflowDescription,
)

PENDING = "Pending"
READY = "Ready"
RUNNING = "Running"
SUCCEEDED = "Succeeded"
FAILED = "Failed"
SKIPPED = "Skipped"
CACHED = "Cached"

_TRANSITIONS = {
    PENDING: {READY, SKIPPED},
    READY: {RUNNING, CACHED, SKIPPED, FAILED},
    RUNNING: {SUCCEEDED, FAILED, RUNNING},
    SUCCEEDED: set(),
    FAILED: set(),
    SKIPPED: set(),
    CACHED: set(),
}


def file_checksum(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class FileValue:
    """A staged data artifact; checksum and size captured at load time."""

    path: str
    basename: str
    size: int
    checksum: str
    format: Optional[str] = None
    streamable: bool = False

    @classmethod
    def from_path(cls, path: str, format: Optional[str] = None,
                  streamable: bool = False) -> "FileValue":
        path = os.path.abspath(path)
        if not os.path.isfile(path):
            raise JobOrderError(f"file does not exist: {path}")
        return cls(
            path=path,
            basename=os.path.basename(path),
            size=os.path.getsize(path),
            checksum=file_checksum(path),
            format=format,
            streamable=streamable,
        )

    def to_json(self, include_path: bool = True) -> dict:
        out = {
            "class": "File",
            "basename": self.basename,
            "size": self.size,
            "checksum": self.checksum,
        }
        if include_path:
            out["path"] = self.path
        if self.format is not None:
            out["format"] = self.format
        return out


def value_to_json(value, include_path=True):
    if isinstance(value, FileValue):
        return value.to_json(include_path)
    if isinstance(value, list):
        return [value_to_json(v, include_path) for v in value]
    return value


def _coerce_value(value, dtype: DataType, param_id: str, base_dir: str):
    if value is None:
        if dtype.optional:
            return None
        raise JobOrderError(f"input {param_id!r} is null but not optional")
    if dtype.array:
        if not isinstance(value, list):
            raise JobOrderError(f"input {param_id!r} must be an array")
        elem = dtype.element()
        return [_coerce_value(v, elem, param_id, base_dir) for v in value]
    base = dtype.base
    if base == "File":
        return _coerce_file(value, dtype, param_id, base_dir)
    if base == "string":
        if not isinstance(value, str):
            raise JobOrderError(f"input {param_id!r} must be a string")
        return value
    if base == "int":
        if not isinstance(value, int) or isinstance(value, bool):
            raise JobOrderError(f"input {param_id!r} must be an integer")
        return value
    if base == "float":
        if isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if not isinstance(value, float):
            raise JobOrderError(f"input {param_id!r} must be a float")
        return value
    if base == "boolean":
        if not isinstance(value, bool):
            raise JobOrderError(f"input {param_id!r} must be a boolean")
        return value
    if base == "null":
        raise JobOrderError(f"input {param_id!r} has type null; only null fits")
    raise JobOrderError(f"input {param_id!r}: unsupported base type {base}")


def _coerce_file(value, dtype, param_id, base_dir):
    if isinstance(value, FileValue):
        return value
    fmt = None
    streamable = False
    if isinstance(value, dict):
        if value.get("class") != "File" or "path" not in value:
            raise JobOrderError(
                f"input {param_id!r}: File values need class File and a path")
        fmt = value.get("format")
        path = value["path"]
    elif isinstance(value, str):
        path = value
    else:
        raise JobOrderError(f"input {param_id!r} must name a file")
    if not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    return FileValue.from_path(path, format=fmt)


def load_job_order(values: dict, wf, base_dir: str = ".") -> dict:
    """Coerce a raw job-order mapping against the workflow inputs.

    File paths resolve relative to ``base_dir`` and are checksummed now, so
    later staging can detect drift.
    """
    if not isinstance(values, dict):
        raise JobOrderError("job order must be a mapping")
    params = wf.input_map() if isinstance(wf, WorkflowDescription) else {
        p.id: p for p in wf.inputs}
    unknown = set(values) - set(params)
    if unknown:
        raise JobOrderError(f"unknown job inputs: {sorted(unknown)}")
    out = {}
    for param in params.values():
        if param.id in values:
            out[param.id] = _coerce_value(values[param.id], param.type,
                                          param.id, base_dir)
            fv = out[param.id]
            if isinstance(fv, FileValue):
                if fv.format is None and param.format is not None:
                    fv = replace(fv, format=param.format)
                if param.streamable:
                    fv = replace(fv, streamable=True)
                out[param.id] = fv
        elif param.has_default:
            out[param.id] = _coerce_value(param.default, param.type,
                                          param.id, base_dir)
        elif param.type.optional:
            out[param.id] = None
        else:
            raise JobOrderError(f"missing required workflow input {param.id!r}")
    return out


def load_job_order_file(path: str, wf) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return load_job_order(raw, wf, base_dir=os.path.dirname(os.path.abspath(path)))


@dataclass
class TaskNode:
    """One executable unit in the planned graph.

    ``bindings`` maps each tool input to either ``("lit", value)`` or
    ``("edge", (producer task id, output id))``.
    """

    id: str
    tool: ToolDescription
    bindings: dict
    scatter: tuple = ()
    guard: Optional[str] = None
    requirements: tuple = ()
    hints: tuple = ()
    state: str = PENDING
    layer: int = 0

    def transition(self, new_state: str):
        if new_state not in _TRANSITIONS[self.state]:
            raise PlanError(
                f"illegal state transition {self.state} -> {new_state} "
                f"for task {self.id}")
        self.state = new_state

    def clause(self, kind: str) -> Optional[Clause]:
        """Effective clause of a kind; step overrides win over tool clauses,
        requirements win over hints."""
        for group in (self.requirements, self.hints):
            for c in group:
                if c.kind == kind:
                    return c
        return None


@dataclass
class DataflowGraph:
    nodes: dict = field(default_factory=dict)
    edges: set = field(default_factory=set)  # ((ptid, out), (ctid, inp))
    workflow_outputs: dict = field(default_factory=dict)

    def consumers(self, task_id: str):
        return {c for (p, _), (c, _) in self.edges if p == task_id}


def plan(doc: Document, job: dict) -> DataflowGraph:
    """Inline sub-workflows, bind inputs, and produce the static graph."""
    if not doc.is_workflow:
        raise PlanError("plan requires a workflow document")
    graph = DataflowGraph()
    input_bindings = {k: ("lit", v) for k, v in job.items()}
    outputs = _plan_workflow(doc.body, "", input_bindings, graph)
    graph.workflow_outputs = outputs
    _assign_layers(graph)
    return graph


def _plan_workflow(wf: WorkflowDescription, prefix: str, input_bindings: dict,
                   graph: DataflowGraph) -> dict:
    # published: (scoped step id, output id) -> binding
    published = {}
    pending = list(wf.steps)
    planned = set()
    # Steps can reference each other in any order; iterate to fixpoint over
    # the (acyclic, validated) dependency relation.
    while pending:
        progressed = False
        remaining = []
        for step in pending:
            if _deps_planned(step, wf, planned):
                _plan_step(step, wf, prefix, input_bindings, published, graph)
                planned.add(step.id)
                progressed = True
            else:
                remaining.append(step)
        if not progressed:
            raise PlanError("unplannable step order (cycle past validation?)")
        pending = remaining

    outputs = {}
    for out in wf.outputs:
        outputs[out.id] = _resolve_source(out.output_source, wf, input_bindings,
                                          published)
    return outputs


def _deps_planned(step: Step, wf: WorkflowDescription, planned: set) -> bool:
    step_ids = set(wf.step_map())
    for _, binding in step.in_map:
        if binding.is_literal or binding.source is None:
            continue
        if "/" in binding.source:
            producer = binding.source.split("/", 1)[0]
            if producer in step_ids and producer not in planned:
                return False
    return True


def _resolve_source(ref: str, wf, input_bindings, published):
    if "/" in ref:
        key = tuple(ref.split("/", 1))
        if key not in published:
            raise PlanError(f"unresolvable source {ref!r}")
        return published[key]
    if ref not in input_bindings:
        raise PlanError(f"unresolvable source {ref!r}")
    return input_bindings[ref]


def _plan_step(step: Step, wf, prefix, input_bindings, published, graph):
    task_id = prefix + step.id
    if not isinstance(step.run, Document):
        raise PlanError(f"step {step.id!r} has an unresolved run reference")

    bound = {}
    for input_id, binding in step.in_map:
        if binding.is_literal:
            bound[input_id] = ("lit", binding.value)
        else:
            bound[input_id] = _resolve_source(binding.source, wf,
                                              input_bindings, published)

    if step.run.is_workflow:
        if step.scatter or step.when:
            raise PlanError(
                f"step {step.id!r}: scatter/when on sub-workflow steps is "
                f"not supported")
        sub_outputs = _plan_workflow(step.run.body, task_id + "/", bound, graph)
        for out_id, value in sub_outputs.items():
            published[(step.id, out_id)] = value
            if value[0] == "edge":
                pass  # consumers wire directly to the inner producer
        return

    tool = step.run.body
    for param in tool.inputs:
        if param.id in bound:
            continue
        if param.has_default:
            bound[param.id] = ("lit", param.default)
        elif param.type.optional:
            bound[param.id] = ("lit", None)
        else:
            raise PlanError(
                f"step {step.id!r}: required input {param.id!r} unbound")

    requirements = step.requirements + tool.requirements
    hints = step.hints + tool.hints
    node = TaskNode(
        id=task_id,
        tool=tool,
        bindings=bound,
        scatter=step.scatter,
        guard=step.when,
        requirements=requirements,
        hints=hints,
    )
    graph.nodes[task_id] = node
    for input_id, binding in bound.items():
        if binding[0] == "edge":
            graph.edges.add((binding[1], (task_id, input_id)))
    for out in tool.outputs:
        published[(step.id, out.id)] = ("edge", (task_id, out.id))


def _assign_layers(graph: DataflowGraph):
    preds = {tid: set() for tid in graph.nodes}
    for (ptid, _), (ctid, _) in graph.edges:
        if ptid in preds and ctid in preds:
            preds[ctid].add(ptid)
    depth = {}

    def depth_of(tid):
        if tid not in depth:
            depth[tid] = 1 + max((depth_of(p) for p in preds[tid]), default=-1)
        return depth[tid]

    for tid in graph.nodes:
        graph.nodes[tid].layer = depth_of(tid)


def resolved_bindings(node: TaskNode, published: dict) -> dict:
    """Concrete input values for a node whose producers have published."""
    out = {}
    for input_id, binding in node.bindings.items():
        if binding[0] == "lit":
            out[input_id] = binding[1]
        else:
            out[input_id] = published[binding[1]]
    return out


def expand_scatter(node: TaskNode, bound: dict):
    """Shard a scattered node over its bound arrays (dot-product semantics).

    Returns (shards, width); shard ids carry an index suffix.  Width 0 is
    legal and yields no shards.
    """
    lengths = []
    for input_id in node.scatter:
        value = bound.get(input_id)
        if not isinstance(value, list):
            raise ScatterLengthMismatchError(
                f"scattered input {input_id!r} of {node.id} is not an array")
        lengths.append(len(value))
    if len(set(lengths)) > 1:
        detail = ", ".join(f"{i}={n}" for i, n in zip(node.scatter, lengths))
        raise ScatterLengthMismatchError(
            f"dot scatter over unequal lengths on {node.id}: {detail}")
    width = lengths[0] if lengths else 0
    shards = []
    for i in range(width):
        shard_bound = dict(bound)
        for input_id in node.scatter:
            shard_bound[input_id] = bound[input_id][i]
        shards.append(TaskNode(
            id=f"{node.id}[{i}]",
            tool=node.tool,
            bindings={k: ("lit", v) for k, v in shard_bound.items()},
            guard=node.guard,
            requirements=node.requirements,
            hints=node.hints,
            layer=node.layer,
        ))
    return shards, width


PROCEED = "proceed"
SKIP = "skip"


def apply_guard(node: TaskNode, ctx: EvalContext) -> str:
    """Evaluate the conditional guard once the inputs are bound."""
    if node.guard is None:
        return PROCEED
    return PROCEED if eval_guard(node.guard, ctx) else SKIP


def ready_set(graph: DataflowGraph, published: dict):
    """Pending nodes whose incoming edges all carry published values."""
    ready = set()
    for tid, node in graph.nodes.items():
        if node.state != PENDING:
            continue
        deps = [b[1] for b in node.bindings.values() if b[0] == "edge"]
        if all(d in published for d in deps):
            ready.add(tid)
    return ready


def to_dot(graph: DataflowGraph) -> str:
    """DOT export: node labels carry task id and state, edges the port pair."""
    lines = ["digraph workflow {"]
    for tid in sorted(graph.nodes):
        node = graph.nodes[tid]
        label = f"{tid}\\n{node.state}"
        if node.scatter:
            label += "\\nscatter"
        lines.append(f'  "{tid}" [label="{label}"];')
    for (ptid, out), (ctid, inp) in sorted(graph.edges):
        lines.append(f'  "{ptid}" -> "{ctid}" [label="{out}→{inp}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
