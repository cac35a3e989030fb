"""Static checks over resolved documents.

All problems are reported as diagnostics; validation never stops at the
first finding.  Unsupported requirements are errors, unsupported hints only
warnings — an engine may ignore advice but must refuse what it cannot honor.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from . import model
from .errors import ExprSyntaxError, GraphCycleError
from .expression import parse_expr
from .model import (
    Clause,
    DataType,
    Document,
    Step,
    ToolDescription,
    WorkflowDescription,
)

ERROR = "error"
WARNING = "warning"


@dataclass(frozen=True)
class Diagnostic:
    severity: str
    code: str
    location: str
    message: str

    def to_json_line(self) -> str:
        return json.dumps({
            "severity": self.severity,
            "code": self.code,
            "location": self.location,
            "message": self.message,
        }, sort_keys=True)


@dataclass(frozen=True)
class SupportMatrix:
    """What this engine instance can execute."""

    supported_requirement_kinds: frozenset = frozenset(model.KNOWN_CLAUSE_KINDS)
    supported_versions: frozenset = frozenset(model.SUPPORTED_VERSIONS)
    max_cores: int = field(default_factory=lambda: os.cpu_count() or 1)
    max_ram_mib: int = 8192
    max_disk_mib: int = 65536

    def __post_init__(self):
        if self.max_cores <= 0 or self.max_ram_mib <= 0 or self.max_disk_mib <= 0:
            raise ValueError("machine capacities must be strictly positive")


def _err(code, location, message):
    return Diagnostic(ERROR, code, location, message)


def _warn(code, location, message):
    return Diagnostic(WARNING, code, location, message)


def _clause_name(clause: Clause) -> str:
    if clause.kind == model.CLAUSE_EXTENSION:
        return str(clause.payload.get("class", "Extension"))
    return clause.kind


def _check_clauses(requirements, hints, matrix: SupportMatrix, location: str):
    out = []
    for clause in requirements:
        if clause.kind not in matrix.supported_requirement_kinds:
            out.append(_err("UnsupportedRequirement", location,
                            f"cannot execute requirement {_clause_name(clause)}"))
        out.extend(_check_resources(clause, matrix, location))
    for clause in hints:
        if clause.kind not in matrix.supported_requirement_kinds:
            out.append(_warn("UnsupportedRequirement", location,
                             f"ignoring hint {_clause_name(clause)}"))
        else:
            out.extend(_check_resources(clause, matrix, location))
    return out


def _check_resources(clause: Clause, matrix: SupportMatrix, location: str):
    if clause.kind != model.CLAUSE_RESOURCE:
        return []
    out = []
    limits = {
        "coresMin": matrix.max_cores,
        "ramMin": matrix.max_ram_mib,
        "diskMin": matrix.max_disk_mib,
    }
    for key, cap in limits.items():
        value = clause.payload.get(key)
        if isinstance(value, int) and value > cap:
            out.append(_err(
                "ResourceUnsatisfiable", location,
                f"{key}={value} exceeds machine capacity {cap}"))
    return out


def _assignable(src: DataType, sink: DataType) -> bool:
    """T -> T; T -> T?; optionality never drops silently."""
    if src.base != sink.base or src.array != sink.array:
        return False
    if src.optional and not sink.optional:
        return False
    return True


def _run_body(step: Step):
    if isinstance(step.run, Document):
        return step.run.body
    return None


def _source_type(ref: str, wf: WorkflowDescription, location: str, diags,
                 conditional_steps):
    """Type of a source reference, or None after emitting a diagnostic."""
    if "/" in ref:
        step_id, out_id = ref.split("/", 1)
        step = wf.step_map().get(step_id)
        if step is None:
            diags.append(_err("DanglingReference", location,
                              f"source {ref!r}: no step named {step_id!r}"))
            return None, None
        body = _run_body(step)
        if body is None:
            return None, None  # unresolved run reported separately
        out_param = body.output_map().get(out_id)
        if out_param is None:
            diags.append(_err("DanglingReference", location,
                              f"source {ref!r}: step {step_id!r} has no output {out_id!r}"))
            return None, None
        dtype = out_param.type
        if step.scatter:
            dtype = DataType(dtype.base, True, False)
        if step.id in conditional_steps:
            dtype = DataType(dtype.base, dtype.array, True)
        return dtype, out_param.format
    param = wf.input_map().get(ref)
    if param is None:
        diags.append(_err("DanglingReference", location,
                          f"source {ref!r} names no workflow input or step output"))
        return None, None
    return param.type, param.format


def _check_step_connections(step: Step, wf: WorkflowDescription, diags,
                            conditional_steps, location):
    body = _run_body(step)
    if body is None:
        diags.append(_err("DanglingReference", location,
                          f"step {step.id!r} has an unresolved run reference"))
        return
    if isinstance(body, ToolDescription):
        sink_params = body.input_map()
    else:
        sink_params = body.input_map()

    bound = set()
    for input_id, binding in step.in_map:
        bound.add(input_id)
        sink = sink_params.get(input_id)
        loc = f"{location}/in/{input_id}"
        if sink is None:
            diags.append(_err("DanglingReference", loc,
                              f"step {step.id!r} binds unknown input {input_id!r}"))
            continue
        if binding.is_literal:
            continue
        src_type, src_format = _source_type(binding.source, wf, loc, diags,
                                            conditional_steps)
        if src_type is None:
            continue
        sink_type = sink.type
        if input_id in step.scatter:
            if not (src_type.array and _assignable(src_type.element(),
                                                   sink_type)):
                diags.append(_err(
                    "TypeMismatch", loc,
                    f"scattered input needs array of {sink_type.to_string()}, "
                    f"got {src_type.to_string()}"))
            continue
        if not _assignable(src_type, sink_type):
            diags.append(_err(
                "TypeMismatch", loc,
                f"{src_type.to_string()} is not assignable to "
                f"{sink_type.to_string()}"))
            continue
        if (src_format is not None and sink.format is not None
                and src_format != sink.format):
            diags.append(_err(
                "FormatMismatch", loc,
                f"source format {src_format!r} != sink format {sink.format!r}"))

    for param in sink_params.values():
        if param.id in bound:
            continue
        if param.type.optional or param.has_default:
            continue
        diags.append(_err("MissingBinding", f"{location}/in",
                          f"required input {param.id!r} of step {step.id!r} "
                          f"is unbound"))


def step_dependency_edges(wf: WorkflowDescription):
    """Edges (producer step id, consumer step id) from data connections."""
    step_ids = set(wf.step_map())
    edges = set()
    for step in wf.steps:
        for _, binding in step.in_map:
            if binding.is_literal or "/" not in (binding.source or ""):
                continue
            producer = binding.source.split("/", 1)[0]
            if producer in step_ids:
                edges.add((producer, step.id))
    return edges


def _find_cycle(nodes, edges):
    """DFS cycle finder; returns one cycle as a list of node ids, or None."""
    adjacency = {n: [] for n in nodes}
    for a, b in sorted(edges):
        adjacency[a].append(b)
    color = {n: 0 for n in nodes}  # 0 white, 1 gray, 2 black
    stack = []

    def visit(node):
        color[node] = 1
        stack.append(node)
        for nxt in adjacency[node]:
            if color[nxt] == 1:
                return stack[stack.index(nxt):] + [nxt]
            if color[nxt] == 0:
                found = visit(nxt)
                if found:
                    return found
        stack.pop()
        color[node] = 2
        return None

    for node in sorted(nodes):
        if color[node] == 0:
            found = visit(node)
            if found:
                return found
    return None


def check_acyclic(wf: WorkflowDescription, location: str = "steps"):
    """Empty iff the step-dependency relation is a DAG."""
    cycle = _find_cycle(set(wf.step_map()), step_dependency_edges(wf))
    if cycle is None:
        return []
    return [_err("CycleDetected", location,
                 "dependency cycle: " + " -> ".join(cycle))]


def layering(wf: WorkflowDescription):
    """Steps grouped by longest dependency path from the workflow inputs."""
    if check_acyclic(wf):
        raise GraphCycleError("workflow step graph is cyclic")
    edges = step_dependency_edges(wf)
    preds = {s.id: set() for s in wf.steps}
    for a, b in edges:
        preds[b].add(a)
    depth = {}

    def depth_of(node):
        if node not in depth:
            depth[node] = 1 + max((depth_of(p) for p in preds[node]), default=-1)
        return depth[node]

    layers = []
    for step in wf.steps:
        d = depth_of(step.id)
        while len(layers) <= d:
            layers.append(set())
        layers[d].add(step.id)
    return layers


def validate(doc: Document, matrix: SupportMatrix = None, location: str = "$"):
    """All diagnostics for a resolved document; never raises on findings."""
    if matrix is None:
        matrix = SupportMatrix()
    diags = []
    if doc.version not in matrix.supported_versions:
        diags.append(_err("UnsupportedVersion", location,
                          f"version {doc.version} is not supported"))

    body = doc.body
    if isinstance(body, ToolDescription):
        diags.extend(_check_clauses(body.requirements, body.hints, matrix,
                                    location))
        return diags

    diags.extend(_validate_workflow(body, matrix, location))
    return diags


def _validate_workflow(wf: WorkflowDescription, matrix, location):
    diags = []
    conditional_steps = {s.id for s in wf.steps if s.when is not None}

    for step in wf.steps:
        step_loc = f"{location}/steps/{step.id}"
        body = _run_body(step)
        if body is not None:
            requirements = step.requirements
            hints = step.hints
            if isinstance(step.run, Document):
                requirements = requirements + getattr(body, "requirements", ())
                hints = hints + getattr(body, "hints", ())
            diags.extend(_check_clauses(requirements, hints, matrix, step_loc))
        if step.when is not None:
            try:
                parse_expr(step.when)
            except ExprSyntaxError as exc:
                diags.append(_err("InvalidExpression", f"{step_loc}/when",
                                  str(exc)))
        _check_step_connections(step, wf, diags, conditional_steps, step_loc)
        if isinstance(step.run, Document) and step.run.is_workflow:
            if step.scatter:
                diags.append(_err("UnsupportedFeature", step_loc,
                                  "scatter over a sub-workflow step is not supported"))
            diags.extend(_validate_workflow(step.run.body, matrix,
                                            f"{step_loc}/run"))

    for out in wf.outputs:
        loc = f"{location}/outputs/{out.id}"
        src_type, src_format = _source_type(out.output_source, wf, loc, diags,
                                            {s.id for s in wf.steps
                                             if s.when is not None})
        if src_type is not None and not _assignable(src_type, out.type):
            diags.append(_err(
                "TypeMismatch", loc,
                f"{src_type.to_string()} is not assignable to "
                f"{out.type.to_string()}"))
        if (src_format is not None and out.format is not None
                and src_format != out.format):
            diags.append(_err("FormatMismatch", loc,
                              f"source format {src_format!r} != output format "
                              f"{out.format!r}"))

    diags.extend(check_acyclic(wf, f"{location}/steps"))
    return diags


def has_errors(diags) -> bool:
    return any(d.severity == ERROR for d in diags)
