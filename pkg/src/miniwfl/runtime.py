"""Task execution: staging, command-line building, process launch, outputs.

Every attempt gets a fresh working directory; inputs are copied in read-only
and re-checksummed, the tool runs with a minimal explicit environment, and
stdout/stderr are always captured to files for provenance.
"""

from __future__ import annotations

import glob as globlib
import json
import os
import shutil
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from typing import Optional

from . import model
from .errors import (
    ExprSyntaxError,
    ExprTypeError,
    LaunchError,
    OutputAmbiguousError,
    OutputMissingError,
    StagingError,
    UnknownReferenceError,
)
from .expression import EvalContext, interpolate
from .model import ToolDescription
from .planner import FileValue, TaskNode, file_checksum

SUCCESS = "Success"
TEMPORARY_FAILURE = "TemporaryFailure"
PERMANENT_FAILURE = "PermanentFailure"

C_OUTDIR = "/miniwfl/outdir"
C_INPUTS = "/miniwfl/inputs"
C_TMPDIR = "/tmp"


@dataclass
class StagedDirectory:
    root: str
    staged_inputs: dict  # original path -> in-sandbox path
    outdir: str
    tmpdir: str
    container_map: dict = field(default_factory=dict)  # host -> container path


@dataclass
class TaskAttempt:
    task_id: str
    attempt_number: int
    argv: list = field(default_factory=list)
    env: dict = field(default_factory=dict)
    start_time: float = 0.0
    end_time: float = 0.0
    exit_code: Optional[int] = None
    stdout_path: Optional[str] = None
    stderr_path: Optional[str] = None
    outcome: str = PERMANENT_FAILURE
    failure_kind: Optional[str] = None
    error: Optional[str] = None


@dataclass
class AttemptResult:
    attempt: TaskAttempt
    outputs: Optional[dict] = None


def _iter_file_values(value):
    if isinstance(value, FileValue):
        yield value
    elif isinstance(value, list):
        for v in value:
            yield from _iter_file_values(v)


def _map_file_values(value, mapper):
    if isinstance(value, FileValue):
        return mapper(value)
    if isinstance(value, list):
        return [_map_file_values(v, mapper) for v in value]
    return value


def stage(node_id: str, bindings: dict, work_root: str,
          initial_workdir: Optional[model.Clause] = None,
          enable_streaming: bool = False,
          for_container: bool = False) -> tuple:
    """Stage a fresh working directory for one attempt.

    Returns (StagedDirectory, staged bindings) where the staged bindings
    carry FileValues rewritten to their in-sandbox host paths; container
    equivalents are recorded in the directory's container_map.
    """
    safe = node_id.replace("/", "_").replace("[", "_").replace("]", "")
    root = os.path.join(work_root, f"{safe}-{uuid.uuid4().hex[:8]}")
    os.makedirs(root)
    outdir = os.path.join(root, "outdir")
    tmpdir = os.path.join(root, "tmp")
    inputs_dir = os.path.join(root, "inputs")
    os.makedirs(outdir)
    os.makedirs(tmpdir)
    os.makedirs(inputs_dir)

    staged_inputs = {}
    container_map = {}
    feeders = []
    counter = 0
    for input_id in sorted(bindings):
        for fv in _iter_file_values(bindings[input_id]):
            if fv.path in staged_inputs:
                continue
            slot = os.path.join(inputs_dir, str(counter))
            os.makedirs(slot)
            target = os.path.join(slot, fv.basename)
            if not os.path.isfile(fv.path):
                raise StagingError(f"input file missing: {fv.path}")
            if fv.streamable and enable_streaming and not for_container:
                os.mkfifo(target)
                feeders.append((fv.path, target))
            else:
                current = file_checksum(fv.path)
                if current != fv.checksum:
                    raise StagingError(
                        f"input changed during run: {fv.path} "
                        f"(expected {fv.checksum[:12]}, found {current[:12]})")
                shutil.copyfile(fv.path, target)
                os.chmod(target, 0o444)
            staged_inputs[fv.path] = target
            container_map[target] = f"{C_INPUTS}/{counter}/{fv.basename}"
            counter += 1

    container_map[outdir] = C_OUTDIR
    container_map[tmpdir] = C_TMPDIR

    staged = StagedDirectory(root=root, staged_inputs=staged_inputs,
                             outdir=outdir, tmpdir=tmpdir,
                             container_map=container_map)

    def mapper(fv: FileValue) -> FileValue:
        return replace(fv, path=staged_inputs[fv.path])

    staged_bindings = {k: _map_file_values(v, mapper) for k, v in bindings.items()}

    if initial_workdir is not None:
        _materialize_initial_workdir(initial_workdir, staged, bindings,
                                     staged_bindings, for_container)

    for source, fifo in feeders:
        threading.Thread(target=_feed_fifo, args=(source, fifo),
                         daemon=True).start()
    return staged, staged_bindings


def _feed_fifo(source: str, fifo: str):
    try:
        with open(source, "rb") as src, open(fifo, "wb") as sink:
            shutil.copyfileobj(src, sink)
    except OSError:
        pass  # reader went away; the attempt outcome reports the real error


def _materialize_initial_workdir(clause, staged, bindings, staged_bindings,
                                 for_container):
    ctx = EvalContext(inputs=bindings, runtime={"outdir": staged.outdir})
    seen = set()
    for item in clause.payload.get("listing", []):
        entry = item["entry"]
        entryname = item.get("entryname")
        value = entry
        if isinstance(entry, str):
            try:
                value = interpolate(entry, ctx)
            except (ExprSyntaxError, ExprTypeError, UnknownReferenceError) as exc:
                raise StagingError(f"bad working-directory entry: {exc}") from exc
        if isinstance(value, FileValue):
            name = entryname or value.basename
            target = os.path.join(staged.outdir, name)
            if name in seen or os.path.exists(target):
                raise StagingError(
                    f"working-directory basename collision: {name!r}")
            seen.add(name)
            shutil.copyfile(value.path, target)
            shutil.copymode(value.path, target)
        else:
            if entryname is None:
                raise StagingError(
                    "literal working-directory entry needs an entryname")
            if entryname in seen:
                raise StagingError(
                    f"working-directory basename collision: {entryname!r}")
            seen.add(entryname)
            target = os.path.join(staged.outdir, entryname)
            with open(target, "w", encoding="utf-8") as fh:
                fh.write(value if isinstance(value, str) else json.dumps(value))


def _render_value(value, ctx):
    if isinstance(value, FileValue):
        return [value.path]
    if isinstance(value, bool):
        raise AssertionError("booleans are handled at the binding level")
    if isinstance(value, str):
        rendered = interpolate(value, ctx)
        if isinstance(rendered, FileValue):
            return [rendered.path]
        if rendered is None:
            return []
        return [_scalar_str(rendered)]
    return [_scalar_str(value)]


def _scalar_str(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def build_command_line(tool: ToolDescription, bindings: dict,
                       ctx: EvalContext) -> list:
    """argv per the binding rules; bindings must carry staged FileValues."""
    argv = [interpolate(tok, ctx) if "$(" in tok else tok
            for tok in tool.base_command]
    argv = [_scalar_str(a) for a in argv]

    bindable = [p for p in tool.inputs
                if p.position is not None or p.prefix is not None]
    bindable.sort(key=lambda p: (p.position or 0, p.id))
    for param in bindable:
        value = bindings.get(param.id)
        if value is None:
            continue
        if isinstance(value, bool):
            if value and param.prefix:
                argv.append(param.prefix)
            continue
        if isinstance(value, list):
            if not value:
                continue
            if param.prefix:
                argv.append(param.prefix)
            for element in value:
                argv.extend(_render_value(element, ctx))
            continue
        if param.prefix:
            argv.append(param.prefix)
        argv.extend(_render_value(value, ctx))
    return argv


class DockerAdapter:
    """Builds `docker run` invocations; mounts staged paths per the engine's
    fixed in-container path scheme."""

    command = "docker"

    def available(self) -> bool:
        return shutil.which(self.command) is not None

    def build_argv(self, image: str, argv: list, staged: StagedDirectory,
                   env: dict, interactive: bool = False) -> list:
        out = [self.command, "run", "--rm", "--workdir", C_OUTDIR]
        if interactive:  # stdin redirection needs the stream kept open
            out.append("-i")
        for host in sorted(staged.staged_inputs.values()):
            out += ["-v", f"{host}:{staged.container_map[host]}:ro"]
        out += ["-v", f"{staged.outdir}:{C_OUTDIR}:rw"]
        out += ["-v", f"{staged.tmpdir}:/tmp:rw"]
        for key in sorted(env):
            out += ["--env", f"{key}={env[key]}"]
        out.append(image)
        out.extend(argv)
        return out


def base_environment(staged: StagedDirectory, container: bool) -> dict:
    if container:
        return {"HOME": C_OUTDIR, "TMPDIR": C_TMPDIR}
    return {
        "HOME": staged.outdir,
        "TMPDIR": staged.tmpdir,
        "PATH": os.environ.get("PATH", "/usr/local/bin:/usr/bin:/bin"),
    }


def execute(task_id: str, attempt_number: int, argv: list, env: dict,
            staged: StagedDirectory, success_codes=frozenset({0}),
            wall_time_max: Optional[float] = None,
            container_image: Optional[str] = None,
            adapter: Optional[DockerAdapter] = None,
            stdin_path: Optional[str] = None,
            spawn_hook=None) -> TaskAttempt:
    """Run one attempt; never raises for tool failure, only reports it."""
    attempt = TaskAttempt(task_id=task_id, attempt_number=attempt_number,
                          argv=list(argv), env=dict(env))
    attempt.stdout_path = os.path.join(staged.root, "stdout.log")
    attempt.stderr_path = os.path.join(staged.root, "stderr.log")

    launch_argv = argv
    launch_env = env
    if container_image is not None:
        adapter = adapter or DockerAdapter()
        if not adapter.available():
            attempt.outcome = PERMANENT_FAILURE
            attempt.failure_kind = "LaunchError"
            attempt.error = f"container runtime {adapter.command!r} not found"
            return attempt
        launch_argv = adapter.build_argv(container_image, argv, staged, env,
                                         interactive=stdin_path is not None)
        launch_env = {"PATH": os.environ.get("PATH", "/usr/bin:/bin")}

    attempt.start_time = time.time()
    if spawn_hook is not None:
        spawn_hook(launch_argv)
    in_fh = None
    try:
        if stdin_path is not None:
            in_fh = open(stdin_path, "rb")
        with open(attempt.stdout_path, "wb") as out_fh, \
                open(attempt.stderr_path, "wb") as err_fh:
            proc = subprocess.Popen(launch_argv, cwd=staged.outdir,
                                    env=launch_env, stdout=out_fh,
                                    stderr=err_fh, stdin=in_fh)
            try:
                attempt.exit_code = proc.wait(timeout=wall_time_max)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
                attempt.end_time = time.time()
                attempt.outcome = TEMPORARY_FAILURE
                attempt.failure_kind = "Timeout"
                attempt.error = (f"wall time limit of {wall_time_max}s "
                                 f"exceeded")
                return attempt
    except FileNotFoundError as exc:
        attempt.end_time = time.time()
        attempt.outcome = PERMANENT_FAILURE
        attempt.failure_kind = "LaunchError"
        attempt.error = f"cannot launch: {exc}"
        return attempt
    except OSError as exc:
        attempt.end_time = time.time()
        attempt.outcome = TEMPORARY_FAILURE
        attempt.failure_kind = "LaunchRace"
        attempt.error = f"launch failed: {exc}"
        return attempt
    finally:
        if in_fh is not None:
            in_fh.close()

    attempt.end_time = time.time()
    if attempt.exit_code in success_codes:
        attempt.outcome = SUCCESS
    else:
        attempt.outcome = PERMANENT_FAILURE
        attempt.failure_kind = "ExitCode"
        attempt.error = f"exit code {attempt.exit_code} not in success codes"
    return attempt


def _capture_path(tool: ToolDescription, staged: StagedDirectory,
                  attempt: TaskAttempt, which: str) -> str:
    name = tool.stdout if which == "stdout" else tool.stderr
    source = attempt.stdout_path if which == "stdout" else attempt.stderr_path
    if name is None:
        return source
    target = os.path.join(staged.outdir, name)
    if not os.path.exists(target):
        shutil.copyfile(source, target)
    return target


def collect_outputs(tool: ToolDescription, staged: StagedDirectory,
                    attempt: TaskAttempt) -> dict:
    """Locate and checksum every declared output of a successful attempt."""
    outputs = {}
    for out in tool.outputs:
        if out.capture is not None:
            path = _capture_path(tool, staged, attempt, out.capture)
            outputs[out.id] = FileValue.from_path(path, format=out.format)
            continue
        matches = sorted(globlib.glob(os.path.join(staged.outdir, out.glob),
                                      recursive=True))
        matches = [m for m in matches if os.path.isfile(m)]
        if out.type.base == "File":
            if out.type.array:
                outputs[out.id] = [FileValue.from_path(m, format=out.format)
                                   for m in matches]
            elif not matches:
                if out.type.optional:
                    outputs[out.id] = None
                else:
                    raise OutputMissingError(
                        f"output {out.id!r}: glob {out.glob!r} matched nothing")
            elif len(matches) > 1:
                raise OutputAmbiguousError(
                    f"output {out.id!r}: glob {out.glob!r} matched "
                    f"{len(matches)} files")
            else:
                outputs[out.id] = FileValue.from_path(matches[0],
                                                      format=out.format)
        else:
            outputs[out.id] = _parse_primitive_output(out, matches)
    return outputs


def _parse_primitive_output(out, matches):
    if not matches:
        if out.type.optional:
            return None
        raise OutputMissingError(
            f"output {out.id!r}: glob {out.glob!r} matched nothing")
    if len(matches) > 1:
        raise OutputAmbiguousError(
            f"output {out.id!r}: glob {out.glob!r} matched {len(matches)} files")
    with open(matches[0], "r", encoding="utf-8") as fh:
        text = fh.read().strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise OutputMissingError(
            f"output {out.id!r}: {matches[0]} is not JSON-valued: {exc}") from exc


class LocalRuntime:
    """Executes TaskNodes on the local machine, optionally via containers."""

    def __init__(self, work_root: str, use_containers: bool = True,
                 enable_streaming: bool = False, adapter=None):
        self.work_root = os.path.abspath(work_root)
        os.makedirs(self.work_root, exist_ok=True)
        self.use_containers = use_containers
        self.enable_streaming = enable_streaming
        self.adapter = adapter or DockerAdapter()
        self.spawn_count = 0
        self._lock = threading.Lock()

    def _count_spawn(self, argv):
        with self._lock:
            self.spawn_count += 1

    def container_image(self, node: TaskNode) -> Optional[str]:
        clause = node.clause(model.CLAUSE_CONTAINER)
        if clause is None or not self.use_containers:
            return None
        return clause.payload["image"]

    def run_task(self, node: TaskNode, bindings: dict, attempt_number: int,
                 resources: dict) -> AttemptResult:
        """One full attempt: stage, build argv, run, collect."""
        attempt = TaskAttempt(task_id=node.id, attempt_number=attempt_number)
        image = self.container_image(node)
        try:
            staged, staged_bindings = stage(
                f"{node.id}-a{attempt_number}", bindings, self.work_root,
                initial_workdir=node.clause(model.CLAUSE_INITIAL_WORKDIR),
                enable_streaming=self.enable_streaming,
                for_container=image is not None)
        except StagingError as exc:
            attempt.failure_kind = "StagingError"
            attempt.error = str(exc)
            return AttemptResult(attempt=attempt)

        # argv and env see container paths when running containerized;
        # stdin is redirected host-side and keeps the host staged path
        if image is not None:
            def to_container(fv: FileValue) -> FileValue:
                return replace(fv, path=staged.container_map[fv.path])
            ctx_bindings = {k: _map_file_values(v, to_container)
                            for k, v in staged_bindings.items()}
            outdir_for_tool = C_OUTDIR
        else:
            ctx_bindings = staged_bindings
            outdir_for_tool = staged.outdir

        runtime_vars = {
            "cores": resources.get("coresMin", 1),
            "ram": resources.get("ramMin", 256),
            "outdir": outdir_for_tool,
        }
        ctx = EvalContext(inputs=ctx_bindings, runtime=runtime_vars)

        env = base_environment(staged, container=image is not None)
        env_clause = node.clause(model.CLAUSE_ENV)
        stdin_path = None
        try:
            if env_clause is not None:
                for key, value in env_clause.payload["envDef"].items():
                    env[key] = _scalar_str(interpolate(value, ctx))
            if node.tool.stdin is not None:
                host_ctx = EvalContext(inputs=staged_bindings,
                                       runtime=dict(runtime_vars,
                                                    outdir=staged.outdir))
                stdin_value = interpolate(node.tool.stdin, host_ctx)
                if isinstance(stdin_value, FileValue):
                    stdin_path = stdin_value.path
                elif isinstance(stdin_value, str) and stdin_value:
                    stdin_path = stdin_value
                else:
                    raise ExprTypeError(
                        f"stdin must resolve to a file, got {stdin_value!r}")
            argv = build_command_line(node.tool, ctx_bindings, ctx)
        except (ExprSyntaxError, ExprTypeError, UnknownReferenceError) as exc:
            attempt.failure_kind = "ExprError"
            attempt.error = str(exc)
            return AttemptResult(attempt=attempt)

        if not argv:
            attempt.failure_kind = "LaunchError"
            attempt.error = "empty command line"
            return AttemptResult(attempt=attempt)

        wall = resources.get("wallTimeMax")
        attempt = execute(
            node.id, attempt_number, argv, env, staged,
            success_codes=node.tool.success_codes,
            wall_time_max=wall,
            container_image=image,
            adapter=self.adapter,
            stdin_path=stdin_path,
            spawn_hook=self._count_spawn,
        )
        if attempt.outcome != SUCCESS:
            return AttemptResult(attempt=attempt)

        try:
            outputs = collect_outputs(node.tool, staged, attempt)
        except OutputMissingError as exc:
            attempt.outcome = PERMANENT_FAILURE
            attempt.failure_kind = "OutputMissing"
            attempt.error = str(exc)
            return AttemptResult(attempt=attempt)
        except OutputAmbiguousError as exc:
            attempt.outcome = PERMANENT_FAILURE
            attempt.failure_kind = "OutputAmbiguous"
            attempt.error = str(exc)
            return AttemptResult(attempt=attempt)
        return AttemptResult(attempt=attempt, outputs=outputs)
