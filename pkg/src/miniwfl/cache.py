"""Content-addressed result reuse.

Keys are built from what an execution *is* — tool digest, input content
digests, declared environment and container image — never from absolute
paths, timestamps, or host names.  Layout on disk:
``<cache-dir>/<first-2-hex>/<key>/entry.json`` plus a ``files/`` payload
directory, human-inspectable.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import dataclass

from . import model, parser
from .planner import FileValue, TaskNode, file_checksum

log = logging.getLogger(__name__)

NO_REUSE = "no-reuse"


@dataclass(frozen=True)
class CacheKey:
    tool_digest: str
    input_digest: str
    env_digest: str
    reuse_enabled: bool = True

    @property
    def key(self) -> str:
        return parser.digest_data({
            "tool": self.tool_digest,
            "inputs": self.input_digest,
            "env": self.env_digest,
        })


def _value_fingerprint(value):
    """Path-independent canonical form: Files by content, not location."""
    if isinstance(value, FileValue):
        return {"file": {"checksum": value.checksum, "size": value.size}}
    if isinstance(value, list):
        return [_value_fingerprint(v) for v in value]
    return value


def _tool_plain(tool):
    doc = model.Document(version="v1.2", body=tool)
    return parser.to_plain(doc)


def cache_key(node: TaskNode, bindings: dict) -> CacheKey:
    """Key for one concrete execution; WorkReuse(enableReuse: false) yields
    a key that never matches."""
    reuse = True
    clause = node.clause(model.CLAUSE_WORK_REUSE)
    if clause is not None and clause.payload.get("enableReuse", True) is False:
        reuse = False

    env_desc = {}
    env_clause = node.clause(model.CLAUSE_ENV)
    if env_clause is not None:
        env_desc["env"] = dict(env_clause.payload["envDef"])
    container = node.clause(model.CLAUSE_CONTAINER)
    if container is not None:
        env_desc["image"] = container.payload["image"]

    return CacheKey(
        tool_digest=parser.digest_data(_tool_plain(node.tool)),
        input_digest=parser.digest_data(
            {k: _value_fingerprint(v) for k, v in bindings.items()}),
        env_digest=parser.digest_data(env_desc),
        reuse_enabled=reuse,
    )


def _entry_to_value(value, files_dir):
    if isinstance(value, dict) and value.get("class") == "File":
        return FileValue(
            path=os.path.join(files_dir, value["store"]),
            basename=value["basename"],
            size=value["size"],
            checksum=value["checksum"],
            format=value.get("format"),
        )
    if isinstance(value, list):
        return [_entry_to_value(v, files_dir) for v in value]
    return value


class ResultCache:
    """Filesystem-backed store of successful task outputs."""

    def __init__(self, cache_dir: str):
        self.cache_dir = os.path.abspath(cache_dir)

    def _entry_dir(self, key: CacheKey) -> str:
        k = key.key
        return os.path.join(self.cache_dir, k[:2], k)

    def lookup(self, key: CacheKey):
        """Verified outputs for a key, or None.

        Entries whose stored files are missing or corrupt are evicted and
        reported as misses.
        """
        if not key.reuse_enabled:
            return None
        entry_dir = self._entry_dir(key)
        entry_path = os.path.join(entry_dir, "entry.json")
        try:
            with open(entry_path, "r", encoding="utf-8") as fh:
                entry = json.load(fh)
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError) as exc:
            log.warning("cache entry unreadable, evicting: %s", exc)
            self._evict(entry_dir)
            return None

        files_dir = os.path.join(entry_dir, "files")
        outputs = {}
        for out_id, stored in entry["outputs"].items():
            outputs[out_id] = _entry_to_value(stored, files_dir)
        for value in outputs.values():
            for fv in _walk_files(value):
                if (not os.path.isfile(fv.path)
                        or file_checksum(fv.path) != fv.checksum):
                    log.warning("cache entry corrupt, evicting: %s", entry_dir)
                    self._evict(entry_dir)
                    return None
        return outputs

    def store(self, key: CacheKey, outputs: dict, source_run_id: str = ""):
        """Atomically persist outputs; failures degrade to a warning."""
        if not key.reuse_enabled:
            return
        try:
            self._store(key, outputs, source_run_id)
        except OSError as exc:
            log.warning("cache store failed (continuing): %s", exc)

    def _store(self, key: CacheKey, outputs: dict, source_run_id: str):
        entry_dir = self._entry_dir(key)
        if os.path.exists(os.path.join(entry_dir, "entry.json")):
            return  # equal keys imply identical results; first writer wins
        os.makedirs(os.path.dirname(entry_dir), exist_ok=True)
        tmp_dir = tempfile.mkdtemp(dir=os.path.dirname(entry_dir))
        try:
            files_dir = os.path.join(tmp_dir, "files")
            os.makedirs(files_dir)

            def persist(value):
                if isinstance(value, FileValue):
                    store_name = f"{value.checksum[:16]}-{value.basename}"
                    target = os.path.join(files_dir, store_name)
                    if not os.path.exists(target):
                        shutil.copyfile(value.path, target)
                    out = value.to_json(include_path=False)
                    out["store"] = store_name
                    return out
                if isinstance(value, list):
                    return [persist(v) for v in value]
                return value

            entry = {
                "key": {
                    "tool": key.tool_digest,
                    "inputs": key.input_digest,
                    "env": key.env_digest,
                },
                "outputs": {k: persist(v) for k, v in outputs.items()},
                "createdAt": time.time(),
                "sourceRunId": source_run_id,
            }
            with open(os.path.join(tmp_dir, "entry.json"), "w",
                      encoding="utf-8") as fh:
                json.dump(entry, fh, sort_keys=True, indent=1)
            try:
                os.rename(tmp_dir, entry_dir)
            except OSError:
                # concurrent store of the same key; ours is redundant
                shutil.rmtree(tmp_dir, ignore_errors=True)
        except OSError:
            shutil.rmtree(tmp_dir, ignore_errors=True)
            raise

    def republish(self, outputs: dict, dest_dir: str) -> dict:
        """Copy cached files into the run's own directory so the run stays
        self-contained even if the cache is pruned later."""
        os.makedirs(dest_dir, exist_ok=True)

        def copy_out(value):
            if isinstance(value, FileValue):
                target = os.path.join(dest_dir, value.basename)
                base, ext = os.path.splitext(target)
                n = 1
                while os.path.exists(target) and file_checksum(target) != value.checksum:
                    target = f"{base}.{n}{ext}"
                    n += 1
                if not os.path.exists(target):
                    shutil.copyfile(value.path, target)
                from dataclasses import replace
                return replace(value, path=target)
            if isinstance(value, list):
                return [copy_out(v) for v in value]
            return value

        return {k: copy_out(v) for k, v in outputs.items()}

    def _evict(self, entry_dir: str):
        shutil.rmtree(entry_dir, ignore_errors=True)


def _walk_files(value):
    if isinstance(value, FileValue):
        yield value
    elif isinstance(value, list):
        for v in value:
            yield from _walk_files(v)
