"""Trace file format: UTF-8 JSON Lines, header first, one record per line.

Header:  {"dp_degree": D, "pp_degree": P, "num_steps": N,
          "microbatches_per_step": M, "meta": {...}}
Record:  {"op": "forward-compute", "step": 0, "mb": 0, "pp": 0, "dp": 0,
          "start_us": 0, "end_us": 120}

Files use the .ndtrace.jsonl suffix by convention; a .gz suffix enables
transparent gzip decompression.
"""

from __future__ import annotations

import gzip
import io
import json
import logging
from pathlib import Path
from typing import BinaryIO

from .errors import HeaderMissing, MalformedLine, UnknownOpType, ValidationFailed
from .model import JobTopology, OpRecord, OpType, Trace, WorkerId, assign_seq, validate

log = logging.getLogger(__name__)

_HEADER_KEYS = ("dp_degree", "pp_degree", "num_steps", "microbatches_per_step")
_RECORD_KEYS = ("op", "step", "mb", "pp", "dp", "start_us", "end_us")
_INT_KEYS = ("step", "mb", "pp", "dp", "start_us", "end_us")


def parse_trace(stream: BinaryIO | bytes) -> Trace:
    """Parse a trace file into a validated Trace.

    Step indices are densified to 0..num_steps-1; when that remaps anything,
    the original step ids are preserved in meta["original_step_ids"].
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    text = io.TextIOWrapper(stream, encoding="utf-8")

    header_line = text.readline()
    if not header_line.strip():
        raise HeaderMissing("empty input")
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise HeaderMissing(f"header is not valid JSON: {e}") from None
    if not isinstance(header, dict) or any(k not in header for k in _HEADER_KEYS):
        raise HeaderMissing(f"header must be an object with keys {_HEADER_KEYS}")
    for k in _HEADER_KEYS:
        if not isinstance(header[k], int) or isinstance(header[k], bool):
            raise HeaderMissing(f"header key {k!r} must be an integer")
    try:
        topology = JobTopology(*(header[k] for k in _HEADER_KEYS))
    except ValueError as e:
        raise HeaderMissing(str(e)) from None
    meta = header.get("meta", {})
    if not isinstance(meta, dict):
        raise HeaderMissing("meta must be an object")
    meta = dict(meta)

    records: list[OpRecord] = []
    warned_keys: set[str] = set()
    for line_no, line in enumerate(text, start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedLine(line_no, f"invalid JSON: {e.msg}") from None
        if not isinstance(obj, dict):
            raise MalformedLine(line_no, "record is not a JSON object")
        for k in _RECORD_KEYS:
            if k not in obj:
                raise MalformedLine(line_no, f"missing key {k!r}")
        for k in _INT_KEYS:
            if not isinstance(obj[k], int) or isinstance(obj[k], bool):
                raise MalformedLine(line_no, f"key {k!r} must be an integer")
        if not isinstance(obj["op"], str):
            raise MalformedLine(line_no, "key 'op' must be a string")
        try:
            op_type = OpType.from_name(obj["op"])
        except KeyError:
            raise UnknownOpType(line_no, obj["op"]) from None
        for k in obj:
            if k not in _RECORD_KEYS and k not in warned_keys:
                warned_keys.add(k)
                log.warning("ignoring unknown record key %r (first seen on line %d)", k, line_no)
        records.append(
            OpRecord(
                op_type=op_type,
                step=obj["step"],
                microbatch=obj["mb"],
                worker=WorkerId(obj["pp"], obj["dp"]),
                start=obj["start_us"],
                end=obj["end_us"],
            )
        )

    records, meta = _densify_steps(records, meta)
    trace = Trace(topology, tuple(assign_seq(records)), meta)
    violations = validate(trace)
    if violations:
        raise ValidationFailed(violations)
    return trace


def _densify_steps(records: list[OpRecord], meta: dict) -> tuple[list[OpRecord], dict]:
    """Remap sampled step ids onto 0..k-1, keeping the originals in meta."""
    step_ids = sorted({r.step for r in records})
    if step_ids == list(range(len(step_ids))):
        return records, meta
    remap = {s: i for i, s in enumerate(step_ids)}
    meta = dict(meta)
    meta["original_step_ids"] = step_ids
    remapped = [
        OpRecord(r.op_type, remap[r.step], r.microbatch, r.worker, r.start, r.end, r.seq)
        for r in records
    ]
    return remapped, meta


def write_trace(trace: Trace) -> bytes:
    """Serialize to canonical form: header, then records in canonical order.

    parse_trace(write_trace(t)) reproduces t exactly, and re-writing the
    parsed trace is byte-identical.
    """
    topo = trace.topology
    header = {
        "dp_degree": topo.dp_degree,
        "pp_degree": topo.pp_degree,
        "num_steps": topo.num_steps,
        "microbatches_per_step": topo.microbatches_per_step,
        "meta": dict(trace.meta),
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for r in sorted(trace.records, key=lambda r: r.key.sort_key()):
        lines.append(
            json.dumps(
                {
                    "op": r.op_type.value,
                    "step": r.step,
                    "mb": r.microbatch,
                    "pp": r.worker.pp_rank,
                    "dp": r.worker.dp_rank,
                    "start_us": r.start,
                    "end_us": r.end,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_trace(path: str | Path) -> Trace:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return parse_trace(f)


def save_trace(trace: Trace, path: str | Path) -> None:
    path = Path(path)
    data = write_trace(trace)
    if path.suffix == ".gz":
        # Fixed mtime so identical traces produce identical .gz bytes.
        with open(path, "wb") as raw:
            with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
                f.write(data)
    else:
        path.write_bytes(data)
