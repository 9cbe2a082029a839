"""CSV/JSON artifact writers with a reproducibility header."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

from . import __version__

__all__ = ["config_hash", "version_string", "header_block", "render_csv", "render_json",
           "write_artifact", "read_csv"]


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(config: dict) -> str:
    """First 12 hex digits of the SHA-256 of the canonical JSON of ``config``."""
    return hashlib.sha256(_canonical(config).encode()).hexdigest()[:12]


def version_string() -> str:
    return f"coulombgas {__version__}"


def header_block(config: dict, seeds: Sequence[int]) -> dict:
    return {"config_hash": config_hash(config), "version": version_string(),
            "seeds": list(seeds), "command": config.get("command")}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def render_csv(rows: Iterable[dict], columns: Sequence[str], header: dict) -> str:
    """CSV text: ``# key: value`` header lines, then the column line and rows."""
    buf = io.StringIO()
    for k in ("config_hash", "version", "command", "seeds"):
        v = header.get(k)
        buf.write(f"# {k}: {_canonical(v) if isinstance(v, list) else v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def render_json(rows: Iterable[dict], columns: Sequence[str], header: dict) -> str:
    payload = {"header": header, "columns": list(columns),
               "rows": [{c: r.get(c) for c in columns} for r in rows]}
    return json.dumps(payload, indent=2, sort_keys=False, default=str) + "\n"


def write_artifact(path: Optional[str], rows, columns, header, fmt: str = "csv") -> str:
    """Render and write (or return, when ``path`` is None) the artifact text."""
    rows = list(rows)
    text = render_csv(rows, columns, header) if fmt == "csv" else render_json(rows, columns, header)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def read_csv(path) -> tuple:
    """Parse an artifact CSV into ``(header, rows)``; values stay strings."""
    header, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            header[k] = v
        else:
            lines.append(line)
    rows = list(csv.DictReader(lines))
    return header, rows
