"""Deterministic CSV/JSON writers.

Floats are written with ``repr``, the shortest string that round-trips,
so repeated runs of the same configuration give byte-identical files.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(value)
    return repr(float(value))


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, payload: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")
    return path


def write_potential_csv(path, phi):
    """Dump phi~ as (x', z', value) triples."""
    g = phi.grid
    w = phi.phi_tilde.values
    rows = ((g.x[i], g.z[j], w[i, j]) for i in range(g.nx) for j in range(g.nz))
    return write_csv(path, ["x", "z", "phi"], rows)


def write_state_csv(path, state):
    rows = zip(state.grid.x, state.u, state.v)
    return write_csv(path, ["x", "u", "v"], rows)
