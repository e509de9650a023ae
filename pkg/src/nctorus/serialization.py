"""Shared on-disk formats: coefficient records, metric configs, tables, CSV.

The coefficient record format is the one wire format of the project:
a JSON array of ``{"index": [n_1, ..., n_d], "re": float, "im": float}``
sorted lexicographically by index.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .core import FourierElement, ThetaMatrix

__all__ = [
    "element_to_records",
    "element_from_records",
    "canonical_json",
    "config_hash",
    "parse_metric_config",
]


def element_to_records(a: FourierElement) -> list[dict]:
    recs = []
    for n in sorted(a.coeffs):
        c = a.coeffs[n]
        recs.append({"index": list(n), "re": float(c.real), "im": float(c.imag)})
    return recs


def element_from_records(records, dim: int) -> FourierElement:
    coeffs = {}
    for rec in records:
        n = tuple(int(v) for v in rec["index"])
        if len(n) != dim:
            raise ValueError(f"record index {n} does not have dimension {dim}")
        coeffs[n] = coeffs.get(n, 0.0) + complex(float(rec["re"]), float(rec.get("im", 0.0)))
    return FourierElement(dim, coeffs)


def canonical_json(obj) -> str:
    """Deterministic JSON used for hashing and byte-stable outputs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def parse_metric_config(cfg: dict) -> tuple[ThetaMatrix, list[list[FourierElement]]]:
    """Read ``{"dimension": d, "theta": [[...]], "metric": {"i,j": records}}``.

    Metric keys are 1-based ("1,1", "1,2", ...); omitted entries default to
    delta_ij * e_0.  Returns theta and the d x d array of metric entries.
    """
    d = int(cfg["dimension"])
    theta = ThetaMatrix(np.asarray(cfg.get("theta", np.zeros((d, d)))))
    if theta.dim != d:
        raise ValueError("theta dimension does not match 'dimension'")
    metric_spec = cfg.get("metric", {})
    entries = []
    for i in range(1, d + 1):
        row = []
        for j in range(1, d + 1):
            key = f"{i},{j}"
            if key in metric_spec:
                row.append(element_from_records(metric_spec[key], d))
            elif i == j:
                row.append(FourierElement(d, {(0,) * d: 1.0}))
            else:
                row.append(FourierElement(d, {}))
        entries.append(row)
    return theta, entries
