"""Tabular estimate reports: one row per estimator, SE ratio against the naive estimator."""

from __future__ import annotations

import csv
import io
import json
import math

from .estimators import ESTIMATOR_ORDER, EstimateReport

COLUMNS = ("Method", "point", "SE", "95% CI", "p", "p_exact", "Ratio")


def format_p(p):
    return "<0.01" if p < 0.01 else f"{p:.2f}"


def format_ci(lo, hi, digits=2):
    return f"({lo:.{digits}f};{hi:.{digits}f})"


def ordered(reports: dict) -> list[EstimateReport]:
    order = {t: i for i, t in enumerate(ESTIMATOR_ORDER)}
    return sorted(reports.values(), key=lambda r: order.get(r.estimator_tag, len(order)))


def table_rows(reports: dict, digits=2):
    """Rows of the summary table.  ``Ratio`` is ``SE(naive) / SE(method)``; blank without a naive row."""
    naive = reports.get("naive")
    rows = []
    for r in ordered(reports):
        ratio = ""
        if naive is not None and r.se > 0:
            ratio = f"{naive.se / r.se:.{digits}f}"
        rows.append({
            "Method": r.estimator_tag,
            "point": f"{r.point:.{digits}f}",
            "SE": f"{r.se:.{digits}f}",
            "95% CI": format_ci(r.ci_low, r.ci_high, digits),
            "p": format_p(r.p_value),
            "p_exact": f"{r.p_value:.6g}",
            "Ratio": ratio,
        })
    return rows


def to_csv(reports: dict, digits=2) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(table_rows(reports, digits))
    return buf.getvalue()


def to_text(reports: dict, digits=2) -> str:
    rows = table_rows(reports, digits)
    widths = {c: max(len(c), *(len(r[c]) for r in rows)) for c in COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in COLUMNS)]
    lines += ["  ".join(r[c].ljust(widths[c]) for c in COLUMNS) for r in rows]
    return "\n".join(lines)


def to_json(reports: dict, include_influence=True, **extra) -> str:
    naive = reports.get("naive")
    out = []
    for r in ordered(reports):
        d = r.to_dict(include_influence=include_influence)
        d["se_ratio_vs_naive"] = (naive.se / r.se) if naive is not None and r.se > 0 else None
        out.append(d)
    payload = {"estimates": out, **extra}
    return json.dumps(payload, indent=2, allow_nan=False, default=_json_default)


def _json_default(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if hasattr(x, "tolist"):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")
