"""Trace rendering: CSV (round-trippable), JSON and a plain-text table."""

from __future__ import annotations

import csv
import io
import json

from ..engine import IterationRecord, PruneTrace
from ..surgery import PrunePlan

CSV_COLUMNS = ["t", "params_before", "layer_idx", "p_layer", "c_t", "s_width", "s_layer",
               "choice", "params_after"]
EXTRA_COLUMNS = ["width_candidate_params", "layer_candidate_params", "forced", "tune_steps",
                 "advanced_digest", "tuned_digest", "plan"]

_INTS = {"t", "params_before", "layer_idx", "p_layer", "params_after", "width_candidate_params",
         "layer_candidate_params", "tune_steps"}
_FLOATS = {"c_t", "s_width", "s_layer"}


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, PrunePlan):
        return json.dumps(value.to_dict(), sort_keys=True, separators=(",", ":"))
    return str(value)


def trace_to_csv(trace: PruneTrace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS + EXTRA_COLUMNS)
    for rec in trace.iterations:
        writer.writerow([_cell(getattr(rec, c)) for c in CSV_COLUMNS + EXTRA_COLUMNS])
    return buf.getvalue()


def _parse(column: str, text: str):
    if column == "plan":
        return PrunePlan.from_dict(json.loads(text))
    if text == "" and column not in ("forced", "advanced_digest", "tuned_digest", "choice"):
        return None
    if column in _INTS:
        return int(text)
    if column in _FLOATS:
        return float(text)
    return text


def trace_from_csv(text: str) -> list[IterationRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if header[: len(CSV_COLUMNS)] != CSV_COLUMNS:
        raise ValueError(f"unexpected trace CSV header {header}")
    return [IterationRecord(**{c: _parse(c, v) for c, v in zip(header, row)}) for row in body]


def trace_to_json(trace: PruneTrace) -> str:
    return json.dumps(trace.to_dict(), sort_keys=True, indent=1) + "\n"


def trace_from_json(text: str) -> PruneTrace:
    return PruneTrace.from_dict(json.loads(text))


def _fmt(x, spec=".5f") -> str:
    return "-" if x is None else format(x, spec)


def render_table(trace: PruneTrace) -> str:
    lines = [
        f"P0 = {trace.p0:,}   P_min = {trace.p_min:,.1f}   final = {_fmt(trace.final_params, ',')}",
        f"{'t':>3} {'params_before':>14} {'layer':>5} {'p_layer':>9} {'c_t':>8} "
        f"{'s_width':>10} {'s_layer':>10} {'choice':>6} {'params_after':>13}",
    ]
    for r in trace.iterations:
        lines.append(
            f"{r.t:>3} {r.params_before:>14,} {r.layer_idx:>5} {r.p_layer:>9,} {r.c_t:>8.5f} "
            f"{_fmt(r.s_width):>10} {_fmt(r.s_layer):>10} {r.choice:>6} {r.params_after:>13,}"
            + (f"  [{r.forced}]" if r.forced else "")
        )
    return "\n".join(lines) + "\n"


EXTREMES_COLUMNS = ["ratio", "mode", "seed", "params", "dense_params", "width_steps", "depth_steps",
                    "ppl_pre_rft", "ppl", "dense_ppl"]


def extremes_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=EXTREMES_COLUMNS, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in EXTREMES_COLUMNS})
    return buf.getvalue()


def render_extremes(summary: list[dict]) -> str:
    """Held-out perplexity (desk scale, not benchmark accuracy) per ratio and mode."""
    modes = sorted({s["mode"] for s in summary})
    ratios = sorted({s["ratio"] for s in summary})
    by = {(s["ratio"], s["mode"]): s["mean_ppl"] for s in summary}
    lines = ["held-out PPL " + " ".join(f"{m:>14}" for m in modes)]
    for ratio in ratios:
        lines.append(f"{ratio:>12.0%} " + " ".join(f"{by.get((ratio, m), float('nan')):>14.4f}" for m in modes))
    return "\n".join(lines) + "\n"
