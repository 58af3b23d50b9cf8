"""Consolidated run report: one JSON, one CSV per section, and a figure per section.

Sections are read from the artifacts a run directory already holds; anything
that is absent is reported as ``"missing"`` rather than recomputed.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib
import numpy as np

from .checkpoint import atomic_write, load_checkpoint
from .cohort import CLASSES, GRADES

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MISSING = "missing"
SECTIONS = ("stagewise", "low_attention", "cross_activation", "ablation", "provenance")
STAGE_LABELS = {"1": "stage 1 (aggregation only)", "2": "stage 2", "3": "stage 3"}
ABLATION = (("no_attention", "2"), ("attention_bce", "3_bce"), ("attention_bce_lattn", "3"))
# fixed metadata keeps PNG bytes stable between regenerations
PNG_METADATA = {"Software": None}


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else None


def _csv(header_comment: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _stagewise(ev):
    if ev is None:
        return MISSING
    return {t: (ev["stages"][t] if t in ev["stages"] else MISSING) for t in STAGE_LABELS}


def _ablation(ev):
    if ev is None or "3" not in ev["stages"]:
        return MISSING
    return {name: (ev["stages"][t] if t in ev["stages"] else MISSING) for name, t in ABLATION}


def _provenance(run_dir: Path, importance):
    ckpt = next((run_dir / f"stage{t}.ckpt" for t in ("3", "2", "1") if (run_dir / f"stage{t}.ckpt").exists()), None)
    if ckpt is None:
        return MISSING
    model = load_checkpoint(ckpt).model
    scores = {}
    if importance is not None:
        for grade in importance["grades"].values():
            scores.update({r["prototype"]: r["score"] for r in grade["ranking"]})
    rows = []
    for k, (cls, prov) in enumerate(zip(model.class_of, model.provenance)):
        patch, row, col = prov if prov is not None else (None, None, None)
        rows.append({"prototype": k, "class": int(cls), "patch_id": patch, "row": row, "col": col, "importance": scores.get(k)})
    return {"checkpoint_stage": model.stage, "prototypes": rows}


def build_report(run_dir) -> dict:
    run_dir = Path(run_dir)
    config = _read_json(run_dir / "config.json")
    ev = _read_json(run_dir / "eval.json")
    importance = _read_json(run_dir / "importance.json")
    report = {
        "config_hash": config["config_hash"] if config else None,
        "seed": config["seed"] if config else None,
        "stagewise": _stagewise(ev),
        "low_attention": ev.get("low_attention", MISSING) if ev else MISSING,
        "cross_activation": ev.get("cross_activation", MISSING) if ev else MISSING,
        "ablation": _ablation(ev),
        "provenance": _provenance(run_dir, importance),
    }
    report["missing"] = [s for s in SECTIONS if _has_missing(report[s])]
    report["complete"] = not report["missing"]
    return report


def _has_missing(section) -> bool:
    if section == MISSING:
        return True
    return isinstance(section, dict) and any(v == MISSING for v in section.values())


def section_csvs(report: dict) -> dict[str, str]:
    stamp = f"config_hash={report['config_hash']} seed={report['seed']}"
    cols = ["row", "status", "f1_3", "f1_4", "f1_5", "macro_f1", "hamming"]
    out = {}

    def metric_table(section, labels):
        if section == MISSING:
            return [[MISSING]]
        rows = []
        for key, label in labels:
            e = section[key]
            if e == MISSING:
                rows.append([label, MISSING, None, None, None, None, None])
            else:
                rows.append([label, "ok", e["f1"]["3"], e["f1"]["4"], e["f1"]["5"], e["macro_f1"], e["hamming"]])
        return rows

    out["stagewise.csv"] = _csv(stamp, cols, metric_table(report["stagewise"], list(STAGE_LABELS.items())))
    out["ablation.csv"] = _csv(stamp, cols, metric_table(report["ablation"], [(n, n) for n, _ in ABLATION]))

    la = report["low_attention"]
    rows = [[MISSING]] if la == MISSING else [[k, la[k]] for k in [*map(str, GRADES), "overall"]]
    out["low_attention.csv"] = _csv(stamp, ["grade", "low_attention_fraction"], rows)

    ca = report["cross_activation"]
    if ca == MISSING:
        rows = [[MISSING]]
    else:
        rows = [[c, *ca["values"][r], ca["counts"][r]] for r, c in enumerate(ca["classes"])]
    out["cross_activation.csv"] = _csv(stamp, ["true_class", *[f"proto_{c}" for c in CLASSES], "patches"], rows)

    pv = report["provenance"]
    cols = ["prototype", "class", "patch_id", "row", "col", "importance"]
    rows = [[MISSING]] if pv == MISSING else [[p[c] for c in cols] for p in pv["prototypes"]]
    out["provenance.csv"] = _csv(stamp, cols, rows)
    return out


def _png(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return buf.getvalue()


def _metric_bars(section, labels, title):
    keys = [(k, lab) for k, lab in labels if section[k] != MISSING]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    names = [lab for _, lab in keys]
    x = np.arange(len(keys))
    ax1.bar(x, [section[k]["macro_f1"] for k, _ in keys], color="tab:blue")
    ax2.bar(x, [section[k]["hamming"] for k, _ in keys], color="tab:red")
    for ax, ylabel in ((ax1, "macro F1"), (ax2, "Hamming loss")):
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=7)
        ax.set_ylabel(ylabel)
    fig.suptitle(title)
    fig.tight_layout()
    return _png(fig)


def figures(report: dict) -> dict[str, bytes]:
    out = {}
    if report["stagewise"] != MISSING:
        out["stagewise.png"] = _metric_bars(report["stagewise"], list(STAGE_LABELS.items()), "test metrics by stage")
    if report["ablation"] != MISSING:
        out["ablation.png"] = _metric_bars(report["ablation"], [(n, n) for n, _ in ABLATION], "stage-3 module ablation")
    la = report["low_attention"]
    if la != MISSING:
        fig, ax = plt.subplots(figsize=(4, 3))
        keys = [*map(str, GRADES), "overall"]
        ax.bar(keys, [la[k] if la[k] is not None else 0.0 for k in keys], color="tab:gray")
        ax.set_ylim(0, 1)
        ax.set_ylabel("fraction with importance < 0.5")
        ax.set_title("low-attention prototypes")
        fig.tight_layout()
        out["low_attention.png"] = _png(fig)
    ca = report["cross_activation"]
    if ca != MISSING:
        values = np.array([[np.nan if v is None else v for v in row] for row in ca["values"]])
        fig, ax = plt.subplots(figsize=(4, 3.5))
        im = ax.imshow(values, cmap="viridis")
        ax.set_xticks(range(len(CLASSES)))
        ax.set_yticks(range(len(CLASSES)))
        ax.set_xticklabels([str(c) for c in CLASSES])
        ax.set_yticklabels([str(c) for c in CLASSES])
        ax.set_xlabel("prototype class")
        ax.set_ylabel("patch class")
        for r in range(len(CLASSES)):
            for c in range(len(CLASSES)):
                if np.isfinite(values[r, c]):
                    ax.text(c, r, f"{values[r, c]:.2f}", ha="center", va="center", color="w", fontsize=7)
        fig.colorbar(im, ax=ax)
        ax.set_title("cross-activation")
        fig.tight_layout()
        out["cross_activation.png"] = _png(fig)
    return out


def emit_report(run_dir) -> bool:
    """Write ``<run_dir>/report/``; returns whether every section was present."""
    run_dir = Path(run_dir)
    report = build_report(run_dir)
    dest = run_dir / "report"
    atomic_write(dest / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    for name, text in section_csvs(report).items():
        atomic_write(dest / name, text)
    for name, data in figures(report).items():
        atomic_write(dest / name, data)
    return report["complete"]
