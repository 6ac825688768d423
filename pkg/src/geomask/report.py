"""Aggregate finished run directories into one summary table plus figures.

Every ``*.tsv`` table in a run is grouped on its text columns (ignoring a
``seed`` column) and each numeric column is reduced to mean and sample std.
Output is deterministic: same runs in, byte-identical files out.
"""

from __future__ import annotations

import json
import math
import shutil
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .errors import MissingInputError

SUMMARY_HEADER = ["run", "table", "group", "metric", "mean", "std", "n", "mean_pm_std"]


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _read(path: Path) -> List[Dict[str, str]]:
    lines = path.read_text().splitlines()
    if len(lines) < 2:
        return []
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:] if line]


def summarize_table(rows: Sequence[Dict[str, str]]) -> List[tuple]:
    """(group, metric, mean, std, n) tuples for one table."""
    if not rows:
        return []
    cols = list(rows[0])
    numeric = [c for c in cols if c != "seed" and all(_is_number(r[c]) for r in rows)]
    keys = [c for c in cols if c not in numeric and c != "seed"]
    groups: Dict[str, List[Dict[str, str]]] = {}
    for r in rows:
        groups.setdefault("/".join(r[k] for k in keys) or "all", []).append(r)
    out = []
    for g in sorted(groups):
        for c in numeric:
            v = np.array([float(r[c]) for r in groups[g]])
            finite = v[np.isfinite(v)]
            mean = float(finite.mean()) if len(finite) else float(v[0])
            std = float(finite.std(ddof=1)) if len(finite) > 1 else 0.0
            out.append((g, c, mean, std, len(v)))
    return out


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else ("nan" if math.isnan(x) else f"{x:.4f}")


def build_report(runs: Sequence[Path], out: Path) -> Path:
    """Write ``summary.tsv`` and figures for ``runs`` into ``out``."""
    if not runs:
        raise MissingInputError("no run directories given")
    labels = []
    for r in runs:
        if not Path(r).is_dir():
            raise MissingInputError(f"run directory not found: {r}")
        label = Path(r).name
        while label in labels:
            label += "_"
        labels.append(label)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(SUMMARY_HEADER)]
    histories, geoloc = {}, None
    for label, run in zip(labels, runs):
        run = Path(run)
        tables = sorted(p for p in run.glob("*.tsv"))
        hist = run / "history.json"
        if not tables and not hist.exists():
            raise MissingInputError(f"run {run} has no result tables or training history")
        for t in tables:
            for g, metric, mean, std, n in summarize_table(_read(t)):
                lines.append("\t".join([label, t.stem, g, metric, _fmt(mean), _fmt(std), str(n),
                                        f"{_fmt(mean)} ± {_fmt(std)}"]))
        if hist.exists():
            histories[label] = json.loads(hist.read_text())
        if geoloc is None and (run / "geoloc.npy").exists():
            geoloc = np.load(run / "geoloc.npy")
        if (run / "chain_panel.png").exists():
            shutil.copyfile(run / "chain_panel.png", out / f"chain_panel_{label}.png")
    path = out / "summary.tsv"
    path.write_text("\n".join(lines) + "\n")

    from .plots import geoloc_heatmap, loss_curves

    if histories:
        loss_curves(histories, out / "loss_curves.png")
    if geoloc is not None:
        geoloc_heatmap(geoloc, out / "geoloc_heatmap.png")
    return path
