"""Input plumbing: figure specs, file schemas, parsed payloads.

Everything here is read-only over the harness artifacts.  Schema problems
raise PlotInputError with the offending column or key in the message, so
the command line can relay something actionable.
"""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("bands", "wigner", "convergence", "density")

# columns the renderer actually consumes; extra columns are fine
TABLE_COLUMNS = {
    "bands": ("xi_1", "band", "energy"),
    "wigner": ("x", "xi", "W"),
    "density": ("x", "measured", "predicted"),
}

# per-row scalars that are bookkeeping, not convergence series
NON_SERIES_KEYS = ("eps", "N", "dt", "dt_profile")


class PlotInputError(ValueError):
    """Input missing, empty, or not matching the expected schema."""


@dataclass
class FigureSpec:
    """One figure to produce: kind, main input path, output png, styling."""

    kind: str
    path: Path
    out: Path
    style: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlotInputError(
                f"unknown figure kind '{self.kind}'; expected one of "
                f"{', '.join(KINDS)}"
            )
        self.path = Path(self.path)
        self.out = Path(self.out)

    def styled(self, key: str, default):
        return self.style.get(key, default)


def read_table(path, kind: str) -> dict:
    """Parse a harness CSV into float columns keyed by header name."""
    path = Path(path)
    if not path.exists():
        raise PlotInputError(f"{kind} input {path} does not exist")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PlotInputError(f"{kind} input {path} is empty")
    header, data = rows[0], rows[1:]
    for col in TABLE_COLUMNS[kind]:
        if col not in header:
            raise PlotInputError(
                f"{kind} input {path} missing column '{col}' "
                f"(has: {', '.join(header) if any(header) else 'nothing'})"
            )
    if not data:
        raise PlotInputError(f"{kind} input {path} has a header but no rows")
    cols = {}
    try:
        for i, name in enumerate(header):
            cols[name] = np.array([float(r[i]) for r in data])
    except (ValueError, IndexError) as exc:
        raise PlotInputError(
            f"{kind} input {path} column '{name}' does not parse as "
            f"numbers: {exc}"
        ) from None
    return cols


def load_report(path) -> dict:
    """Parse an experiment report and check the keys the renderers use."""
    path = Path(path)
    if not path.exists():
        raise PlotInputError(f"report {path} does not exist")
    try:
        with open(path) as fh:
            rep = json.load(fh)
    except json.JSONDecodeError as exc:
        raise PlotInputError(f"report {path} is not valid JSON: {exc}") from None
    for key in ("experiment", "sweep", "fits"):
        if key not in rep:
            raise PlotInputError(f"report {path} missing key '{key}'")
    if not rep["sweep"]:
        raise PlotInputError(f"report {path} has no sweep rows")
    return rep


def report_series(rep: dict) -> dict:
    """Convergence series {name: (eps desc, values)} from the sweep rows.

    Nested metric dicts (one value per carrier) flatten to "metric label".
    Rows missing a metric are skipped so partial sweeps still plot.
    """
    series = {}
    for row in rep["sweep"]:
        eps = float(row["eps"])
        for key, val in row.items():
            if key in NON_SERIES_KEYS:
                continue
            if isinstance(val, dict):
                items = [(f"{key} {sub}", v) for sub, v in val.items()]
            else:
                items = [(key, val)]
            for name, v in items:
                if isinstance(v, (int, float)):
                    series.setdefault(name, []).append((eps, float(v)))
    out = {}
    for name, pairs in series.items():
        pairs.sort(key=lambda p: -p[0])
        e = np.array([p[0] for p in pairs])
        v = np.array([p[1] for p in pairs])
        keep = v > 0.0
        if np.count_nonzero(keep) >= 2:
            out[name] = (e[keep], v[keep])
    if not out:
        raise PlotInputError(
            "report has no positive convergence series to plot"
        )
    return out


def load_critical_points(path) -> list:
    """(xi_star, energy) pairs from a critical.json, if it exists."""
    path = Path(path)
    if not path.exists():
        return []
    with open(path) as fh:
        doc = json.load(fh)
    pts = doc.get("points")
    if pts is None:
        raise PlotInputError(f"critical point file {path} missing key 'points'")
    return [(np.asarray(p["xi_star"], dtype=float), float(p["energy"]))
            for p in pts]


def density_panels(spec: FigureSpec) -> list:
    """(label, columns) panels for the density kind.

    A CSV input is one panel; a report input contributes every density
    artifact it declares, in filename order.
    """
    if spec.path.suffix == ".json":
        rep = load_report(spec.path)
        files = rep.get("extras", {}).get("density_files")
        if not files:
            raise PlotInputError(
                f"report {spec.path} declares no density artifacts"
            )
        base = spec.path.parent
        return [(label, read_table(base / name, "density"))
                for name, label in sorted(files.items())]
    return [(spec.styled("label", spec.path.stem),
             read_table(spec.path, "density"))]
