"""Output SNR of a filter applied to separately known source images.

``SNR_n = 10 log10(E_target / E_interference)`` where both energies are
measured after filtering each image on its own. Optional sensor noise counts
as interference. Ratios with a zero denominator (or numerator) are capped at
``+CAP_DB`` (or ``-CAP_DB``) so summaries stay finite.

Quartiles use linear interpolation between order statistics
(``numpy.percentile(..., method="linear")``).
"""

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .signal import FirFilter, fir_apply

CAP_DB = 200.0


def ratio_db(num, den):
    if den <= 0:
        return CAP_DB if num > 0 else -CAP_DB
    if num <= 0:
        return -CAP_DB
    return float(np.clip(10 * (np.log10(num) - np.log10(den)), -CAP_DB, CAP_DB))


def snr_from_components(components, target_n, noise=None):
    """SNR of a signal given as per-source components (P, T) plus optional noise (T,)."""
    components = np.asarray(components, dtype=float)
    P = components.shape[0]
    if not 0 <= target_n < P:
        raise IndexError(f"target {target_n} out of range for {P} sources")
    num = float(np.sum(components[target_n] ** 2))
    interf = np.delete(components, target_n, axis=0).sum(axis=0)
    if noise is not None:
        interf = interf + noise
    return ratio_db(num, float(np.sum(interf**2)))


def output_snr(filt, images, target_n, noise=None):
    """SNR of ``filt`` applied to each source image (P, M, T) separately."""
    images = [getattr(im, "samples", im) for im in images]
    if not 0 <= target_n < len(images):
        raise IndexError(f"target {target_n} out of range for {len(images)} sources")
    if not isinstance(filt, FirFilter):
        filt = FirFilter(filt)
    comps = np.stack([fir_apply(filt, im) for im in images])
    noise_out = None if noise is None else fir_apply(filt, getattr(noise, "samples", noise))
    return snr_from_components(comps, target_n, noise_out)


def snr_improvement(processed_snr, unprocessed_snr):
    return np.asarray(processed_snr, dtype=float) - np.asarray(unprocessed_snr, dtype=float)


@dataclass
class SeparationRow:
    method: str
    array_config: str
    n_sources: int
    source: int
    reference_mic: int
    snr_db: float
    improvement_db: float


@dataclass
class EnhancementRow:
    method: str
    array_config: str
    n_sources: int
    source: int
    listener: str
    ear: str
    snr_db: float
    improvement_db: float


@dataclass
class SnrReport:
    separation: list = field(default_factory=list)
    enhancement: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def extend(self, other):
        self.separation.extend(other.separation)
        self.enhancement.extend(other.enhancement)
        return self


def quartiles(values):
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    return {"count": int(v.size), "q1": float(q1), "median": float(med), "q3": float(q3)}


def summarize(reports):
    """Quartile table per (kind, method, array_config) and separation-vs-enhancement scatter."""
    if isinstance(reports, SnrReport):
        reports = [reports]
    if not reports:
        raise ValueError("summarize needs at least one report")
    merged = SnrReport()
    for r in reports:
        merged.extend(r)

    table = []
    for kind, rows in (("separation", merged.separation), ("enhancement", merged.enhancement)):
        keys = sorted({(r.method, r.array_config) for r in rows})
        for method, cfg in keys:
            sel = [r for r in rows if r.method == method and r.array_config == cfg]
            table.append({
                "kind": kind, "method": method, "array_config": cfg,
                "snr": quartiles([r.snr_db for r in sel]),
                "improvement": quartiles([r.improvement_db for r in sel]),
            })

    sep = {(r.method, r.array_config, r.source): r.snr_db for r in merged.separation}
    scatter = [
        {
            "method": r.method, "array_config": r.array_config, "source": r.source,
            "listener": r.listener, "ear": r.ear,
            "separation_snr_db": sep[(r.method, r.array_config, r.source)],
            "enhancement_snr_db": r.snr_db,
        }
        for r in merged.enhancement
        if (r.method, r.array_config, r.source) in sep
    ]
    return {"table": table, "scatter": scatter}


def rank_correlation(scatter):
    """Spearman correlation between separation and enhancement SNR of scatter points."""
    x = [p["separation_snr_db"] for p in scatter]
    y = [p["enhancement_snr_db"] for p in scatter]
    if len(x) < 3:
        return float("nan")
    return float(spearmanr(x, y).statistic)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def rows_to_csv(rows, columns=None):
    """Deterministic CSV text for dataclass rows or dicts (floats at 6 decimals)."""
    dicts = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in rows]
    if columns is None:
        columns = list(dicts[0]) if dicts else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for d in dicts:
        w.writerow([_fmt(d[c]) for c in columns])
    return buf.getvalue()


def summary_to_csv(summary):
    rows = []
    for t in summary["table"]:
        row = {"kind": t["kind"], "method": t["method"], "array_config": t["array_config"], "count": t["snr"]["count"]}
        for which in ("snr", "improvement"):
            for q in ("q1", "median", "q3"):
                row[f"{which}_{q}_db"] = t[which][q]
        rows.append(row)
    cols = ["kind", "method", "array_config", "count"] + [
        f"{w}_{q}_db" for w in ("snr", "improvement") for q in ("q1", "median", "q3")
    ]
    return rows_to_csv(rows, cols)
