"""Disparity evaluation: bad-tau error rates, occlusion masks, reports.

bad-tau is the percentage of evaluated pixels whose absolute disparity
error strictly exceeds tau pixels, computed either over all valid pixels
or only over non-occluded ("noc") ones. Occlusion masks for synthetic
ground truth come from a left-right disparity cross-check: a pixel is
non-occluded when the right view's disparity, sampled at the matching
column, agrees with the left view's within one pixel.

Reports are emitted twice from the same records: an aligned plain-text
table with two-decimal percentages for reading, and a full-precision CSV
that parses back to identical records for downstream tooling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "EvalMask",
    "EvalRecord",
    "EmptyRegionError",
    "TAU_DEFAULTS",
    "bad_tau",
    "occlusion_mask",
    "evaluate",
    "format_report",
    "write_report_csv",
    "read_report_csv",
    "report",
]

# Conventional thresholds by benchmark family.
TAU_DEFAULTS = {"kitti": 3.0, "middlebury": 2.0, "eth3d": 1.0}

CSV_COLUMNS = ("dataset_id", "tau", "bad_all", "bad_noc", "n_all", "n_noc")


class EmptyRegionError(ValueError):
    """The requested evaluation region contains no pixels."""


@dataclass(frozen=True)
class EvalMask:
    """Which pixels carry ground truth, and which of those are unoccluded."""

    valid: np.ndarray
    noc: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.valid, dtype=bool)
        n = np.asarray(self.noc, dtype=bool)
        if v.shape != n.shape:
            raise ValueError(f"mask shapes differ: {v.shape} vs {n.shape}")
        if (n & ~v).any():
            raise ValueError("noc pixels must be a subset of valid pixels")
        object.__setattr__(self, "valid", v)
        object.__setattr__(self, "noc", n)

    @classmethod
    def build(cls, valid, noc=None) -> "EvalMask":
        """Intersect a raw non-occlusion map with validity; noc=None means
        every valid pixel counts as non-occluded."""
        v = np.asarray(valid, dtype=bool)
        n = v if noc is None else np.asarray(noc, dtype=bool) & v
        return cls(valid=v, noc=n)


@dataclass(frozen=True)
class EvalRecord:
    """One evaluated map (or pooled set): error rates plus pixel counts."""

    dataset_id: str
    tau: float
    bad_all: float
    bad_noc: float
    n_all: int
    n_noc: int

    def __post_init__(self):
        for name in ("bad_all", "bad_noc"):
            p = getattr(self, name)
            if not 0.0 <= p <= 100.0:
                raise ValueError(f"{name} must be a percentage in [0,100], got {p}")
        if self.n_all < 0 or self.n_noc < 0 or self.n_noc > self.n_all:
            raise ValueError("pixel counts must satisfy 0 <= n_noc <= n_all")


def bad_tau(pred, gt, tau: float, mask: EvalMask, region: str = "all") -> float:
    """Percentage of region pixels with |pred - gt| strictly greater than tau."""
    if region not in ("all", "noc"):
        raise ValueError(f"region must be 'all' or 'noc', got {region!r}")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.shape != mask.valid.shape:
        raise ValueError(
            f"shape mismatch: pred {p.shape}, gt {g.shape}, mask {mask.valid.shape}"
        )
    sel = mask.valid if region == "all" else mask.noc
    n = int(sel.sum())
    if n == 0:
        raise EmptyRegionError(f"region {region!r} selects no pixels")
    return 100.0 * int((np.abs(p - g)[sel] > tau).sum()) / n


def occlusion_mask(gt_disp_left, gt_disp_right) -> np.ndarray:
    """Non-occlusion map from a rectified ground-truth disparity pair.

    Pixel (x, y) of the left/reference view is non-occluded iff the right
    view's disparity, sampled bilinearly at (x - d_left(x, y), y), agrees
    with d_left within one pixel. Samples falling outside the right image
    mark the pixel occluded.
    """
    dl = np.asarray(gt_disp_left, dtype=np.float64)
    dr = np.asarray(gt_disp_right, dtype=np.float64)
    if dl.shape != dr.shape or dl.ndim != 2:
        raise ValueError(f"expected matching 2-d maps, got {dl.shape} and {dr.shape}")
    h, w = dl.shape
    xs = np.arange(w, dtype=np.float64)[None, :]
    pos = xs - dl
    in_range = (pos >= 0.0) & (pos <= w - 1.0)
    x0 = np.floor(np.clip(pos, 0.0, w - 2.0)).astype(int)
    frac = np.clip(pos, 0.0, w - 1.0) - x0
    rows = np.arange(h)[:, None]
    sampled = dr[rows, x0] * (1.0 - frac) + dr[rows, x0 + 1] * frac
    return in_range & (np.abs(dl - sampled) <= 1.0)


def evaluate(pred, gt, tau: float, mask: EvalMask, dataset_id: str) -> EvalRecord:
    """Both-region bad-tau of one prediction, packed as a record."""
    return EvalRecord(
        dataset_id=dataset_id,
        tau=float(tau),
        bad_all=bad_tau(pred, gt, tau, mask, region="all"),
        bad_noc=bad_tau(pred, gt, tau, mask, region="noc"),
        n_all=int(mask.valid.sum()),
        n_noc=int(mask.noc.sum()),
    )


def format_report(records: list) -> str:
    """Aligned text table, percentages with two decimals."""
    if not records:
        raise ValueError("no records to report")
    rows = [("dataset", "tau", "bad-all%", "bad-noc%", "px-all", "px-noc")]
    for r in records:
        rows.append((
            r.dataset_id, f"{r.tau:g}", f"{r.bad_all:.2f}", f"{r.bad_noc:.2f}",
            str(r.n_all), str(r.n_noc),
        ))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for row in rows:
        cells = [row[0].ljust(widths[0])]
        cells += [row[i].rjust(widths[i]) for i in range(1, len(row))]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def write_report_csv(records: list, path) -> None:
    """Full-precision CSV; str() of a float round-trips exactly."""
    if not records:
        raise ValueError("no records to report")
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.dataset_id, str(r.tau), str(r.bad_all), str(r.bad_noc),
                str(r.n_all), str(r.n_noc),
            ])


def read_report_csv(path) -> list:
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected report columns {header!r}")
        return [
            EvalRecord(
                dataset_id=row[0], tau=float(row[1]), bad_all=float(row[2]),
                bad_noc=float(row[3]), n_all=int(row[4]), n_noc=int(row[5]),
            )
            for row in reader
        ]


def report(records: list, out_dir) -> tuple[Path, Path]:
    """Write report.txt (human table) and report.csv (round-trippable)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt, csv_path = out / "report.txt", out / "report.csv"
    txt.write_text(format_report(records), encoding="ascii")
    write_report_csv(records, csv_path)
    return txt, csv_path
