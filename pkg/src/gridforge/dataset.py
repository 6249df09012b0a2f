"""Labelled dataset records, CSV export/import and deduplication."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .netmodel import InputSpace

STAGES = (
    "boundary_direct", "boundary_q_adjusted", "boundary_projected", "boundary_infeasible",
    "mvn_direct", "mvn_q_adjusted", "mvn_infeasible", "mvn_out_of_box",
)
LABELS = ("secure", "insecure")
DEDUP_DECIMALS = 9

_DETAIL_COLS = ("worst_kind", "worst_contingency", "worst_magnitude", "lineage")


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    x_normalized: np.ndarray
    x_physical: np.ndarray
    label: str
    stage: str
    worst: tuple[str, int, float] | None = None
    lineage: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    @classmethod
    def from_physical(cls, xs: InputSpace, x, label: str, stage: str,
                      worst=None, lineage: str = "") -> "DatasetRecord":
        x = np.asarray(x, dtype=float)
        return cls(xs.normalize(x), x.copy(), label, stage, worst, lineage)

    @property
    def secure(self) -> bool:
        return self.label == "secure"

    def key(self) -> bytes:
        return np.round(self.x_physical, DEDUP_DECIMALS).tobytes() + self.label.encode()

    def same_as(self, other: "DatasetRecord") -> bool:
        return (np.array_equal(self.x_normalized, other.x_normalized)
                and np.array_equal(self.x_physical, other.x_physical)
                and self.label == other.label and self.stage == other.stage
                and _same_worst(self.worst, other.worst) and self.lineage == other.lineage)


def _same_worst(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return a[0] == b[0] and a[1] == b[1] and (a[2] == b[2] or (math.isnan(a[2]) and math.isnan(b[2])))


def deduplicate(records: Iterable[DatasetRecord]) -> list[DatasetRecord]:
    """Keep the first record for every (x rounded to 1e-9, label) pair."""
    seen: set[bytes] = set()
    out = []
    for r in records:
        k = r.key()
        if k in seen:
            continue
        seen.add(k)
        out.append(r)
    return out


def _f(v: float) -> str:
    return format(float(v), ".17g")


def export_dataset(records: Sequence[DatasetRecord], path, names: Sequence[str],
                   physical: bool = True, details: bool = True) -> Path:
    """CSV: normalised x columns, optional ``x_phys_*`` columns, label (1/0), stage."""
    path = Path(path)
    header = list(names)
    if physical:
        header += [f"x_phys_{n}" for n in names]
    header += ["label", "stage"]
    if details:
        header += list(_DETAIL_COLS)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            row = [_f(v) for v in r.x_normalized]
            if physical:
                row += [_f(v) for v in r.x_physical]
            row += ["1" if r.secure else "0", r.stage]
            if details:
                if r.worst is None:
                    row += ["", "", ""]
                else:
                    row += [r.worst[0], str(int(r.worst[1])), _f(r.worst[2])]
                row.append(r.lineage)
            w.writerow(row)
    return path


def import_dataset(path, xs: InputSpace | None = None) -> tuple[list[str], list[DatasetRecord]]:
    """Inverse of :func:`export_dataset`.  ``xs`` is needed only when the file
    carries no physical columns."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    i_label = header.index("label")
    phys = [k for k, h in enumerate(header) if h.startswith("x_phys_")]
    norm = [k for k in range(i_label) if k not in phys]
    names = [header[k] for k in norm]
    col = {h: k for k, h in enumerate(header)}
    out = []
    for row in body:
        u = np.array([float(row[k]) for k in norm])
        if phys:
            x = np.array([float(row[k]) for k in phys])
        elif xs is not None:
            x = xs.denormalize(u)
        else:
            raise ValueError("dataset has no physical columns; pass the input space")
        worst = None
        if "worst_kind" in col and row[col["worst_kind"]]:
            worst = (row[col["worst_kind"]], int(row[col["worst_contingency"]]),
                     float(row[col["worst_magnitude"]]))
        lineage = row[col["lineage"]] if "lineage" in col else ""
        label = "secure" if row[i_label] == "1" else "insecure"
        out.append(DatasetRecord(u, x, label, row[col["stage"]], worst, lineage))
    return names, out


def secure_share(records: Sequence[DatasetRecord]) -> float:
    if not records:
        return float("nan")
    return sum(r.secure for r in records) / len(records)
