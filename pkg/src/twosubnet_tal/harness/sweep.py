"""Grid over segment count, recoding width and pooling method."""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

from ..inference import evaluate
from ..model import candidate_proposals
from ..pipeline import detect_split
from ..proposals import CompositionError
from ..subnet2 import ShapeUnderflowError
from ..timeline import augment_proposal
from ..training import TrainConfig, run_three_step_training

log = logging.getLogger(__name__)

SWEEP_THRESHOLDS = (0.1, 0.3, 0.5)
ALPHA_GRID = (1, 3, 5, 9, 17, 33)
N_GRID = (9, 17, 33, 65, 129)
COLUMNS = ["alpha", "n", "pooling", "status", "skipped_proposals", "total_proposals"] + \
    [f"mAP@{t}" for t in SWEEP_THRESHOLDS]


@dataclass
class SweepCell:
    alpha: int
    n: Optional[int]
    pooling: str
    status: str = "pending"       # ok | flagged | infeasible
    skipped: int = 0
    total: int = 0
    mAP: Optional[dict] = None
    reason: str = ""

    def row(self) -> dict:
        r = {"alpha": self.alpha, "n": "" if self.n is None else self.n, "pooling": self.pooling,
             "status": self.status, "skipped_proposals": self.skipped,
             "total_proposals": self.total}
        for t in SWEEP_THRESHOLDS:
            r[f"mAP@{t}"] = "" if self.mAP is None else f"{self.mAP[t]:.6f}"
        return r


def short_proposals(dataset, cfg: TrainConfig, alpha: int):
    """(skipped, total) test candidates whose augmented span has fewer than 3*alpha units."""
    skipped = total = 0
    need = max(3, 3 * alpha)
    for v in dataset.split("test"):
        for c in candidate_proposals(v, cfg.proposals):
            total += 1
            skipped += augment_proposal(c, v.frames, v.unit_length).num_units < need
    return skipped, total


def run_cell(dataset, base: TrainConfig, cell: SweepCell) -> SweepCell:
    s2 = dataclasses.replace(base.subnet2, alpha=cell.alpha, n=cell.n, pooling=cell.pooling)
    cfg = dataclasses.replace(base, subnet2=s2)
    cell.skipped, cell.total = short_proposals(dataset, cfg, cell.alpha)
    try:
        model = run_three_step_training(dataset, cfg).model
    except (ShapeUnderflowError, CompositionError) as exc:
        cell.status, cell.reason = "infeasible", str(exc)
        log.warning("cell alpha=%d n=%s %s infeasible: %s", cell.alpha, cell.n, cell.pooling, exc)
        return cell
    dets = detect_split(model, dataset, "test", cfg)
    ev = evaluate(dets, dataset.ground_truths("test"), SWEEP_THRESHOLDS, cfg.strict_matching)
    cell.mAP = ev.mAP
    cell.status = "flagged" if cell.skipped else "ok"
    return cell


def run_sweep(dataset, base: TrainConfig, alphas: Sequence[int], ns: Sequence[Optional[int]],
              methods: Sequence[str], on_cell=None) -> List[SweepCell]:
    cells = []
    for a, n, m in itertools.product(alphas, ns, methods):
        cell = run_cell(dataset, base, SweepCell(a, n, m))
        cells.append(cell)
        if on_cell is not None:
            on_cell(cell)
    return cells


def sweep_csv(cells: Sequence[SweepCell]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for c in cells:
        w.writerow(c.row())
    return buf.getvalue()
