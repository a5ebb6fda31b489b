"""Target accuracy, domain-assignment analysis, alpha sweeps and report files."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from .exceptions import DGMixError, ValidationError
from .train import train

logger = logging.getLogger(__name__)


@dataclass
class ResultTable:
    angles: list
    accuracies: list

    def __post_init__(self):
        if len(self.angles) != len(self.accuracies):
            raise ValidationError("angles and accuracies differ in length")
        for a in self.accuracies:
            if not 0.0 <= a <= 1.0:
                raise ValidationError(f"accuracy {a} outside [0, 1]")

    @property
    def mean(self):
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    def as_dict(self):
        return dict(zip(self.angles, self.accuracies))


@dataclass
class AssignmentMatrix:
    row_labels: list  # target rotation angle per row
    col_labels: list  # source angle per column
    values: np.ndarray  # row-normalized frequencies
    counts: np.ndarray
    warnings: list = field(default_factory=list)


def accuracy(params, dataset, alpha):
    """Fraction of ``dataset`` samples whose prediction matches the label."""
    if len(dataset) == 0:
        raise ValidationError("cannot score an empty dataset")
    pred, _ = M.predict(dataset.images, params, alpha)
    return float(np.mean(pred == dataset.labels))


def assignment_counts(w):
    """Histogram of ``argmax_j w_ij`` (ties to the lowest j)."""
    w = np.asarray(w)
    return np.bincount(np.argmax(w, axis=1), minlength=w.shape[1])


def assignment_matrix(params, groups, source_angles=None, alpha=0.0):
    """Row-normalized argmax assignments of target samples to source domains.

    ``groups`` maps a row label (the true rotation angle) to the images of
    that group.  Empty groups are dropped and noted in ``warnings``.
    """
    n = params.arch.n_domains
    cols = list(source_angles) if source_angles is not None else list(range(1, n + 1))
    rows, counts, warnings = [], [], []
    for label, images in groups.items():
        if len(images) == 0:
            warnings.append(f"group {label!r} is empty; row omitted")
            logger.warning(warnings[-1])
            continue
        _, w = M.predict(images, params, alpha)
        rows.append(label)
        counts.append(assignment_counts(w))
    counts = np.array(counts, dtype=np.int64).reshape(len(rows), n)
    values = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
    return AssignmentMatrix(rows, cols, values, counts, warnings)


def episode_assignment(params, episode, alpha=0.0):
    """Single-row matrix for an episode's target domain."""
    return assignment_matrix(params, {episode.target.angle: episode.target.images}, episode.source_angles, alpha)


def train_and_score(config, episode):
    result = train(config, episode)
    return result, accuracy(result.params, episode.target, config.alpha)


def alpha_sweep(config, episodes, alphas):
    """Train one model per (alpha, episode) with shared seeds.

    The same alpha drives training switches and the inference blend.
    Returns ``{alpha: ResultTable}`` with one column per target angle.
    """
    if not isinstance(episodes, (list, tuple)):
        episodes = [episodes]
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValidationError(f"alpha {a} outside [0, 1]")
    out = {}
    for a in alphas:
        cfg = replace(config, alpha=float(a))
        accs = [train_and_score(cfg, ep)[1] for ep in episodes]
        out[float(a)] = ResultTable([ep.target.angle for ep in episodes], accs)
    return out


# ------------------------------------------------------------------- writers

def _num(x):
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def write_table_csv(table, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["angle", "accuracy"])
        for a, acc in zip(table.angles, table.accuracies):
            w.writerow([_num(a), repr(float(acc))])


def read_table_csv(path):
    angles, accs = [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            a = float(row["angle"])
            angles.append(int(a) if a.is_integer() else a)
            accs.append(float(row["accuracy"]))
    return ResultTable(angles, accs)


def write_sweep_csv(sweep, path):
    """Alpha-sensitivity table: one row per alpha, one column per target angle."""
    angles = next(iter(sweep.values())).angles if sweep else []
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["alpha"] + [_num(a) for a in angles] + ["mean"])
        for alpha, table in sweep.items():
            w.writerow([repr(float(alpha))] + [repr(float(x)) for x in table.accuracies] + [repr(table.mean)])


def heatmap_pgm(values, scale=1):
    """Plain (P2) graymap text with 1.0 -> 255; each cell becomes ``scale``x``scale`` pixels."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    px = np.rint(v * 255).astype(int)
    px = np.kron(px, np.ones((scale, scale), dtype=int))
    h, w = px.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(map(str, row)) for row in px]
    return "\n".join(lines) + "\n"


def export_results(tables, matrices, path_prefix, meta=None):
    """Write CSV + JSON for every table and a PGM heatmap for every matrix.

    ``tables`` and ``matrices`` are dicts keyed by a short name used in the
    file names.  Returns the list of written paths.
    """
    prefix = Path(path_prefix)
    written = []
    try:
        prefix.parent.mkdir(parents=True, exist_ok=True)
        for name, table in tables.items():
            p = prefix.with_name(f"{prefix.name}_{name}.csv")
            write_table_csv(table, p)
            written.append(p)
        for name, mat in matrices.items():
            p = prefix.with_name(f"{prefix.name}_{name}.pgm")
            p.write_text(heatmap_pgm(mat.values))
            written.append(p)
        doc = {
            "meta": meta or {},
            "tables": {
                name: {"angles": list(t.angles), "accuracies": [float(x) for x in t.accuracies], "mean": t.mean}
                for name, t in tables.items()
            },
            "assignments": {
                name: {
                    "rows": list(m.row_labels),
                    "columns": list(m.col_labels),
                    "values": m.values.tolist(),
                    "counts": m.counts.tolist(),
                    "warnings": list(m.warnings),
                }
                for name, m in matrices.items()
            },
        }
        p = prefix.with_name(f"{prefix.name}.json")
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        written.append(p)
    except OSError as exc:
        raise DGMixError(f"writing results under {prefix}: {exc}") from exc
    return written
