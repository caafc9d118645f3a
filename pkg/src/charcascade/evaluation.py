"""FAR / FRR measurement, the feature-kind x overlap experiment grid, reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .boosting import TrainConfig, TrainingHalted, train_cascade
from .classifiers import Cascade, evaluate_patches, save_cascade
from .dataset import DIGITS, LABELS, DatasetConfig, Provenance, overlap, prepare
from .detector import Detection
from .features import KINDS, parse_kind

log = logging.getLogger(__name__)

NA = "n/a"
EMPTY_CELL = "—"  # em dash marks grid cells without a result
DEFAULT_OVERLAPS = (0.5, 0.6, 0.7, 0.75, 0.8, 0.9)
RESULTS_VERSION = 1


def _rate(k: int, n: int) -> float | None:
    return k / n if n else None


def fmt_rate(v: float | None, percent: bool = False, digits: int = 6) -> str:
    if v is None:
        return NA
    return f"{100 * v:.2f}" if percent else f"{v:.{digits}g}"


@dataclass
class EvalMetrics:
    """Per-window error rates; a rate is ``None`` (shown "n/a") when its class is empty."""

    far: float | None
    frr: float | None
    n_pos: int
    n_neg: int
    false_accepts: int
    false_rejects: int
    feature_count: int
    stage_count: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Measurement:
    metrics: EvalMetrics
    # per-sample decision log: label (1/0), stages passed, last stage score, accepted
    labels: np.ndarray
    passed: np.ndarray
    scores: np.ndarray
    accepted: np.ndarray
    sources: list[Provenance] | None = None

    def log_lines(self) -> str:
        """Decision log as TSV (``label passed score accepted [image x y w h]``)."""
        out = io.StringIO()
        out.write("label\tpassed\tscore\taccepted\timage_id\tx\ty\tw\th\n")
        for i in range(len(self.labels)):
            src = ""
            if self.sources is not None:
                s = self.sources[i]
                src = f"{s.image_id}\t{s.rect.x}\t{s.rect.y}\t{s.rect.w}\t{s.rect.h}"
            else:
                src = "\t\t\t\t"
            out.write(f"{int(self.labels[i])}\t{int(self.passed[i])}\t{self.scores[i]!r}\t"
                      f"{int(self.accepted[i])}\t{src}\n")
        return out.getvalue()


def metrics_from_log(labels, accepted, feature_count: int = 0, stage_count: int = 0) -> EvalMetrics:
    """Rates recomputed from a raw decision log."""
    labels = np.asarray(labels).astype(bool)
    accepted = np.asarray(accepted).astype(bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    fa = int((accepted & ~labels).sum())
    fr = int((~accepted & labels).sum())
    return EvalMetrics(_rate(fa, n_neg), _rate(fr, n_pos), n_pos, n_neg, fa, fr, feature_count,
                       stage_count)


def measure(cascade: Cascade, positives, negatives,
            sources: list[Provenance] | None = None) -> Measurement:
    """Count acceptances of ``cascade`` over labelled aperture patches.

    FAR is accepted negatives / negatives and FRR is rejected positives /
    positives, both per window. ``sources`` (positives then negatives) is
    carried into the decision log.
    """
    ap = cascade.aperture
    shape = (0, ap.height, ap.width)
    pos = np.asarray(positives, dtype=np.uint8).reshape((-1,) + shape[1:]) if len(positives) else np.empty(shape, np.uint8)
    neg = np.asarray(negatives, dtype=np.uint8).reshape((-1,) + shape[1:]) if len(negatives) else np.empty(shape, np.uint8)
    patches = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos), np.uint8), np.zeros(len(neg), np.uint8)])
    if len(patches):
        passed, scores = evaluate_patches(cascade, patches)
    else:
        passed, scores = np.zeros(0, np.int32), np.zeros(0)
    accepted = passed == len(cascade.stages)
    m = metrics_from_log(labels, accepted, cascade.feature_count, len(cascade.stages))
    return Measurement(m, labels, passed, scores, accepted, sources)


def false_positives_per_image(dets_by_image: dict[str, Sequence[Detection]],
                              boxes_by_image: dict[str, Sequence], overlap_threshold: float) -> dict[str, int]:
    """Detections overlapping no marked box by ``overlap_threshold`` or more, per image."""
    out = {}
    for img, dets in sorted(dets_by_image.items()):
        boxes = boxes_by_image.get(img, [])
        out[img] = sum(1 for d in dets if all(overlap(d.rect, b) < overlap_threshold for b in boxes))
    return out


# -- experiment grid ----------------------------------------------------------------------


@dataclass
class ExperimentGrid:
    feature_kinds: list[str] = field(default_factory=lambda: list(KINDS))
    overlap_thresholds: list[float] = field(default_factory=lambda: list(DEFAULT_OVERLAPS))
    detector_targets: list[str] = field(default_factory=lambda: ["number"])

    def __post_init__(self):
        if not self.feature_kinds or not self.overlap_thresholds or not self.detector_targets:
            raise ValueError("every grid axis needs at least one value")
        for k in self.feature_kinds:
            parse_kind(k)
        for t in self.overlap_thresholds:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"overlap threshold {t} outside (0, 1]")
        for lb in self.detector_targets:
            if lb not in LABELS:
                raise ValueError(f"unknown detector target {lb!r}")

    def cells(self) -> list[tuple[str, float, str]]:
        return [(k, float(t), lb) for lb in self.detector_targets for k in self.feature_kinds
                for t in self.overlap_thresholds]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentGrid":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class CellResult:
    kind: str
    overlap: float
    target: str
    status: str  # ok | halted | failed
    seed: int = 0
    n_train_pos: int = 0
    n_train_neg: int = 0
    n_test_pos: int = 0
    n_test_neg: int = 0
    feature_count: int = 0
    stage_count: int = 0
    far: float | None = None
    frr: float | None = None
    stop_reason: str = ""
    seconds: float = 0.0
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


RESULT_FIELDS = tuple(f.name for f in fields(CellResult))


def cell_name(kind: str, thr: float, target: str) -> str:
    return f"{target}_{kind.replace(':', '-')}_{thr:.4f}"


def cell_seed(master: int, kind: str, thr: float, target: str) -> int:
    """Seed of one grid cell from the master seed and the cell's coordinates only."""
    base, template = parse_kind(kind)
    key = [master, KINDS.index(base), len(template or ""), int(round(thr * 10000)), LABELS.index(target)]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def run_cell(kind: str, thr: float, target: str, entries, dataset_cfg: DatasetConfig,
             train_cfg: TrainConfig, negatives: int, master_seed: int, cell_dir: Path | None = None,
             workers: int = 1) -> CellResult:
    """Prepare samples, train one cascade and measure it on the held-out side."""
    seed = cell_seed(master_seed, kind, thr, target)
    res = CellResult(kind, thr, target, "failed", seed)
    t0 = time.perf_counter()
    try:
        dcfg = DatasetConfig.from_dict({**dataset_cfg.to_dict(), "overlap_threshold": thr, "seed": seed})
        data = prepare(entries, dcfg, target, negatives, workers)
        train, test = data["train"], data["test"]
        res.n_train_pos, res.n_train_neg = len(train.positives), len(train.negatives)
        res.n_test_pos, res.n_test_neg = len(test.positives), len(test.negatives)
        tcfg = TrainConfig.from_dict({**train_cfg.to_dict(), "feature_kind": kind, "seed": seed,
                                      "workers": workers})
        test_ids = set(data["manifest"]["images"]["test"])
        mining = [img for ann, img in entries if not ann.boxes and ann.image_id not in test_ids]
        cascade, trace = train_cascade(train.positives, train.negatives, tcfg, target, mining or None)
        m = measure(cascade, test.positives, test.negatives, test.pos_source + test.neg_source)
        res.feature_count, res.stage_count = cascade.feature_count, len(cascade.stages)
        res.far, res.frr = m.metrics.far, m.metrics.frr
        res.stop_reason = trace.stop_reason
        res.status = "halted" if trace.halted else "ok"
        if cell_dir is not None:
            save_cascade(cascade, cell_dir / "model.json")
            _write_atomic(cell_dir / "decisions.tsv", m.log_lines())
            _write_atomic(cell_dir / "trace.json", json.dumps(trace.to_dict(), indent=1, sort_keys=True) + "\n")
    except (TrainingHalted, ValueError) as exc:
        res.status = "halted" if isinstance(exc, TrainingHalted) else "failed"
        res.error = str(exc)
    except Exception as exc:  # noqa: BLE001 -- a failed cell must not stop the grid
        res.error = f"{type(exc).__name__}: {exc}"
        log.debug("cell failed:\n%s", traceback.format_exc())
    res.seconds = round(time.perf_counter() - t0, 3)
    return res


def run_grid(grid: ExperimentGrid, entries, dataset_cfg: DatasetConfig, train_cfg: TrainConfig,
             out_dir=None, negatives: int = 20000, master_seed: int = 0,
             workers: int = 1) -> list[CellResult]:
    """Train and measure every (kind, overlap, target) cell.

    With ``out_dir`` each finished cell is written to
    ``cells/<name>/metrics.json`` (atomically) and skipped on later runs.
    Cells run concurrently up to ``workers``; the budget left over is
    handed to the training inside each cell.
    """
    cells = grid.cells()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "cells").mkdir(parents=True, exist_ok=True)
    par = max(1, min(workers, len(cells)))
    inner = max(1, workers // par)

    def one(cell):
        kind, thr, target = cell
        cdir = None
        if out is not None:
            cdir = out / "cells" / cell_name(kind, thr, target)
            done = cdir / "metrics.json"
            if done.exists():
                return CellResult(**json.loads(done.read_text(encoding="utf-8")))
            cdir.mkdir(parents=True, exist_ok=True)
        log.info("cell %s / %s / %.2f", target, kind, thr)
        res = run_cell(kind, thr, target, entries, dataset_cfg, train_cfg, negatives, master_seed,
                       cdir, inner)
        if cdir is not None:
            _write_atomic(cdir / "metrics.json", json.dumps(res.to_dict(), indent=1, sort_keys=True) + "\n")
        return res

    if par > 1:
        with ThreadPoolExecutor(max_workers=par) as ex:
            return list(ex.map(one, cells))
    return [one(c) for c in cells]


# -- reports -------------------------------------------------------------------------------


def results_csv(results: Sequence[CellResult]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in results:
        w.writerow(["" if getattr(r, f) is None else repr(getattr(r, f)) if isinstance(getattr(r, f), float)
                    else getattr(r, f) for f in RESULT_FIELDS])
    return out.getvalue()


_FLOAT_FIELDS = {"overlap", "far", "frr", "seconds"}
_INT_FIELDS = {"seed", "n_train_pos", "n_train_neg", "n_test_pos", "n_test_neg", "feature_count",
               "stage_count"}


def parse_results_csv(text: str) -> list[CellResult]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        d: dict = {}
        for k, v in row.items():
            if k in _FLOAT_FIELDS:
                d[k] = None if v == "" else float(v)
            elif k in _INT_FIELDS:
                d[k] = int(v)
            else:
                d[k] = v
        out.append(CellResult(**d))
    return out


SERIES = {
    "positives": ("n_train_pos", "exported training positives"),
    "feature_count": ("feature_count", "weak classifiers in the cascade"),
    "frr": ("frr", "FRR on the test side"),
}


def series(results: Sequence[CellResult], target: str, metric: str) -> dict[str, dict[float, float | None]]:
    """``{kind: {overlap: value}}`` for one detector target (failed cells omitted)."""
    attr = SERIES[metric][0]
    out: dict = {}
    for r in results:
        if r.target != target or r.status == "failed":
            continue
        out.setdefault(r.kind, {})[r.overlap] = getattr(r, attr)
    return out


def series_csv(s: dict[str, dict[float, float | None]]) -> str:
    kinds = sorted(s, key=lambda k: (KINDS.index(parse_kind(k)[0]), k))
    xs = sorted({x for v in s.values() for x in v})
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["overlap"] + kinds)
    for x in xs:
        row = [repr(x)]
        for k in kinds:
            v = s[k].get(x)
            row.append("" if v is None else repr(v))
        w.writerow(row)
    return out.getvalue()


def parse_series_csv(text: str) -> dict[str, dict[float, float | None]]:
    rows = list(csv.reader(io.StringIO(text)))
    kinds = rows[0][1:]
    out: dict = {k: {} for k in kinds}
    for row in rows[1:]:
        x = float(row[0])
        for k, v in zip(kinds, row[1:]):
            if v != "":
                num = float(v)
                out[k][x] = int(num) if num.is_integer() and "." not in v and "e" not in v else num
    return out


def digit_table(results: Sequence[CellResult], kind: str, thr: float) -> str:
    """Per-digit table laid out as rows Training / Testing / FRR(%) by digits 0-9."""
    cell = {r.target: r for r in results
            if r.kind == kind and abs(r.overlap - thr) < 1e-9 and r.target in DIGITS and r.status != "failed"}
    head = ["Digit"] + list(DIGITS)
    rows = [
        ["Training"] + [str(cell[d].n_train_pos) if d in cell else EMPTY_CELL for d in DIGITS],
        ["Testing"] + [str(cell[d].n_test_pos) if d in cell else EMPTY_CELL for d in DIGITS],
        ["FRR(%)"] + [fmt_rate(cell[d].frr, percent=True) if d in cell else EMPTY_CELL for d in DIGITS],
    ]
    width = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    lines = ["  ".join(c.rjust(width[i]) if i else c.ljust(width[i]) for i, c in enumerate(r)) for r in [head] + rows]
    return "\n".join(lines) + "\n"


def results_table(results: Sequence[CellResult]) -> str:
    head = ["target", "kind", "overlap", "status", "train+", "test+", "test-", "features", "stages",
            "FAR", "FRR(%)", "seconds"]
    rows = [[r.target, r.kind, f"{r.overlap:.2f}", r.status, str(r.n_train_pos), str(r.n_test_pos),
             str(r.n_test_neg), str(r.feature_count), str(r.stage_count), fmt_rate(r.far),
             fmt_rate(r.frr, percent=True), f"{r.seconds:.1f}"] for r in results]
    width = [max(len(x[i]) for x in [head] + rows) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(width[i]) for i, c in enumerate(x)) for x in [head] + rows) + "\n"


def _plot(s: dict, ylabel: str, title: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "charcascade"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind in sorted(s):
        pts = sorted((x, v) for x, v in s[kind].items() if v is not None)
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=kind)
    ax.set_xlabel("overlap threshold")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if ax.lines:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def sort_results(results: Sequence[CellResult]) -> list[CellResult]:
    return sorted(results, key=lambda r: (LABELS.index(r.target), KINDS.index(parse_kind(r.kind)[0]),
                                          r.kind, r.overlap))


def emit_reports(results: Sequence[CellResult], out_dir, plots: bool = True) -> list[Path]:
    """Write the results table/CSV, per-target series CSVs and plots, and
    per-digit tables; returns the written paths."""
    if not results:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = sort_results(results)
    written = []

    def put(name: str, text: str):
        p = out / name
        _write_atomic(p, text)
        written.append(p)

    put("results.csv", results_csv(results))
    put("results.txt", results_table(results))
    targets = [t for t in LABELS if any(r.target == t for r in results)]
    for t in targets:
        for metric, (_, ylabel) in SERIES.items():
            s = series(results, t, metric)
            put(f"series_{metric}_{t}.csv", series_csv(s))
            if plots:
                p = out / f"series_{metric}_{t}.svg"
                _plot(s, ylabel, f"detector {t}", p)
                written.append(p)
    if any(r.target in DIGITS for r in results):
        combos = sorted({(r.kind, r.overlap) for r in results if r.target in DIGITS},
                        key=lambda c: (KINDS.index(parse_kind(c[0])[0]), c[0], c[1]))
        for kind, thr in combos:
            put(f"digits_{kind.replace(':', '-')}_{thr:.2f}.txt", digit_table(results, kind, thr))
    return written
