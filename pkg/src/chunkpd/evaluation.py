"""Leakage-controlled splits, confusion metrics, weighted accuracy and the ablation driver."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from chunkpd.classify import NEGATIVE, POSITIVE, ImagePrediction
from chunkpd.dataset import DRAWING_TYPES, DrawingSample, Manifest
from chunkpd.errors import DegenerateFold, EmptyInput, EmptyPredictions, TooFewSubjects, UnknownId

log = logging.getLogger(__name__)

STRATEGIES = ("img_cv5", "ind_cv5", "loio")
N_FOLDS = 5
REPORT_FORMAT = "chunkpd.report"
REPORT_VERSION = 1
CSV_COLUMNS = ("BB", "Draw/Cls", "Acc", "Prec", "Rec", "F1", "TP", "FP", "TN", "FN", "Aug", "Chnk")
_SHORT = {"circle": "Circ", "meander": "Meand", "spiral": "Spir"}
_CLS_SHORT = {"knn": "KNN", "decision_tree": "DT", "random_forest": "RF", "neural_net": "NN"}
_BB_SHORT = {"residual_cnn": "ResNet", "pyramid_transformer": "PVT", "hybrid_concat": "PVT+ResNet"}


@dataclass(frozen=True)
class Fold:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    strategy: str
    folds: tuple[Fold, ...]
    granularity: str  # "image" or "subject"
    seed: int

    @property
    def fingerprint(self) -> str:
        blob = json.dumps([self.strategy, self.granularity, [[f.train_ids, f.test_ids] for f in self.folds]])
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "granularity": self.granularity,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "folds": [{"train_ids": list(f.train_ids), "test_ids": list(f.test_ids)} for f in self.folds],
        }


def _deal(groups: Iterable[Sequence[str]], n_folds: int, rng: np.random.Generator) -> list[list[str]]:
    """Shuffle each group and deal its members round-robin, continuing the rotation
    across groups, so every group is spread over folds as evenly as possible."""
    buckets: list[list[str]] = [[] for _ in range(n_folds)]
    pos = 0
    for members in groups:
        for u in rng.permutation(sorted(members)).tolist():
            buckets[pos % n_folds].append(u)
            pos += 1
    return buckets


def make_split(manifest: Manifest, strategy: str, seed: int = 0) -> SplitPlan:
    """Cross-validation folds over sample ids.

    img_cv5 stratifies by (drawing type, label) at image level; ind_cv5
    stratifies subjects by label; loio holds out one subject per fold.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    rng = np.random.default_rng(seed)
    by_subject: dict[str, list[str]] = {}
    for s in manifest.samples:
        by_subject.setdefault(s.subject_id, []).append(s.sample_id)
    subject_label = {r.subject_id: r.label for r in manifest.subjects}
    all_ids = [s.sample_id for s in manifest.samples]

    if strategy == "img_cv5":
        if len(all_ids) < N_FOLDS:
            raise TooFewSubjects(f"img_cv5 needs at least {N_FOLDS} images, got {len(all_ids)}")
        strata: dict[tuple[str, str], list[str]] = {}
        for s in manifest.samples:
            strata.setdefault((s.drawing_type, s.label), []).append(s.sample_id)
        buckets = _deal([strata[k] for k in sorted(strata)], N_FOLDS, rng)
        test_sets = [set(b) for b in buckets]
        granularity = "image"
    else:
        subjects = sorted(by_subject)
        if strategy == "ind_cv5":
            if len(subjects) < N_FOLDS:
                raise TooFewSubjects(f"ind_cv5 needs at least {N_FOLDS} subjects, got {len(subjects)}")
            groups = [[s for s in subjects if subject_label[s] == lab] for lab in (POSITIVE, NEGATIVE)]
            subject_buckets = _deal(groups, N_FOLDS, rng)
        else:
            if len(subjects) < 2:
                raise TooFewSubjects(f"loio needs at least 2 subjects, got {len(subjects)}")
            subject_buckets = [[s] for s in subjects]
        test_sets = [{sid for subj in b for sid in by_subject[subj]} for b in subject_buckets]
        granularity = "subject"

    label_of = {s.sample_id: s.label for s in manifest.samples}
    folds = []
    for i, test in enumerate(test_sets):
        train = [sid for sid in all_ids if sid not in test]
        missing = {POSITIVE, NEGATIVE} - {label_of[sid] for sid in train}
        if missing:
            raise DegenerateFold(f"{strategy} fold {i}: training set has no {sorted(missing)} samples")
        folds.append(Fold(tuple(train), tuple(sid for sid in all_ids if sid in test)))
    return SplitPlan(strategy, tuple(folds), granularity, seed)


@dataclass(frozen=True)
class LeakageReport:
    strategy: str
    # per fold: subjects with samples on both sides
    overlaps: tuple[tuple[str, ...], ...]

    @property
    def counts(self) -> list[int]:
        return [len(o) for o in self.overlaps]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "overlap_counts": self.counts,
            "overlapping_subjects": [list(o) for o in self.overlaps],
            "total": self.total,
        }


def audit_leakage(plan: SplitPlan, manifest: Manifest) -> LeakageReport:
    subject_of = {s.sample_id: s.subject_id for s in manifest.samples}
    overlaps = []
    for i, f in enumerate(plan.folds):
        unknown = [sid for sid in f.train_ids + f.test_ids if sid not in subject_of]
        if unknown:
            raise UnknownId(f"fold {i} references ids absent from the manifest: {unknown[:5]}")
        train_subj = {subject_of[s] for s in f.train_ids}
        test_subj = {subject_of[s] for s in f.test_ids}
        overlaps.append(tuple(sorted(train_subj & test_subj)))
    return LeakageReport(plan.strategy, tuple(overlaps))


def check_plan(plan: SplitPlan, manifest: Manifest) -> list[str]:
    """Structural problems with a plan (empty when it is a valid partition)."""
    problems = []
    ids = [s.sample_id for s in manifest.samples]
    tested: dict[str, int] = {}
    for i, f in enumerate(plan.folds):
        if set(f.train_ids) & set(f.test_ids):
            problems.append(f"fold {i}: train and test intersect")
        if set(f.train_ids) | set(f.test_ids) != set(ids):
            problems.append(f"fold {i}: train and test do not cover the manifest")
        for sid in f.test_ids:
            tested[sid] = tested.get(sid, 0) + 1
    for sid in ids:
        if tested.get(sid, 0) != 1:
            problems.append(f"{sid} tested {tested.get(sid, 0)} times")
    return problems


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class TypeMetrics:
    counts: ConfusionCounts
    accuracy: float
    precision: float | None
    recall: float | None
    f1: float | None
    undefined: tuple[str, ...] = ()


def metrics_from_counts(c: ConfusionCounts) -> TypeMetrics:
    """Accuracy/precision/recall/F1 with PD positive; zero denominators give None and a flag."""
    if c.total == 0:
        raise EmptyPredictions("no predictions to score")
    undefined = []
    acc = (c.tp + c.tn) / c.total
    prec = c.tp / (c.tp + c.fp) if c.tp + c.fp else None
    rec = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    if prec is None:
        undefined.append("precision")
    if rec is None:
        undefined.append("recall")
    if prec is None or rec is None or prec + rec == 0:
        f1 = None
        undefined.append("f1")
    else:
        f1 = 2 * prec * rec / (prec + rec)
    return TypeMetrics(c, acc, prec, rec, f1, tuple(undefined))


def confusion(preds: Sequence[tuple[ImagePrediction | str, str]]) -> ConfusionCounts:
    tp = fp = tn = fn = 0
    for pred, truth in preds:
        label = pred.label if isinstance(pred, ImagePrediction) else pred
        if label == POSITIVE:
            tp, fp = (tp + 1, fp) if truth == POSITIVE else (tp, fp + 1)
        else:
            tn, fn = (tn + 1, fn) if truth == NEGATIVE else (tn, fn + 1)
    return ConfusionCounts(tp, fp, tn, fn)


def compute_metrics(preds: Sequence[tuple[ImagePrediction | str, str]], drawing_type: str | None = None) -> TypeMetrics:
    """Score (prediction, true label) pairs for one drawing type."""
    if not preds:
        raise EmptyPredictions(f"no predictions for {drawing_type or 'this group'}")
    return metrics_from_counts(confusion(preds))


def weighted_accuracy(per_type: Sequence[tuple[float, int]]) -> float:
    """Sample-count weighted mean of per-type accuracies."""
    if not per_type:
        raise EmptyInput("weighted accuracy of an empty list")
    for acc, n in per_type:
        if n <= 0:
            raise ValueError(f"group sizes must be positive, got {n}")
    return math.fsum(a * n for a, n in per_type) / sum(n for _, n in per_type)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    strategy: str
    per_type: dict[str, TypeMetrics]
    weighted_accuracy: float
    config_fingerprint: str = ""
    split_fingerprint: str = ""
    per_fold: list[dict] = field(default_factory=list)
    stage1_accuracy: float | None = None
    tie_broken: int = 0
    leakage: dict | None = None
    # per drawing type: backbone kind / classifier kind, and the aug/chunk flags
    setup: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, strategy: str, rows: Sequence[tuple[str, str, ImagePrediction]], **kw) -> "MetricsReport":
        """``rows`` are (drawing_type, true label, prediction)."""
        per_type = {}
        for d in DRAWING_TYPES:
            group = [(p, y) for t, y, p in rows if t == d]
            if group:
                per_type[d] = compute_metrics(group, d)
        wa = weighted_accuracy([(m.accuracy, m.counts.total) for m in per_type.values()])
        ties = sum(p.tie_broken for _, _, p in rows)
        return cls(strategy, per_type, wa, tie_broken=ties, **kw)

    def recomputed_weighted_accuracy(self) -> float:
        return weighted_accuracy([(m.accuracy, m.counts.total) for m in self.per_type.values()])

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "strategy": self.strategy,
            "config_fingerprint": self.config_fingerprint,
            "split_fingerprint": self.split_fingerprint,
            "weighted_accuracy": self.weighted_accuracy,
            "stage1_accuracy": self.stage1_accuracy,
            "tie_broken": self.tie_broken,
            "per_type": {d: {**asdict(m), "counts": asdict(m.counts)} for d, m in self.per_type.items()},
            "per_fold": self.per_fold,
            "leakage": self.leakage,
            "setup": self.setup,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        per_type = {}
        for t, m in d["per_type"].items():
            per_type[t] = TypeMetrics(ConfusionCounts(**m["counts"]), m["accuracy"], m["precision"], m["recall"], m["f1"], tuple(m["undefined"]))
        return cls(
            d["strategy"], per_type, d["weighted_accuracy"], d.get("config_fingerprint", ""), d.get("split_fingerprint", ""),
            d.get("per_fold", []), d.get("stage1_accuracy"), d.get("tie_broken", 0), d.get("leakage"), d.get("setup", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table_rows(self) -> list[dict]:
        rows = []
        aug = "Yes" if self.setup.get("augmentation") else "No"
        n = self.setup.get("grid", 2)
        chunk = f"{n}×{n}" if n > 1 else "No"
        for d, m in self.per_type.items():
            bb = _BB_SHORT.get(self.setup.get("encoders", {}).get(d, ""), "")
            cls_ = _CLS_SHORT.get(self.setup.get("classifiers", {}).get(d, ""), "")
            c = m.counts
            rows.append({
                "BB": bb,
                "Draw/Cls": f"{_SHORT[d]}–{cls_}" if cls_ else _SHORT[d],
                "Acc": _fmt(m.accuracy), "Prec": _fmt(m.precision), "Rec": _fmt(m.recall), "F1": _fmt(m.f1),
                "TP": c.tp, "FP": c.fp, "TN": c.tn, "FN": c.fn, "Aug": aug, "Chnk": chunk,
            })
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.table_rows())
        buf.write(f"Weighted Avg,{self.weighted_accuracy * 100:.2f}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        rows = self.table_rows()
        widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in CSV_COLUMNS} if rows else {c: len(c) for c in CSV_COLUMNS}
        line = "  ".join(c.ljust(widths[c]) for c in CSV_COLUMNS)
        out = [f"strategy: {self.strategy}", line, "-" * len(line)]
        out += ["  ".join(str(r[c]).ljust(widths[c]) for c in CSV_COLUMNS) for r in rows]
        out.append(f"weighted accuracy: {self.weighted_accuracy * 100:.2f}%")
        if self.stage1_accuracy is not None:
            out.append(f"drawing-type accuracy: {self.stage1_accuracy * 100:.2f}%")
        out.append(f"tie-broken votes: {self.tie_broken}")
        return "\n".join(out)


def _fmt(v: float | None) -> str:
    return "undefined" if v is None else f"{v:.3f}"


# ---------------------------------------------------------------------------
# cross-validation and ablation


class Predictor:
    """What a trained pipeline must offer to be cross-validated."""

    def predict_images(self, samples: Sequence[DrawingSample]) -> list[tuple[str, ImagePrediction]]:
        """(routed drawing type, image prediction) per sample."""
        raise NotImplementedError


def cross_validate(
    manifest: Manifest,
    plan: SplitPlan,
    fit: Callable[[Manifest, int], Predictor],
    config_fingerprint: str = "",
    setup: dict | None = None,
) -> MetricsReport:
    """Train on each fold's training part, predict its test part, and pool the predictions.

    Folds are reduced in index order so the report does not depend on
    evaluation order.
    """
    index = manifest.sample_index()
    rows: list[tuple[str, str, ImagePrediction]] = []
    per_fold = []
    routed_ok = 0
    for i, fold in enumerate(plan.folds):
        predictor = fit(manifest.subset(fold.train_ids), i)
        samples = [index[sid] for sid in fold.test_ids]
        out = predictor.predict_images(samples)
        fold_rows = []
        for s, (routed, pred) in zip(samples, out):
            fold_rows.append((s.drawing_type, s.label, pred))
            routed_ok += routed == s.drawing_type
        rows.extend(fold_rows)
        fold_counts = {d: asdict(confusion([(p, y) for t, y, p in fold_rows if t == d])) for d in DRAWING_TYPES}
        per_fold.append({"fold": i, "n_test": len(samples), "counts": fold_counts})
        log.info("fold %d/%d done (%d test images)", i + 1, len(plan.folds), len(samples))
    report = MetricsReport.from_predictions(
        plan.strategy, rows, config_fingerprint=config_fingerprint, split_fingerprint=plan.fingerprint,
        per_fold=per_fold, setup=setup or {},
    )
    report.stage1_accuracy = routed_ok / len(rows) if rows else None
    report.leakage = audit_leakage(plan, manifest).to_dict()
    return report


@dataclass(frozen=True)
class AblationCell:
    chunking: bool
    augmentation: bool

    @property
    def name(self) -> str:
        return f"chunk={'on' if self.chunking else 'off'},aug={'on' if self.augmentation else 'off'}"


FULL_MATRIX = (AblationCell(True, True), AblationCell(True, False), AblationCell(False, True), AblationCell(False, False))
REFERENCE = AblationCell(True, True)


@dataclass
class AblationTable:
    split_fingerprint: str
    cells: list[tuple[AblationCell, MetricsReport]]

    def reference(self) -> MetricsReport | None:
        for cell, rep in self.cells:
            if cell == REFERENCE:
                return rep
        return None

    def rows(self) -> list[dict]:
        ref = self.reference()
        out = []
        for cell, rep in self.cells:
            out.append({
                "cell": cell.name,
                "chunking": cell.chunking,
                "augmentation": cell.augmentation,
                "reference": cell == REFERENCE,
                "weighted_accuracy": rep.weighted_accuracy,
                "delta_vs_reference": None if ref is None else rep.weighted_accuracy - ref.weighted_accuracy,
                "tie_broken": rep.tie_broken,
                "split_fingerprint": rep.split_fingerprint,
                **{f"acc_{d}": m.accuracy for d, m in rep.per_type.items()},
            })
        return out

    def to_dict(self) -> dict:
        return {
            "format": "chunkpd.ablation",
            "version": 1,
            "split_fingerprint": self.split_fingerprint,
            "rows": self.rows(),
            "reports": [{"cell": c.name, "report": r.to_dict()} for c, r in self.cells],
        }

    def to_csv(self) -> str:
        rows = self.rows()
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return buf.getvalue()


def run_ablation(
    manifest: Manifest,
    matrix: Sequence[AblationCell],
    fit_for_cell: Callable[[AblationCell], Callable[[Manifest, int], Predictor]],
    seed: int = 0,
    strategy: str = "ind_cv5",
    setup_for_cell: Callable[[AblationCell], dict] | None = None,
    config_fingerprint: str = "",
) -> AblationTable:
    """One cross-validated report per cell, all on the same split plan."""
    if not matrix:
        return AblationTable("", [])
    plan = make_split(manifest, strategy, seed)
    cells = []
    for cell in matrix:
        setup = setup_for_cell(cell) if setup_for_cell else {}
        rep = cross_validate(manifest, plan, fit_for_cell(cell), config_fingerprint, setup)
        log.info("ablation %s: weighted accuracy %.4f", cell.name, rep.weighted_accuracy)
        cells.append((cell, rep))
    return AblationTable(plan.fingerprint, cells)
