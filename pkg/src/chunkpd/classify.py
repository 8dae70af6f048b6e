"""Tile-level classifiers on feature vectors and the image-level majority vote."""

from __future__ import annotations

import hashlib
import json
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.neighbors import KNeighborsClassifier
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.tree import DecisionTreeClassifier

from chunkpd.errors import (
    DimensionMismatch,
    EmptyFeatures,
    EmptyVote,
    MixedParents,
    ModelNotLoaded,
    SingleClassTraining,
)

CLASSIFIER_KINDS = ("knn", "decision_tree", "random_forest", "neural_net")
POSITIVE = "PD"
NEGATIVE = "Healthy"
STATE_FORMAT = "chunkpd.classifier"
STATE_VERSION = 1
# mean scores this close to 0.5 count as a tie
SCORE_TIE_EPS = 1e-12

_DEFAULTS = {
    "knn": {"k": 5, "weights": "uniform", "allow_even_k": False},
    "decision_tree": {"max_depth": None},
    "random_forest": {"n_trees": 100, "max_depth": None},
    "neural_net": {"hidden": 128, "epochs": 200, "standardize": True},
}


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str
    hyperparams: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CLASSIFIER_KINDS:
            raise ValueError(f"classifier kind must be one of {CLASSIFIER_KINDS}, got {self.kind!r}")
        unknown = set(self.hyperparams) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown {self.kind} hyperparameters: {sorted(unknown)}")
        hp = self.params
        if self.kind == "knn":
            if int(hp["k"]) != hp["k"] or hp["k"] < 1:
                raise ValueError(f"knn.k must be a positive integer, got {hp['k']}")
            if hp["k"] % 2 == 0 and not hp["allow_even_k"]:
                raise ValueError(f"knn.k must be odd (got {hp['k']}); set allow_even_k to override")
            if hp["weights"] not in ("uniform", "distance"):
                raise ValueError(f"knn.weights must be 'uniform' or 'distance', got {hp['weights']!r}")
        elif self.kind == "random_forest" and hp["n_trees"] < 1:
            raise ValueError(f"random_forest.n_trees must be >= 1, got {hp['n_trees']}")
        elif self.kind == "neural_net" and (hp["hidden"] < 1 or hp["epochs"] < 1):
            raise ValueError("neural_net.hidden and neural_net.epochs must be >= 1")
        for key in ("max_depth",):
            if key in hp and hp[key] is not None and hp[key] < 1:
                raise ValueError(f"{self.kind}.{key} must be >= 1 or null")

    @property
    def params(self) -> dict:
        return {**_DEFAULTS[self.kind], **self.hyperparams}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparams": dict(self.hyperparams), "seed": self.seed}


def _estimator(spec: ClassifierSpec):
    hp = spec.params
    if spec.kind == "knn":
        return KNeighborsClassifier(n_neighbors=int(hp["k"]), weights=hp["weights"])
    if spec.kind == "decision_tree":
        return DecisionTreeClassifier(max_depth=hp["max_depth"], random_state=spec.seed)
    if spec.kind == "random_forest":
        return RandomForestClassifier(n_estimators=int(hp["n_trees"]), max_depth=hp["max_depth"], random_state=spec.seed, n_jobs=1)
    mlp = MLPClassifier(hidden_layer_sizes=(int(hp["hidden"]),), max_iter=int(hp["epochs"]), random_state=spec.seed)
    return make_pipeline(StandardScaler(), mlp) if hp["standardize"] else mlp


@dataclass(eq=False)
class ClassifierState:
    spec: ClassifierSpec
    estimator: object
    feature_dim: int
    manifest_hash: str = ""

    @property
    def classes(self) -> list[str]:
        return list(self.estimator.classes_)


@dataclass(frozen=True)
class TilePrediction:
    tile_ref: tuple  # (sample_id, repeat_index, grid_pos)
    label: str
    score: float  # PD-class confidence

    @property
    def sample_id(self) -> str:
        return self.tile_ref[0]


@dataclass(frozen=True)
class ImagePrediction:
    sample_id: str
    label: str
    vote_counts: tuple[int, int]  # (pd_votes, healthy_votes)
    mean_score: float
    tie_broken: bool


def train_classifier(spec: ClassifierSpec, features: np.ndarray, labels: Sequence[str], manifest_hash: str = "") -> ClassifierState:
    """Fit one tile classifier. ``features`` is (N, dim); labels are 'PD'/'Healthy'."""
    X = np.asarray(features, dtype=np.float32)
    y = np.asarray(labels)
    if X.ndim != 2 or len(X) == 0:
        raise EmptyFeatures("no training features")
    if len(y) != len(X):
        raise ValueError(f"{len(X)} feature rows but {len(y)} labels")
    if set(y.tolist()) - {POSITIVE, NEGATIVE}:
        raise ValueError(f"labels must be PD/Healthy, got {sorted(set(y.tolist()))}")
    if len(set(y.tolist())) < 2:
        raise SingleClassTraining(f"training labels contain only {y[0]!r}")
    est = _estimator(spec)
    if spec.kind == "knn" and len(X) < spec.params["k"]:
        raise EmptyFeatures(f"knn needs at least k={spec.params['k']} training rows, got {len(X)}")
    est.fit(X, y)
    return ClassifierState(spec, est, X.shape[1], manifest_hash)


def predict_scores(state: ClassifierState, features: np.ndarray) -> np.ndarray:
    """PD-class probability for each row of ``features``."""
    if state is None or state.estimator is None:
        raise ModelNotLoaded("classifier is not trained")
    X = np.asarray(features, dtype=np.float32)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != state.feature_dim:
        raise DimensionMismatch(f"feature length {X.shape[1]} != trained dimension {state.feature_dim}")
    proba = state.estimator.predict_proba(X)
    return proba[:, state.classes.index(POSITIVE)].astype(np.float64)


def _tile_prediction(tile_ref: tuple, score: float) -> TilePrediction:
    return TilePrediction(tile_ref, POSITIVE if score >= 0.5 else NEGATIVE, float(score))


def predict_tiles(state: ClassifierState, features: np.ndarray, tile_refs: Sequence[tuple]) -> list[TilePrediction]:
    scores = predict_scores(state, features)
    return [_tile_prediction(ref, s) for ref, s in zip(tile_refs, scores)]


def predict_tile(state: ClassifierState, feature) -> TilePrediction:
    """Classify one FeatureVector."""
    score = predict_scores(state, feature.values)[0]
    return _tile_prediction(feature.tile_ref, score)


def vote(tile_preds: Sequence[TilePrediction]) -> ImagePrediction:
    """Majority vote over one image's tiles.

    Ties go to the label with the larger mean confidence (PD wins when the
    mean PD score is exactly 0.5) and are flagged with ``tie_broken``.
    """
    if not tile_preds:
        raise EmptyVote("cannot vote over zero tiles")
    parents = {p.sample_id for p in tile_preds}
    if len(parents) > 1:
        raise MixedParents(f"tiles from several images in one vote: {sorted(parents)}")
    pd_votes = sum(p.label == POSITIVE for p in tile_preds)
    healthy_votes = len(tile_preds) - pd_votes
    mean = math.fsum(p.score for p in tile_preds) / len(tile_preds)
    if pd_votes != healthy_votes:
        label, tie = (POSITIVE if pd_votes > healthy_votes else NEGATIVE), False
    else:
        label, tie = (NEGATIVE if mean < 0.5 - SCORE_TIE_EPS else POSITIVE), True
    return ImagePrediction(parents.pop(), label, (pd_votes, healthy_votes), mean, tie)


# ---------------------------------------------------------------------------
# persistence: one JSON header line, then the pickled estimator


def save_classifier(state: ClassifierState, path: str | Path, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": STATE_FORMAT,
        "version": STATE_VERSION,
        **state.spec.to_dict(),
        "feature_dim": state.feature_dim,
        "manifest_hash": state.manifest_hash,
        "config_hash": config_hash,
    }
    body = pickle.dumps(state.estimator, protocol=pickle.HIGHEST_PROTOCOL)
    header["sha256"] = hashlib.sha256(body).hexdigest()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(body)
    return path


def read_classifier_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.readline())


def load_classifier(path: str | Path, expected_dim: int | None = None) -> ClassifierState:
    path = Path(path)
    if not path.exists():
        raise ModelNotLoaded(f"classifier state {path} does not exist")
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        body = fh.read()
    if header.get("format") != STATE_FORMAT or header.get("version") != STATE_VERSION:
        raise ModelNotLoaded(f"{path} is not a version-{STATE_VERSION} classifier state")
    if expected_dim is not None and header["feature_dim"] != expected_dim:
        raise DimensionMismatch(f"{path} was trained on {header['feature_dim']}-d features, encoder emits {expected_dim}")
    if hashlib.sha256(body).hexdigest() != header["sha256"]:
        raise ModelNotLoaded(f"{path} is corrupt (checksum mismatch)")
    spec = ClassifierSpec(header["kind"], header["hyperparams"], header["seed"])
    return ClassifierState(spec, pickle.loads(body), header["feature_dim"], header["manifest_hash"])
