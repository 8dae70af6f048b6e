"""The three-stage pipeline: type routing, per-type tile encoders, per-type tile classifiers.

``fit_pipeline`` trains every stage on one training manifest; the resulting
``TrainedPipeline`` predicts image labels by majority vote over the tiles of
the un-augmented drawing.
"""

from __future__ import annotations

import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from chunkpd.classify import (
    POSITIVE,
    ClassifierState,
    ImagePrediction,
    predict_tiles,
    train_classifier,
    vote,
)
from chunkpd.config import ExperimentConfig
from chunkpd.dataset import DRAWING_TYPES, DrawingSample, Manifest, dumps_manifest
from chunkpd.encoders import (
    adapt_batchnorm,
    EncoderState,
    FeatureStore,
    TypeClassifierState,
    TypePrediction,
    build_encoder,
    classify_drawing_types,
    encoder_id,
    finetune,
    train_type_classifier,
)
from chunkpd.errors import EmptyTrainingSet
from chunkpd.evaluation import AblationCell, Predictor
from chunkpd.preprocess import AugmentationSpec, ChunkGrid, TileCache, canvas, run_pipeline, tile_key

log = logging.getLogger(__name__)


def manifest_hash(m: Manifest) -> str:
    return hashlib.sha256(dumps_manifest(m, root="").encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class PipelineSettings:
    """The subset of an experiment config that determines what gets trained."""

    grid: ChunkGrid
    spec: AugmentationSpec
    augment_enabled: bool
    config: ExperimentConfig

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, cell: AblationCell | None = None) -> "PipelineSettings":
        grid, aug = cfg.grid, cfg.augment_enabled
        if cell is not None:
            grid = grid if cell.chunking else ChunkGrid(1)
            aug = cell.augmentation
        return cls(grid, cfg.augmentation, aug, cfg)

    def setup(self) -> dict:
        cfg = self.config
        return {
            "grid": self.grid.n,
            "augmentation": self.augment_enabled,
            "encoders": {d: cfg.encoder(d).kind for d in DRAWING_TYPES},
            "classifiers": {d: cfg.classifier(d).kind for d in DRAWING_TYPES},
        }


class TileSet:
    """Indexable (pixels, class) view over the tiles of a list of samples.

    Tiles are regenerated on access (preprocessing is deterministic), with a
    small per-sample cache, so fine-tuning never holds the whole set in memory.
    """

    def __init__(
        self,
        samples: Sequence[DrawingSample],
        grid: ChunkGrid,
        spec: AugmentationSpec,
        augment_enabled: bool,
        cache_size: int = 16,
        tile_cache: TileCache | None = None,
    ):
        self.samples = list(samples)
        self.tile_cache = tile_cache
        self.grid = grid
        self.spec = spec
        self.augment_enabled = augment_enabled
        self.index: list[tuple[int, int]] = []  # (sample position, tile position within the sample)
        for i, s in enumerate(self.samples):
            n = len(grid.positions()) * (spec.repeats[s.drawing_type] if augment_enabled else 1)
            self.index.extend((i, j) for j in range(n))
        self._cache: OrderedDict[int, list] = OrderedDict()
        self._cache_size = cache_size

    def __len__(self) -> int:
        return len(self.index)

    def tiles_of(self, i: int) -> list:
        if i in self._cache:
            self._cache.move_to_end(i)
            return self._cache[i]
        if self.tile_cache is not None:
            tiles = self.tile_cache.get_or_build(self.samples[i], self.grid, self.spec, self.augment_enabled)
        else:
            tiles = run_pipeline(self.samples[i], self.grid, self.spec, self.augment_enabled)
        self._cache[i] = tiles
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return tiles

    def __getitem__(self, k: int) -> tuple[np.ndarray, int]:
        i, j = self.index[k]
        return self.tiles_of(i)[j].pixels, int(self.samples[i].label == POSITIVE)

    def keys(self) -> list[str]:
        eff = self.spec if self.augment_enabled else None
        out = []
        for i, j in self.index:
            s = self.samples[i]
            rep, pos = divmod(j, len(self.grid.positions()))
            out.append(tile_key(s, self.grid, eff, rep, self.grid.positions()[pos]))
        return out

    def refs(self) -> list[tuple]:
        out = []
        for i, j in self.index:
            rep, pos = divmod(j, len(self.grid.positions()))
            out.append((self.samples[i].sample_id, rep, self.grid.positions()[pos]))
        return out

    def features(self, state: EncoderState, store: FeatureStore) -> np.ndarray:
        def make_pixels(missing: list[int]) -> list[np.ndarray]:
            return [self[k][0] for k in missing]

        return store.features(state, self.keys(), make_pixels)


def _canvas_features(samples: Sequence[DrawingSample], backbone: EncoderState, grid: ChunkGrid, store: FeatureStore) -> np.ndarray:
    keys = [f"canvas|{s.sample_id}|{s.source_path}|g{grid.n}" for s in samples]
    return store.features(backbone, keys, lambda missing: [canvas(samples[i], grid) for i in missing], batch_size=8, side=grid.canvas_side)


@dataclass(eq=False)
class TrainedPipeline(Predictor):
    settings: PipelineSettings
    type_classifier: TypeClassifierState
    encoders: dict[str, EncoderState]
    classifiers: dict[str, ClassifierState]
    store: FeatureStore = field(default_factory=FeatureStore)
    tile_cache: TileCache | None = None

    def route(self, samples: Sequence[DrawingSample]) -> list[TypePrediction]:
        cfg = self.settings.config
        if cfg.type_schedule.freeze_backbone or cfg.type_schedule.epochs == 0:
            feats = _canvas_features(samples, self.type_classifier.backbone, self.settings.grid, self.store)
            return classify_drawing_types(None, self.type_classifier, features=feats)
        return classify_drawing_types([canvas(s, self.settings.grid) for s in samples], self.type_classifier)

    def predict_images(self, samples: Sequence[DrawingSample]) -> list[tuple[str, ImagePrediction]]:
        routed = self.route(samples)
        out: list[tuple[str, ImagePrediction] | None] = [None] * len(samples)
        for d in DRAWING_TYPES:
            idx = [i for i, r in enumerate(routed) if r.drawing_type == d]
            if not idx:
                continue
            # inference never augments: n^2 tiles of the plain drawing per image
            ts = TileSet([samples[i] for i in idx], self.settings.grid, self.settings.spec, augment_enabled=False, tile_cache=self.tile_cache)
            feats = ts.features(self.encoders[d], self.store)
            preds = predict_tiles(self.classifiers[d], feats, ts.refs())
            per_tile = len(self.settings.grid.positions())
            for n, i in enumerate(idx):
                out[i] = (d, vote(preds[n * per_tile : (n + 1) * per_tile]))
        return out  # type: ignore[return-value]

    def predict_image(self, sample: DrawingSample) -> ImagePrediction:
        return self.predict_images([sample])[0][1]


def fit_pipeline(
    train: Manifest,
    settings: PipelineSettings,
    store: FeatureStore | None = None,
    fold: int | None = None,
    tile_cache: TileCache | None = None,
) -> TrainedPipeline:
    """Train stage 1 on whole canvases, then per drawing type: fine-tune the encoder on
    (optionally augmented) tiles and fit the tile classifier on its features."""
    cfg = settings.config
    store = store if store is not None else FeatureStore()
    if not train.samples:
        raise EmptyTrainingSet("training manifest is empty")
    mhash = manifest_hash(train)

    type_sched = cfg.type_schedule
    variant = cfg.data["type_classifier"]["variant"]
    backbone = build_encoder(encoder_id("residual_cnn", variant), seed=cfg.seed, pretrained=cfg.pretrained)
    samples = list(train.samples)
    types = [s.drawing_type for s in samples]
    if type_sched.freeze_backbone or type_sched.epochs == 0:
        if type_sched.adapt_norm:
            backbone = adapt_batchnorm(backbone, (canvas(s, settings.grid) for s in samples))
        feats = _canvas_features(samples, backbone, settings.grid, store)
        type_state = train_type_classifier(None, types, type_sched, backbone=backbone, features=feats)
    else:
        canvases = [canvas(s, settings.grid) for s in samples]
        type_state = train_type_classifier(canvases, types, type_sched, backbone=backbone)

    encoders, classifiers = {}, {}
    for d in DRAWING_TYPES:
        group = [s for s in samples if s.drawing_type == d]
        if not group:
            raise EmptyTrainingSet(f"no {d} drawings in the training set" + (f" of fold {fold}" if fold is not None else ""))
        ts = TileSet(group, settings.grid, settings.spec, settings.augment_enabled, tile_cache=tile_cache)
        init = build_encoder(cfg.encoder(d), seed=cfg.seed, pretrained=cfg.pretrained, drawing_type=d)
        enc = finetune(init, ts, cfg.finetune_schedule)
        feats = ts.features(enc, store)
        labels = [ts.samples[i].label for i, _ in ts.index]
        classifiers[d] = train_classifier(cfg.classifier(d), feats, labels, manifest_hash=mhash)
        encoders[d] = enc
        log.debug("trained %s: %d tiles", d, len(ts))
    return TrainedPipeline(settings, type_state, encoders, classifiers, store, tile_cache)


def cv_fitter(settings: PipelineSettings, store: FeatureStore, tile_cache: TileCache | None = None):
    def fit(train: Manifest, fold: int) -> TrainedPipeline:
        return fit_pipeline(train, settings, store, fold, tile_cache)

    return fit


def evaluate_config(cfg: ExperimentConfig, manifest: Manifest, store: FeatureStore | None = None, plan=None, tile_cache: TileCache | None = None):
    """Cross-validate ``cfg`` on ``manifest`` under its configured strategy."""
    from chunkpd.evaluation import cross_validate, make_split

    store = store if store is not None else FeatureStore()
    settings = PipelineSettings.from_config(cfg)
    plan = plan if plan is not None else make_split(manifest, cfg.strategy, cfg.seed)
    return cross_validate(manifest, plan, cv_fitter(settings, store, tile_cache), cfg.fingerprint, settings.setup())


def ablate_config(cfg: ExperimentConfig, manifest: Manifest, matrix=None, store: FeatureStore | None = None, tile_cache: TileCache | None = None):
    """Chunking x augmentation ablation of ``cfg``, all cells on one split."""
    from chunkpd.evaluation import FULL_MATRIX, run_ablation

    store = store if store is not None else FeatureStore()
    matrix = FULL_MATRIX if matrix is None else matrix
    return run_ablation(
        manifest,
        matrix,
        lambda cell: cv_fitter(PipelineSettings.from_config(cfg, cell), store, tile_cache),
        seed=cfg.seed,
        strategy=cfg.strategy,
        setup_for_cell=lambda cell: PipelineSettings.from_config(cfg, cell).setup(),
        config_fingerprint=cfg.fingerprint,
    )
