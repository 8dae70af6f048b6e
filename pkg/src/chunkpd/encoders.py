"""Drawing-type classifier (stage 1) and tile feature extractors (stage 2).

Three encoder kinds share one interface:

* ``residual_cnn``        torchvision ResNet-18/34, global-average pooled, 512-d
* ``pyramid_transformer`` timm PVT-v2, pooled then linearly projected to 512-d
* ``hybrid_concat``       [residual_cnn || pyramid_transformer], 1024-d

Encoder states are immutable once built; ``finetune`` returns a new state.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from chunkpd.dataset import DRAWING_TYPES
from chunkpd.errors import DimensionMismatch, DivergedLoss, EmptyTrainingSet, ModelNotLoaded
from chunkpd.preprocess import TILE_SIDE

log = logging.getLogger(__name__)

KINDS = ("residual_cnn", "pyramid_transformer", "hybrid_concat")
RESIDUAL_VARIANTS = ("resnet18", "resnet34")
PYRAMID_VARIANTS = ("pvt_v2_b0", "pvt_v2_b1", "pvt_v2_b2")
EMBED_DIM = 512
CHECKPOINT_VERSION = 1

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class EncoderId:
    kind: str
    variant: str
    output_dim: int

    @property
    def parts(self) -> tuple[str, str]:
        """(residual variant, pyramid variant) of a hybrid."""
        res, pyr = self.variant.split("+")
        return res, pyr


def encoder_id(kind: str, variant: str | None = None) -> EncoderId:
    if kind == "residual_cnn":
        variant = variant or "resnet18"
        if variant not in RESIDUAL_VARIANTS:
            raise ValueError(f"residual_cnn variant must be one of {RESIDUAL_VARIANTS}, got {variant!r}")
        return EncoderId(kind, variant, EMBED_DIM)
    if kind == "pyramid_transformer":
        variant = variant or "pvt_v2_b0"
        if variant not in PYRAMID_VARIANTS:
            raise ValueError(f"pyramid_transformer variant must be one of {PYRAMID_VARIANTS}, got {variant!r}")
        return EncoderId(kind, variant, EMBED_DIM)
    if kind == "hybrid_concat":
        variant = variant or "resnet18+pvt_v2_b0"
        res, _, pyr = variant.partition("+")
        r, p = encoder_id("residual_cnn", res), encoder_id("pyramid_transformer", pyr)
        return EncoderId(kind, f"{r.variant}+{p.variant}", r.output_dim + p.output_dim)
    raise ValueError(f"encoder kind must be one of {KINDS}, got {kind!r}")


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    encoder: EncoderId
    tile_ref: tuple  # (sample_id, repeat_index, grid_pos)

    def __post_init__(self):
        if self.values.shape != (self.encoder.output_dim,):
            raise DimensionMismatch(f"feature has shape {self.values.shape}, encoder emits {self.encoder.output_dim}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature vector contains non-finite values")


@dataclass(frozen=True)
class TypePrediction:
    drawing_type: str
    scores: tuple[float, float, float]  # ordered as DRAWING_TYPES


# ---------------------------------------------------------------------------
# networks


class _ImageNetInput(nn.Module):
    """HWC [0,1] batches -> NCHW standardised with ImageNet statistics."""

    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std


class ResidualBackbone(nn.Module):
    def __init__(self, variant: str, pretrained: bool):
        super().__init__()
        import torchvision

        weights = "IMAGENET1K_V1" if pretrained else None
        self.net = getattr(torchvision.models, variant)(weights=weights)
        self.net.fc = nn.Identity()
        self.prep = _ImageNetInput()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(self.prep(x))


class PyramidBackbone(nn.Module):
    def __init__(self, variant: str, pretrained: bool):
        super().__init__()
        import timm

        self.net = timm.create_model(variant, pretrained=pretrained, num_classes=0)
        self.proj = nn.Linear(self.net.num_features, EMBED_DIM)
        self.prep = _ImageNetInput()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.net(self.prep(x)))


class HybridBackbone(nn.Module):
    def __init__(self, residual: ResidualBackbone, pyramid: PyramidBackbone):
        super().__init__()
        self.residual = residual
        self.pyramid = pyramid

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.residual(x), self.pyramid(x)], dim=1)


def _make_module(eid: EncoderId, pretrained: bool) -> nn.Module:
    if eid.kind == "residual_cnn":
        return ResidualBackbone(eid.variant, pretrained)
    if eid.kind == "pyramid_transformer":
        return PyramidBackbone(eid.variant, pretrained)
    res, pyr = eid.parts
    return HybridBackbone(ResidualBackbone(res, pretrained), PyramidBackbone(pyr, pretrained))


def _state_digest(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, t in m.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class EncoderState:
    encoder: EncoderId
    module: nn.Module | None
    drawing_type: str | None = None
    seed: int = 0
    pretrained: bool = False
    history: list = field(default_factory=list)
    _fingerprint: str | None = field(default=None, repr=False)

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            self._fingerprint = _state_digest(self._require())
        return self._fingerprint

    def _require(self) -> nn.Module:
        if self.module is None:
            raise ModelNotLoaded(f"{self.encoder.kind}/{self.encoder.variant} has no weights loaded")
        return self.module

    def component(self, kind: str) -> "EncoderState":
        """The residual or pyramid half of a hybrid state, sharing its weights."""
        if self.encoder.kind != "hybrid_concat":
            raise ValueError("component() is only defined for hybrid encoders")
        res, pyr = self.encoder.parts
        mod = self._require()
        if kind == "residual_cnn":
            return EncoderState(encoder_id(kind, res), mod.residual, self.drawing_type, self.seed, self.pretrained)
        return EncoderState(encoder_id(kind, pyr), mod.pyramid, self.drawing_type, self.seed, self.pretrained)


def build_encoder(eid: EncoderId, seed: int = 0, pretrained: bool = False, drawing_type: str | None = None) -> EncoderState:
    """Construct an encoder; weights are a pure function of (eid, seed, pretrained)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        try:
            module = _make_module(eid, pretrained)
        except Exception as exc:
            if pretrained:
                raise ModelNotLoaded(f"could not load pretrained weights for {eid.variant}: {exc}") from exc
            raise
    module.eval()
    return EncoderState(eid, module, drawing_type, seed, pretrained)


def _to_batch(arrays: Sequence[np.ndarray]) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(np.stack(arrays), dtype=np.float32))
    return x.permute(0, 3, 1, 2).contiguous()


def _embed(module: nn.Module, arrays: Sequence[np.ndarray], batch_size: int) -> np.ndarray:
    module.eval()
    out = []
    with torch.inference_mode():
        for i in range(0, len(arrays), batch_size):
            out.append(module(_to_batch(arrays[i : i + batch_size])).numpy())
    return np.concatenate(out, axis=0).astype(np.float32)


def extract_features_batch(pixels: Sequence[np.ndarray], state: EncoderState, batch_size: int = 32, side: int = TILE_SIDE) -> np.ndarray:
    """Embed a list of normalised side x side x 3 images (224 tiles by default); returns (N, output_dim)."""
    module = state._require()
    for p in pixels:
        if p.shape != (side, side, 3):
            raise DimensionMismatch(f"tile has shape {p.shape}, expected ({side}, {side}, 3)")
    if not len(pixels):
        return np.zeros((0, state.encoder.output_dim), dtype=np.float32)
    feats = _embed(module, list(pixels), batch_size)
    if feats.shape[1] != state.encoder.output_dim:
        raise DimensionMismatch(f"{state.encoder.kind} produced {feats.shape[1]} dims, expected {state.encoder.output_dim}")
    return feats


def extract_features(tile, state: EncoderState) -> FeatureVector:
    vec = extract_features_batch([tile.pixels], state)[0]
    return FeatureVector(vec, state.encoder, (tile.parent_sample_id, tile.repeat_index, tile.grid_pos))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    # train only the classification head on frozen embeddings
    freeze_backbone: bool = False
    # with a frozen backbone: re-estimate batch-norm statistics on the training images first
    adapt_norm: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(f"invalid schedule {self}")


def _fit_head(feats: torch.Tensor, labels: torch.Tensor, n_classes: int, sched: TrainSchedule) -> tuple[nn.Linear, list]:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(sched.seed)
        head = nn.Linear(feats.shape[1], n_classes)
    # frozen embeddings: standardising helps the linear head, folded back into its weights
    mu = feats.mean(0)
    sd = feats.std(0, unbiased=False).clamp_min(1e-6)
    z = (feats - mu) / sd
    opt = torch.optim.Adam(head.parameters(), lr=sched.lr, weight_decay=sched.weight_decay)
    steps = sched.epochs * math.ceil(len(z) / sched.batch_size)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, steps))
    gen = torch.Generator().manual_seed(sched.seed)
    history = []
    for epoch in range(sched.epochs):
        perm = torch.randperm(len(z), generator=gen)
        total = 0.0
        for i in range(0, len(z), sched.batch_size):
            idx = perm[i : i + sched.batch_size]
            loss = nn.functional.cross_entropy(head(z[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
            total += loss.item() * len(idx)
        history.append({"epoch": epoch, "loss": total / len(z)})
    folded = nn.Linear(feats.shape[1], n_classes)
    with torch.no_grad():
        folded.weight.copy_(head.weight / sd)
        folded.bias.copy_(head.bias - (head.weight * (mu / sd)).sum(1))
    return folded, history


def _train_end_to_end(module: nn.Module, head: nn.Linear, data: Sequence, sched: TrainSchedule) -> list:
    params = list(module.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=sched.lr, weight_decay=sched.weight_decay)
    n = len(data)
    steps = sched.epochs * math.ceil(n / sched.batch_size)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, steps))
    gen = torch.Generator().manual_seed(sched.seed)
    history = []
    for epoch in range(sched.epochs):
        module.train()
        perm = torch.randperm(n, generator=gen).tolist()
        total, seen = 0.0, 0
        for i in range(0, n, sched.batch_size):
            idx = perm[i : i + sched.batch_size]
            if len(idx) < 2:  # batch norm needs two samples in train mode
                continue
            items = [data[j] for j in idx]
            x = _to_batch([it[0] for it in items])
            y = torch.tensor([it[1] for it in items], dtype=torch.long)
            loss = nn.functional.cross_entropy(head(module(x)), y)
            if not torch.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append({"epoch": epoch, "loss": total / max(seen, 1)})
        log.info("epoch %d loss %.4f", epoch, history[-1]["loss"])
    module.eval()
    return history


def adapt_batchnorm(state: EncoderState, images: Iterable[np.ndarray], batch_size: int = 16) -> EncoderState:
    """Copy of ``state`` whose batch-norm running statistics are the plain average over ``images``.

    Forward passes only, no gradient step. Useful when the backbone is frozen
    and its stored statistics do not describe the input distribution (for
    example randomly initialised weights).
    """
    module = copy.deepcopy(state._require())
    norms = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average over all batches
    module.train()
    batch: list[np.ndarray] = []
    seen = 0
    with torch.no_grad():
        for img in images:
            batch.append(img)
            if len(batch) == batch_size:
                module(_to_batch(batch))
                seen += len(batch)
                batch = []
        if len(batch) >= 2 or (batch and seen == 0):
            module(_to_batch(batch))
            seen += len(batch)
    if seen == 0:
        raise EmptyTrainingSet("batch-norm adaptation needs at least one image")
    for m in norms:
        m.momentum = 0.1
    module.eval()
    return EncoderState(state.encoder, module, state.drawing_type, state.seed, state.pretrained, list(state.history))


def finetune(state: EncoderState, data: Sequence, schedule: TrainSchedule, n_classes: int = 2) -> EncoderState:
    """Fine-tune an encoder with a temporary linear head; returns a new state.

    ``data`` is an indexable sequence of (pixels HxWx3, class index). With
    ``epochs == 0`` the returned state carries the initial weights unchanged.
    With ``freeze_backbone`` the backbone is untouched and only the head is
    trained, so the encoder state is also unchanged unless ``adapt_norm`` is set.
    """
    if len(data) == 0:
        raise EmptyTrainingSet("fine-tuning needs at least one training tile")
    if schedule.adapt_norm and (schedule.freeze_backbone or schedule.epochs == 0):
        return adapt_batchnorm(state, (data[i][0] for i in range(len(data))))
    module = copy.deepcopy(state._require())
    new = EncoderState(state.encoder, module, state.drawing_type, state.seed, state.pretrained)
    if schedule.epochs == 0 or schedule.freeze_backbone:
        new._fingerprint = state._fingerprint
        return new
    torch.use_deterministic_algorithms(True, warn_only=True)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(schedule.seed)
        head = nn.Linear(state.encoder.output_dim, n_classes)
        new.history = _train_end_to_end(module, head, data, schedule)
    return new


@dataclass(eq=False)
class TypeClassifierState:
    """Residual backbone plus a 3-way softmax head over DRAWING_TYPES."""

    backbone: EncoderState
    head: nn.Linear | None
    history: list = field(default_factory=list)

    def embed(self, canvases: Sequence[np.ndarray], batch_size: int = 8) -> np.ndarray:
        return _embed(self.backbone._require(), list(canvases), batch_size)

    def logits(self, canvases: Sequence[np.ndarray] | None = None, features: np.ndarray | None = None) -> np.ndarray:
        if self.head is None:
            raise ModelNotLoaded("drawing-type classifier has not been trained")
        if features is None:
            features = self.embed(canvases)
        with torch.inference_mode():
            return self.head(torch.from_numpy(np.asarray(features, dtype=np.float32))).double().numpy()


def train_type_classifier(
    canvases: Sequence[np.ndarray] | None,
    drawing_types: Sequence[str],
    schedule: TrainSchedule,
    variant: str = "resnet18",
    seed: int = 0,
    pretrained: bool = False,
    backbone: EncoderState | None = None,
    features: np.ndarray | None = None,
) -> TypeClassifierState:
    """Train the 3-way drawing-type classifier on whole resized canvases.

    With a frozen backbone (or zero epochs) only the softmax head is fitted,
    and precomputed backbone ``features`` may be passed instead of canvases.
    """
    n = len(features) if features is not None else len(canvases or ())
    if n == 0:
        raise EmptyTrainingSet("drawing-type classifier needs training images")
    labels = torch.tensor([DRAWING_TYPES.index(t) for t in drawing_types], dtype=torch.long)
    if backbone is None:
        backbone = build_encoder(encoder_id("residual_cnn", variant), seed=seed, pretrained=pretrained)
    if schedule.freeze_backbone or schedule.epochs == 0:
        if features is None:
            if schedule.adapt_norm:
                backbone = adapt_batchnorm(backbone, canvases)
            features = _embed(backbone._require(), list(canvases), 8)
        head, history = _fit_head(torch.from_numpy(np.asarray(features, dtype=np.float32)), labels, len(DRAWING_TYPES), schedule)
        return TypeClassifierState(backbone, head, history)
    if canvases is None:
        raise ValueError("end-to-end training of the drawing-type classifier needs the canvases")
    backbone = EncoderState(backbone.encoder, copy.deepcopy(backbone._require()), None, backbone.seed, backbone.pretrained)
    module = backbone.module
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(schedule.seed)
        head = nn.Linear(EMBED_DIM, len(DRAWING_TYPES))
        data = list(zip(canvases, labels.tolist()))
        history = _train_end_to_end(module, head, data, schedule)
    backbone._fingerprint = None
    return TypeClassifierState(backbone, head, history)


def classify_drawing_type(canvas: np.ndarray, state: TypeClassifierState | None) -> TypePrediction:
    return classify_drawing_types([canvas], state)[0]


def classify_drawing_types(canvases: Sequence[np.ndarray] | None, state: TypeClassifierState | None, features: np.ndarray | None = None) -> list[TypePrediction]:
    if state is None:
        raise ModelNotLoaded("drawing-type classifier is not loaded")
    logits = state.logits(canvases, features)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return [TypePrediction(DRAWING_TYPES[int(np.argmax(row))], tuple(float(v) for v in row)) for row in p]


# ---------------------------------------------------------------------------
# persistence


def checkpoint_name(eid: EncoderId, drawing_type: str | None, config_hash: str) -> str:
    return f"{eid.kind}__{eid.variant}__{drawing_type or 'all'}__{config_hash[:12]}.pt"


def save_encoder(state: EncoderState, path: str | Path, config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": "chunkpd.encoder",
            "version": CHECKPOINT_VERSION,
            "encoder": {"kind": state.encoder.kind, "variant": state.encoder.variant, "output_dim": state.encoder.output_dim},
            "drawing_type": state.drawing_type,
            "seed": state.seed,
            "pretrained": state.pretrained,
            "config_hash": config_hash,
            "history": state.history,
            "state_dict": state._require().state_dict(),
        },
        path,
    )
    return path


def load_encoder(path: str | Path) -> tuple[EncoderState, str]:
    """Returns (state, config hash recorded in the checkpoint)."""
    path = Path(path)
    if not path.exists():
        raise ModelNotLoaded(f"checkpoint {path} does not exist")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "chunkpd.encoder" or blob.get("version") != CHECKPOINT_VERSION:
        raise ModelNotLoaded(f"{path} is not a version-{CHECKPOINT_VERSION} encoder checkpoint")
    e = blob["encoder"]
    eid = encoder_id(e["kind"], e["variant"])
    module = _make_module(eid, pretrained=False)
    module.load_state_dict(blob["state_dict"])
    module.eval()
    return EncoderState(eid, module, blob["drawing_type"], blob["seed"], blob["pretrained"], blob["history"]), blob["config_hash"]


def save_type_classifier(state: TypeClassifierState, path: str | Path, config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": "chunkpd.type_classifier",
            "version": CHECKPOINT_VERSION,
            "variant": state.backbone.encoder.variant,
            "config_hash": config_hash,
            "history": state.history,
            "backbone": state.backbone._require().state_dict(),
            "head": state.head.state_dict(),
        },
        path,
    )
    return path


def load_type_classifier(path: str | Path) -> tuple[TypeClassifierState, str]:
    path = Path(path)
    if not path.exists():
        raise ModelNotLoaded(f"checkpoint {path} does not exist")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "chunkpd.type_classifier":
        raise ModelNotLoaded(f"{path} is not a drawing-type classifier checkpoint")
    eid = encoder_id("residual_cnn", blob["variant"])
    module = _make_module(eid, pretrained=False)
    module.load_state_dict(blob["backbone"])
    module.eval()
    head = nn.Linear(EMBED_DIM, len(DRAWING_TYPES))
    head.load_state_dict(blob["head"])
    return TypeClassifierState(EncoderState(eid, module), head, blob["history"]), blob["config_hash"]


class FeatureStore:
    """Maps (encoder fingerprint, tile key) to feature vectors.

    Kept in memory; ``save``/``load`` persist it as a single .npz plus a JSON
    index so vectors are never recomputed for an unchanged encoder state.
    """

    def __init__(self):
        self._vectors: dict[str, np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(fingerprint: str, tile_key: str) -> str:
        return hashlib.sha256(f"{fingerprint}|{tile_key}".encode()).hexdigest()[:40]

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key: str) -> bool:
        return key in self._vectors

    def get(self, key: str) -> np.ndarray | None:
        v = self._vectors.get(key)
        if v is None:
            self.misses += 1
        else:
            self.hits += 1
        return v

    def put(self, key: str, vec: np.ndarray) -> None:
        self._vectors[key] = np.asarray(vec, dtype=np.float32)

    def features(self, state: EncoderState, tile_keys: Sequence[str], make_pixels, batch_size: int = 32, side: int = TILE_SIDE) -> np.ndarray:
        """Look up vectors for ``tile_keys``, computing missing ones via ``make_pixels(missing_indices)``."""
        fp = state.fingerprint
        keys = [self.key(fp, k) for k in tile_keys]
        missing = [i for i, k in enumerate(keys) if self.get(k) is None]
        if missing:
            fresh = extract_features_batch(make_pixels(missing), state, batch_size, side)
            for i, v in zip(missing, fresh):
                self.put(keys[i], v)
        return np.stack([self._vectors[k] for k in keys]) if keys else np.zeros((0, state.encoder.output_dim), np.float32)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = sorted(self._vectors)
        buf = io.BytesIO()
        np.savez(buf, **{k: self._vectors[k] for k in keys})
        path.write_bytes(buf.getvalue())
        path.with_suffix(".index.json").write_text(json.dumps({"format": "chunkpd.features", "version": 1, "keys": keys}))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FeatureStore":
        store = cls()
        with np.load(path) as z:
            for k in z.files:
                store._vectors[k] = z[k]
        return store
