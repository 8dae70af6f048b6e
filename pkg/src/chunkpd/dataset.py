"""Dataset ingest: subjects, drawing samples, manifests and their on-disk format."""

from __future__ import annotations

import configparser
import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from chunkpd import toy
from chunkpd.errors import (
    LabelConflict,
    ManifestFormatError,
    MissingRoot,
    TooFewSubjects,
    UnknownDrawingType,
)

log = logging.getLogger(__name__)

DRAWING_TYPES = ("circle", "meander", "spiral")
LABELS = ("PD", "Healthy")
# per-subject composition of a complete NewHandPD-style record
TYPE_COUNTS = {"circle": 1, "meander": 4, "spiral": 4}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif"}

MANIFEST_SCHEMA = "chunkpd.manifest"
MANIFEST_VERSION = 1
MANIFEST_FIELDS = ("sample_id", "subject_id", "drawing_type", "label", "source_path")


def load_image_file(path: str | Path) -> np.ndarray:
    """Decode an image to H x W x 3 float32 in [0, 1] whatever its bit depth."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            arr = arr / (65535.0 if arr.max() > 255 else 255.0)
        elif im.mode == "F":
            arr = np.clip(np.asarray(im, dtype=np.float64), 0.0, 1.0)
        else:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGBA" if "A" in im.getbands() or im.mode == "P" else "RGB")
                if im.mode == "RGBA":
                    # composite on white paper
                    bg = Image.new("RGB", im.size, (255, 255, 255))
                    bg.paste(im, mask=im.getchannel("A"))
                    im = bg
            arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.ascontiguousarray(arr, dtype=np.float32)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    label: str
    group_meta: dict = field(default_factory=dict, compare=False, hash=False)


@dataclass(frozen=True)
class DrawingSample:
    """One labelled drawing.

    ``source_path`` is relative to ``root`` (or a ``toy://`` path); it is the
    stable identity used for augmentation seeding, so moving a dataset does not
    change any derived tile.
    """

    sample_id: str
    subject_id: str
    drawing_type: str
    label: str
    source_path: str
    root: str | None = field(default=None, compare=False)

    @property
    def image(self) -> np.ndarray:
        return self.load_image()

    def load_image(self) -> np.ndarray:
        if self.source_path.startswith(toy.TOY_SCHEME):
            seed, label, subject_id, drawing_type, index = toy.parse_toy_path(self.source_path)
            gray = toy.render_toy_drawing(seed, subject_id, label, drawing_type, index)
            return np.repeat((gray.astype(np.float32) / np.float32(255.0))[:, :, None], 3, axis=2)
        path = Path(self.source_path)
        if self.root is not None and not path.is_absolute():
            path = Path(self.root) / path
        return load_image_file(path)


@dataclass(frozen=True)
class Violation:
    kind: str
    record: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind}: {self.record}" + (f" ({self.detail})" if self.detail else "")


@dataclass(frozen=True)
class Manifest:
    subjects: tuple[SubjectRecord, ...]
    samples: tuple[DrawingSample, ...]
    root: str | None = None
    # files that were found but could not be used, as (path, reason)
    issues: tuple[tuple[str, str], ...] = ()

    @property
    def counts(self) -> dict:
        return {
            "drawing_type": dict(sorted(Counter(s.drawing_type for s in self.samples).items())),
            "label": dict(sorted(Counter(s.label for s in self.samples).items())),
            "subjects": dict(sorted(Counter(s.label for s in self.subjects).items())),
        }

    def __len__(self) -> int:
        return len(self.samples)

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def sample_index(self) -> dict[str, DrawingSample]:
        return {s.sample_id: s for s in self.samples}

    def subset(self, sample_ids: Iterable[str]) -> "Manifest":
        keep = set(sample_ids)
        samples = tuple(s for s in self.samples if s.sample_id in keep)
        used = {s.subject_id for s in samples}
        return Manifest(tuple(r for r in self.subjects if r.subject_id in used), samples, self.root)


def _sort_key(s: DrawingSample) -> tuple[str, str, str]:
    return (s.subject_id, s.drawing_type, s.source_path)


def build_manifest(
    samples: Iterable[DrawingSample],
    root: str | None = None,
    subject_meta: dict[str, dict] | None = None,
    issues: Iterable[tuple[str, str]] = (),
) -> Manifest:
    """Assemble a manifest in canonical order, deriving subject records from samples.

    Raises LabelConflict when a subject carries both labels.
    """
    samples = sorted(samples, key=_sort_key)
    labels: dict[str, str] = {}
    for s in samples:
        prev = labels.setdefault(s.subject_id, s.label)
        if prev != s.label:
            raise LabelConflict(f"subject {s.subject_id!r} is labelled both {prev} and {s.label} (at {s.source_path})")
    meta = subject_meta or {}
    subjects = tuple(SubjectRecord(sid, labels[sid], dict(meta.get(sid, {}))) for sid in sorted(labels))
    return Manifest(subjects, tuple(samples), root, tuple(sorted(issues)))


def validate_manifest(m: Manifest) -> list[Violation]:
    out: list[Violation] = []
    subject_ids = Counter(s.subject_id for s in m.subjects)
    for sid, n in subject_ids.items():
        if n > 1:
            out.append(Violation("DuplicateId", sid, f"subject listed {n} times"))
    labels = {s.subject_id: s.label for s in m.subjects}
    for s in m.subjects:
        if s.label not in LABELS:
            out.append(Violation("UnknownLabel", s.subject_id, s.label))
    seen: set[str] = set()
    for s in m.samples:
        if s.sample_id in seen:
            out.append(Violation("DuplicateId", s.sample_id, "sample listed more than once"))
        seen.add(s.sample_id)
        if s.drawing_type not in DRAWING_TYPES:
            out.append(Violation("UnknownDrawingType", s.sample_id, s.drawing_type))
        if s.label not in LABELS:
            out.append(Violation("UnknownLabel", s.sample_id, s.label))
        if s.subject_id not in labels:
            out.append(Violation("DanglingSubject", s.sample_id, f"subject {s.subject_id!r} not in manifest"))
        elif labels[s.subject_id] != s.label:
            out.append(Violation("LabelMismatch", s.sample_id, f"{s.label} != subject label {labels[s.subject_id]}"))
    if list(m.samples) != sorted(m.samples, key=_sort_key):
        out.append(Violation("Unordered", "samples", "not sorted by (subject_id, drawing_type, source_path)"))
    return out


# ---------------------------------------------------------------------------
# layout descriptors


_DEFAULT_ALIASES = {
    "PD": ("pd", "patient", "patients", "parkinson"),
    "Healthy": ("healthy", "control", "controls", "hc"),
    "circle": ("circle", "circles", "circ"),
    "meander": ("meander", "meanders", "meand", "mea"),
    "spiral": ("spiral", "spirals", "spir", "spi"),
}


@dataclass
class Layout:
    """Maps relative file paths to (subject_id, drawing_type, label).

    Each pattern is a path template using ``{subject}``, ``{label}``,
    ``{drawing_type}`` placeholders plus ``*`` (within one path component)
    and ``**/`` (any number of directories). A pattern may instead pin a
    field to a fixed value. Patterns are tried in order; first match wins.
    """

    patterns: list[dict] = field(default_factory=list)
    aliases: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(_DEFAULT_ALIASES))

    @classmethod
    def default(cls) -> "Layout":
        return cls(patterns=[{"name": "default", "path": "{label}/{subject}/{drawing_type}_*"}])

    @classmethod
    def from_file(cls, path: str | Path) -> "Layout":
        return cls.from_string(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_string(cls, text: str) -> "Layout":
        """Parse an INI-style descriptor::

            [aliases]
            PD = patient, pd
            spiral = spiral, spi

            [pattern:newhandpd]
            path = {label}{drawing_type}/*-{subject}.*
        """
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        layout = cls(patterns=[])
        if cp.has_section("aliases"):
            for canon, values in cp.items("aliases"):
                if canon not in LABELS + DRAWING_TYPES:
                    raise ManifestFormatError(f"alias target {canon!r} is not a label or drawing type")
                layout.aliases[canon] = tuple(v.strip().lower() for v in values.split(",") if v.strip())
        for section in cp.sections():
            if not section.startswith("pattern:"):
                continue
            entry = {"name": section.split(":", 1)[1], **dict(cp.items(section))}
            if "path" not in entry:
                raise ManifestFormatError(f"[{section}] needs a 'path' key")
            layout.patterns.append(entry)
        if not layout.patterns:
            raise ManifestFormatError("layout defines no [pattern:*] sections")
        return layout

    def to_string(self) -> str:
        lines = ["[aliases]"]
        lines += [f"{k} = {', '.join(v)}" for k, v in self.aliases.items()]
        for p in self.patterns:
            lines += ["", f"[pattern:{p['name']}]"]
            lines += [f"{k} = {v}" for k, v in p.items() if k != "name"]
        return "\n".join(lines) + "\n"

    def _regex(self, template: str) -> re.Pattern:
        labels = sorted({a for c in LABELS for a in self.aliases.get(c, ())}, key=len, reverse=True)
        out, i = [], 0
        while i < len(template):
            if template.startswith("**/", i):
                out.append(r"(?:.*/)?")
                i += 3
            elif template[i] == "*":
                out.append(r"[^/]*")
                i += 1
            elif template[i] == "{":
                j = template.index("}", i)
                name = template[i + 1 : j]
                if name == "label":
                    out.append("(?P<label>" + "|".join(map(re.escape, labels)) + ")")
                elif name == "drawing_type":
                    out.append(r"(?P<drawing_type>[A-Za-z]+)")
                elif name == "subject":
                    out.append(r"(?P<subject>[^/]+?)")
                else:
                    raise ManifestFormatError(f"unknown placeholder {{{name}}} in {template!r}")
                i = j + 1
            else:
                out.append(re.escape(template[i]))
                i += 1
        return re.compile("".join(out) + "$", re.IGNORECASE)

    def _canonical(self, value: str, choices: tuple[str, ...]) -> str | None:
        v = value.lower()
        for c in choices:
            if v == c.lower() or v in self.aliases.get(c, ()):
                return c
        return None

    def match(self, rel_path: str) -> tuple[str, str, str] | None:
        """Return (subject_id, drawing_type, label) or None if no pattern applies.

        Raises UnknownDrawingType when a pattern matches but names a type
        outside circle/meander/spiral.
        """
        for p in self.patterns:
            m = self._regex(p["path"]).match(rel_path)
            if m is None:
                continue
            groups = m.groupdict()
            raw_label = p.get("label") or groups.get("label")
            raw_type = p.get("drawing_type") or groups.get("drawing_type")
            subject = p.get("subject") or groups.get("subject")
            if raw_label is None or raw_type is None or subject is None:
                raise ManifestFormatError(f"pattern {p['name']!r} leaves a field unresolved for {rel_path}")
            label = self._canonical(raw_label, LABELS)
            dtype = self._canonical(raw_type, DRAWING_TYPES)
            if dtype is None:
                raise UnknownDrawingType(f"{rel_path}: drawing type {raw_type!r} is not one of {DRAWING_TYPES}")
            if label is None:
                raise ManifestFormatError(f"{rel_path}: label {raw_label!r} is not recognised")
            return subject, dtype, label
        return None


def _check_readable(path: Path) -> str | None:
    try:
        load_image_file(path)
    except Exception as exc:  # report and continue; never silently drop
        return f"unreadable image: {exc}"
    return None


def ingest_directory(root: str | Path, layout: Layout | None = None, workers: int = 1) -> Manifest:
    """Scan ``root`` and build a validated manifest.

    Every image is decoded once to confirm it is readable. Files matching no
    pattern, and unreadable images, are listed in ``Manifest.issues``.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingRoot(f"dataset root {str(root)!r} does not exist")
    layout = layout or Layout.default()
    files = sorted(
        p for p in root.rglob("*")
        if p.is_file() and not any(part.startswith(".") for part in p.relative_to(root).parts)
    )
    issues: list[tuple[str, str]] = []
    candidates: list[tuple[str, tuple[str, str, str]]] = []
    for p in files:
        rel = p.relative_to(root).as_posix()
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            issues.append((rel, "not an image file"))
            continue
        hit = layout.match(rel)
        if hit is None:
            issues.append((rel, "matches no layout pattern"))
            continue
        candidates.append((rel, hit))

    # decode order does not matter: results are keyed and sorted afterwards
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        problems = list(pool.map(lambda c: _check_readable(root / c[0]), candidates))

    samples = []
    for (rel, (subject, dtype, label)), problem in zip(candidates, problems):
        if problem is not None:
            issues.append((rel, problem))
            continue
        sample_id = rel.rsplit(".", 1)[0]
        samples.append(DrawingSample(sample_id, subject, dtype, label, rel, root=str(root)))
    for rel, reason in issues:
        log.warning("skipped %s: %s", rel, reason)
    return build_manifest(samples, root=str(root), issues=issues)


def synthesize_toy_manifest(n_subjects: int, seed: int, pd_fraction: float = 31 / 66) -> Manifest:
    """Procedural manifest with 1 circle, 4 meanders and 4 spirals per subject.

    Images are rendered on demand from their ``toy://`` source paths.
    """
    if n_subjects < 2:
        raise TooFewSubjects(f"need at least 2 subjects (one per label), got {n_subjects}")
    n_pd = int(round(n_subjects * pd_fraction))
    n_pd = min(max(n_pd, 1), n_subjects - 1)
    rng = np.random.default_rng(seed)
    is_pd = np.zeros(n_subjects, dtype=bool)
    is_pd[rng.permutation(n_subjects)[:n_pd]] = True
    width = max(3, len(str(n_subjects - 1)))
    samples = []
    for i in range(n_subjects):
        subject_id = f"S{i:0{width}d}"
        label = "PD" if is_pd[i] else "Healthy"
        for dtype in DRAWING_TYPES:
            for k in range(TYPE_COUNTS[dtype]):
                path = toy.toy_path(seed, label, subject_id, dtype, k)
                samples.append(DrawingSample(f"{subject_id}/{dtype}_{k}", subject_id, dtype, label, path))
    meta = {f"S{i:0{width}d}": {"source": "toy", "seed": str(seed)} for i in range(n_subjects)}
    return build_manifest(samples, subject_meta=meta)


def write_toy_images(m: Manifest, out_root: str | Path) -> Manifest:
    """Materialise a toy manifest as PNG files under the default layout."""
    out_root = Path(out_root)
    samples = []
    for s in m.samples:
        if not s.source_path.startswith(toy.TOY_SCHEME):
            raise ValueError(f"{s.sample_id} is not a toy sample")
        seed, label, subject_id, dtype, index = toy.parse_toy_path(s.source_path)
        rel = f"{label.lower()}/{subject_id}/{dtype}_{index}.png"
        target = out_root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(toy.render_toy_drawing(seed, subject_id, label, dtype, index)).save(target)
        samples.append(DrawingSample(rel.rsplit(".", 1)[0], subject_id, dtype, label, rel, root=str(out_root)))
    meta = {r.subject_id: r.group_meta for r in m.subjects}
    return build_manifest(samples, root=str(out_root), subject_meta=meta)


# ---------------------------------------------------------------------------
# manifest file format: JSON header line, then one JSON record per line


def dumps_manifest(m: Manifest, root: str | None = None) -> str:
    header = {
        "schema": MANIFEST_SCHEMA,
        "version": MANIFEST_VERSION,
        "fields": list(MANIFEST_FIELDS),
        "root": root if root is not None else m.root,
        "subject_meta": {s.subject_id: s.group_meta for s in m.subjects if s.group_meta},
        "issues": [list(i) for i in m.issues],
    }
    lines = [json.dumps(header, sort_keys=True)]
    for s in m.samples:
        lines.append(json.dumps([getattr(s, f) for f in MANIFEST_FIELDS]))
    return "\n".join(lines) + "\n"


def write_manifest(m: Manifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_manifest(m), encoding="utf-8")
    return path


def loads_manifest(text: str) -> Manifest:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ManifestFormatError("empty manifest file")
    header = json.loads(lines[0])
    if header.get("schema") != MANIFEST_SCHEMA:
        raise ManifestFormatError(f"not a manifest (schema={header.get('schema')!r})")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestFormatError(f"unsupported manifest version {header.get('version')!r}")
    fields = header["fields"]
    root = header.get("root")
    samples = []
    for n, ln in enumerate(lines[1:], start=2):
        values = json.loads(ln)
        if len(values) != len(fields):
            raise ManifestFormatError(f"line {n}: expected {len(fields)} fields, got {len(values)}")
        rec = dict(zip(fields, values))
        samples.append(DrawingSample(root=root, **rec))
    issues = [tuple(i) for i in header.get("issues", [])]
    return build_manifest(samples, root=root, subject_meta=header.get("subject_meta"), issues=issues)


def read_manifest(path: str | Path) -> Manifest:
    return loads_manifest(Path(path).read_text(encoding="utf-8"))
