"""Datasets, leave-one-domain-out splits and the synthetic multi-domain generator."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import archive

UNKNOWN_NAME = "unknown"


class DatasetError(Exception):
    """Base class for dataset construction failures. ``code`` is machine readable."""

    code = "dataset_error"


class MissingRootError(DatasetError):
    code = "missing_root"


class EmptyDomainError(DatasetError):
    code = "empty_domain"


class UnreadableFileError(DatasetError):
    code = "unreadable_file"


class MixedPayloadError(DatasetError):
    code = "mixed_payload"


@dataclass(frozen=True)
class LabeledSample:
    image_id: str
    domain_id: int
    class_id: int
    payload: np.ndarray | str  # N x d feature matrix, or a path to a raw image

    @property
    def is_feature(self) -> bool:
        return not isinstance(self.payload, str)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[LabeledSample, ...]
    domain_names: tuple[str, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        modes = {s.is_feature for s in self.samples}
        if len(modes) > 1:
            raise MixedPayloadError("payload mode must be uniform within a dataset")
        for s in self.samples:
            if not 0 <= s.domain_id < len(self.domain_names):
                raise DatasetError(f"{s.image_id}: domain_id {s.domain_id} out of range")
            if not 0 <= s.class_id < len(self.class_names):
                raise DatasetError(f"{s.image_id}: class_id {s.class_id} out of range")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_ids(self) -> list[str]:
        return [s.image_id for s in self.samples]

    def feature_array(self) -> np.ndarray:
        """Stack feature payloads into an (n, N, d) array."""
        if not self.samples or not self.samples[0].is_feature:
            raise DatasetError("dataset does not hold feature payloads")
        return np.stack([np.asarray(s.payload) for s in self.samples])


@dataclass(frozen=True)
class OSDGSplit:
    """One leave-one-domain-out split.

    Labels are remapped: known classes to ``[0, C)`` in the order of
    ``known_classes``, every unknown class to ``C``.
    """

    source_domains: tuple[int, ...]
    target_domain: int
    known_classes: tuple[str, ...]
    unknown_class_ids: frozenset[int]
    source: tuple[LabeledSample, ...]
    target: tuple[LabeledSample, ...]
    domain_names: tuple[str, ...] = field(default=())

    @property
    def n_known(self) -> int:
        return len(self.known_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    M: int = 3
    C: int = 4
    U: int = 2
    d: int = 16
    N: int = 9
    samples_per_class_per_domain: int = 20
    domain_shift_scale: float = 0.3
    class_separation: float = 0.8
    within_class_noise: float = 0.3
    seed: int = 0
    # structure knobs not exposed by the original contract; defaults keep the
    # generator's "hard unknown" regime
    n_parts: int = 3
    part_scale: float = 0.4
    style_scale: float = 0.8

    def __post_init__(self):
        for name in ("M", "C", "U", "N", "samples_per_class_per_domain", "n_parts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d < 2:
            raise ValueError(f"d must be >= 2, got {self.d}")
        for name in ("domain_shift_scale", "class_separation", "within_class_noise",
                     "part_scale", "style_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _place_anchors(spec: SyntheticSpec, rng: np.random.Generator, max_tries: int = 10_000) -> np.ndarray:
    sep = spec.class_separation
    if sep > 2.0:
        raise ValueError(f"class_separation {sep} exceeds the unit-sphere diameter 2")
    anchors: list[np.ndarray] = []
    for _ in range(spec.C):
        for _ in range(max_tries):
            cand = _unit(rng.standard_normal(spec.d))
            if all(np.linalg.norm(cand - a) >= sep for a in anchors):
                anchors.append(cand)
                break
        else:
            raise ValueError(
                f"cannot place {spec.C + spec.U} class anchors at separation {sep} "
                f"in dimension {spec.d}; lower class_separation or raise d")

    # unknowns are rotated copies of a known parent, just past the separation radius
    angle = 2.0 * np.arcsin(min(1.0, 0.5 * sep * 1.05))
    for u in range(spec.U):
        parent = anchors[u % spec.C]
        for _ in range(max_tries):
            g = rng.standard_normal(spec.d)
            g = _unit(g - (g @ parent) * parent)
            cand = np.cos(angle) * parent + np.sin(angle) * g
            if all(np.linalg.norm(cand - a) >= sep for a in anchors):
                anchors.append(cand)
                break
        else:
            raise ValueError(
                f"cannot place {spec.C + spec.U} class anchors at separation {sep} "
                f"in dimension {spec.d}; lower class_separation or raise d")
    return np.stack(anchors)


def make_synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    """Seeded multi-domain feature dataset.

    Each image is an ``N x d`` patch matrix: class anchor + domain offset +
    per-patch part vector + isotropic noise. Domain offsets share a common
    style component so every image carries a domain-wide direction. The
    ``U`` unknown classes are near copies of known anchors with their own
    part vectors (globally similar, locally different).
    """
    rng = np.random.default_rng(spec.seed)
    anchors = _place_anchors(spec, rng)
    n_cls = spec.C + spec.U
    style = spec.style_scale * _unit(rng.standard_normal(spec.d))
    offsets = style + spec.domain_shift_scale * rng.standard_normal((spec.M, spec.d)) / np.sqrt(spec.d)
    parts = spec.part_scale * rng.standard_normal((n_cls, spec.n_parts, spec.d)) / np.sqrt(spec.d)
    part_of_patch = np.arange(spec.N) % spec.n_parts

    domain_names = tuple(f"domain_{m}" for m in range(spec.M))
    class_names = tuple([f"class_{c}" for c in range(spec.C)] + [f"novel_{u}" for u in range(spec.U)])
    samples = []
    for m in range(spec.M):
        for c in range(n_cls):
            base = anchors[c] + offsets[m] + parts[c, part_of_patch]
            for i in range(spec.samples_per_class_per_domain):
                noise = spec.within_class_noise * rng.standard_normal((spec.N, spec.d))
                patches = base + noise
                patches.setflags(write=False)
                samples.append(LabeledSample(
                    image_id=f"{domain_names[m]}/{class_names[c]}/{i:04d}",
                    domain_id=m, class_id=c, payload=patches))
    return Dataset(tuple(samples), domain_names, class_names)


def synthetic_unknown_names(spec: SyntheticSpec) -> list[str]:
    return [f"novel_{u}" for u in range(spec.U)]


def remap_labels(dataset: Dataset, unknown_class_names: Sequence[str]) -> Dataset:
    """Relabel known classes to ``[0, C)`` and fold every unknown class into ``C``.

    The returned dataset names the catch-all class ``"unknown"``, so applying
    the same remap again is a no-op.
    """
    unknown = set(unknown_class_names) | {UNKNOWN_NAME}
    missing = set(unknown_class_names) - set(dataset.class_names)
    if missing:
        raise DatasetError(f"unknown classes not in dataset: {sorted(missing)}")
    known = [n for n in dataset.class_names if n not in unknown]
    if not known:
        raise DatasetError("unknown class set leaves no known classes")
    new_id = {n: (known.index(n) if n in known else len(known)) for n in dataset.class_names}
    names = tuple(known) + ((UNKNOWN_NAME,) if any(n in unknown for n in dataset.class_names) else ())
    samples = tuple(replace(s, class_id=new_id[dataset.class_names[s.class_id]]) for s in dataset.samples)
    return Dataset(samples, dataset.domain_names, names)


def build_losdo_splits(dataset: Dataset, unknown_class_names: Sequence[str] = ()) -> list[OSDGSplit]:
    """One split per domain: that domain is the target, the rest are sources."""
    M = len(dataset.domain_names)
    if M < 2:
        raise DatasetError("leave-one-domain-out needs at least 2 domains")
    remapped = remap_labels(dataset, unknown_class_names)
    known = tuple(n for n in remapped.class_names if n != UNKNOWN_NAME)
    C = len(known)
    unknown_ids = frozenset(i for i, n in enumerate(dataset.class_names)
                            if n in set(unknown_class_names) or n == UNKNOWN_NAME)
    splits = []
    for t in range(M):
        source = tuple(s for s in remapped.samples if s.domain_id != t and s.class_id < C)
        target = tuple(s for s in remapped.samples if s.domain_id == t)
        splits.append(OSDGSplit(
            source_domains=tuple(m for m in range(M) if m != t),
            target_domain=t,
            known_classes=known,
            unknown_class_ids=unknown_ids,
            source=source,
            target=target,
            domain_names=dataset.domain_names,
        ))
    return splits


FEATURE_SUFFIXES = (".npy",)


def load_directory_dataset(root_path: str | os.PathLike) -> Dataset:
    """Read a ``root/<domain>/<class>/<files>`` tree.

    ``.npy`` files become feature payloads; anything else is kept as an image
    path for an encoder backend. Domains and classes are numbered in
    lexicographic order; the class list is the union over domains.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise MissingRootError(f"dataset root {root} does not exist")
    domains = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not domains:
        raise EmptyDomainError(f"no domain directories under {root}")
    classes = sorted({c.name for d in domains for c in (root / d).iterdir() if c.is_dir()})
    class_id = {c: i for i, c in enumerate(classes)}

    samples = []
    for m, dom in enumerate(domains):
        files = sorted(f for c in (root / dom).iterdir() if c.is_dir() for f in c.iterdir() if f.is_file())
        if not files:
            raise EmptyDomainError(f"domain {dom!r} has no files")
        for f in files:
            rel = f.relative_to(root).as_posix()
            if not os.access(f, os.R_OK):
                raise UnreadableFileError(f"cannot read {rel}")
            if f.suffix in FEATURE_SUFFIXES:
                try:
                    payload = np.load(f, allow_pickle=False).astype(np.float64)
                except (OSError, ValueError) as exc:
                    raise UnreadableFileError(f"cannot read {rel}: {exc}") from exc
                payload.setflags(write=False)
            else:
                payload = str(f)
            samples.append(LabeledSample(rel, m, class_id[f.parent.name], payload))
    return Dataset(tuple(samples), tuple(domains), tuple(classes))


def save_dataset(dataset: Dataset, path: str | os.PathLike) -> Path:
    """Write a feature dataset as ``<path>`` (tensor archive) plus ``<path>.json`` (index)."""
    path = Path(path)
    archive.save(path, {"payloads": dataset.feature_array()})
    index = {
        "domain_names": list(dataset.domain_names),
        "class_names": list(dataset.class_names),
        "samples": [[s.image_id, s.domain_id, s.class_id] for s in dataset.samples],
    }
    mpath = path.with_name(path.name + ".json")
    mpath.write_text(json.dumps(index, sort_keys=True) + "\n")
    return mpath


def load_dataset(path: str | os.PathLike) -> Dataset:
    """Load a dataset archive written by :func:`save_dataset`, or a directory tree."""
    path = Path(path)
    if path.is_dir():
        return load_directory_dataset(path)
    if not path.exists():
        raise MissingRootError(f"dataset {path} does not exist")
    try:
        payloads = archive.load(path)["payloads"].astype(np.float64)
        index = json.loads(path.with_name(path.name + ".json").read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise UnreadableFileError(f"cannot read dataset archive {path}: {exc}") from exc
    samples = []
    for (image_id, m, c), p in zip(index["samples"], payloads):
        p.setflags(write=False)
        samples.append(LabeledSample(image_id, int(m), int(c), p))
    return Dataset(tuple(samples), tuple(index["domain_names"]), tuple(index["class_names"]))
