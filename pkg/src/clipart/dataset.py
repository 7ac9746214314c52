"""iMet-style attribute taxonomy and annotation files, plus a synthetic stand-in.

Labels CSV::

    attribute_id,attribute_name
    1,culture::roma

Annotations CSV::

    id,attribute_ids
    abc123,1 7 42
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

SEPARATOR = "::"


class DatasetError(ValueError):
    """Malformed labels/annotations or an invalid dataset request."""


class ParentClass(str, enum.Enum):
    COUNTRY = "country"
    CULTURE = "culture"
    DIMENSION = "dimension"
    MEDIUM = "medium"
    TAGS = "tags"

    @classmethod
    def parse(cls, name: str) -> ParentClass:
        try:
            return cls(name)
        except ValueError:
            raise DatasetError(f"unknown parent class {name!r}") from None


@dataclass(frozen=True)
class AttributeTaxonomy:
    """Closed label set: attribute id -> (parent class, value)."""

    entries: Mapping[int, tuple[ParentClass, str]]
    _by_name: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        entries = dict(sorted(self.entries.items()))
        by_name: dict[tuple[ParentClass, str], int] = {}
        for attr_id, (parent, value) in entries.items():
            if attr_id < 0:
                raise DatasetError(f"negative attribute id {attr_id}")
            if not value:
                raise DatasetError(f"attribute {attr_id} has an empty value")
            key = (ParentClass(parent), value)
            if key in by_name:
                raise DatasetError(
                    f"duplicate attribute {parent.value}{SEPARATOR}{value} "
                    f"(ids {by_name[key]} and {attr_id})")
            by_name[key] = attr_id
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "_by_name", by_name)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, attr_id: object) -> bool:
        return attr_id in self.entries

    def parent(self, attr_id: int) -> ParentClass:
        return self.entries[attr_id][0]

    def value(self, attr_id: int) -> str:
        return self.entries[attr_id][1]

    def name(self, attr_id: int) -> str:
        parent, value = self.entries[attr_id]
        return f"{parent.value}{SEPARATOR}{value}"

    def lookup(self, parent: ParentClass, value: str) -> int:
        return self._by_name[(ParentClass(parent), value)]

    @property
    def ids(self) -> list[int]:
        return list(self.entries)


@dataclass(frozen=True)
class AnnotatedRecord:
    item_id: str
    attributes: frozenset[int]
    features: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", frozenset(self.attributes))
        if self.features is not None:
            feats = np.array(self.features, dtype=np.float64, copy=True)
            feats.setflags(write=False)
            object.__setattr__(self, "features", feats)


def _rows(stream: TextIO, header: Sequence[str], what: str):
    reader = csv.reader(stream)
    first = next(reader, None)
    if first is None:
        raise DatasetError(f"{what}: missing header")
    if [c.strip().lstrip("﻿") for c in first] != list(header):
        raise DatasetError(f"{what}: expected header {','.join(header)!r}, got {','.join(first)!r}")
    for row in reader:
        if not row:
            continue
        yield reader.line_num, row


def parse_labels(stream: TextIO, expected_size: int | None = None) -> AttributeTaxonomy:
    entries: dict[int, tuple[ParentClass, str]] = {}
    seen: dict[tuple[ParentClass, str], int] = {}
    for line, row in _rows(stream, ("attribute_id", "attribute_name"), "labels"):
        if len(row) != 2:
            raise DatasetError(f"malformed row at line {line}: expected 2 fields, got {len(row)}")
        raw_id, name = row
        try:
            attr_id = int(raw_id)
        except ValueError:
            raise DatasetError(f"bad attribute id {raw_id!r} at line {line}") from None
        if attr_id < 0:
            raise DatasetError(f"negative attribute id {attr_id} at line {line}")
        parent_name, sep, value = name.partition(SEPARATOR)
        if not sep or not value:
            raise DatasetError(f"malformed attribute name {name!r} at line {line}")
        try:
            parent = ParentClass(parent_name)
        except ValueError:
            raise DatasetError(f"unknown parent class {parent_name!r} at line {line}") from None
        if attr_id in entries:
            raise DatasetError(f"duplicate attribute id {attr_id} at line {line}")
        if (parent, value) in seen:
            raise DatasetError(f"duplicate attribute name {name!r} at line {line}")
        entries[attr_id] = (parent, value)
        seen[(parent, value)] = attr_id
    if expected_size is not None and len(entries) != expected_size:
        raise DatasetError(f"taxonomy has {len(entries)} entries, expected {expected_size}")
    return AttributeTaxonomy(entries)


def serialize_labels(taxonomy: AttributeTaxonomy, stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["attribute_id", "attribute_name"])
    for attr_id in taxonomy.ids:
        writer.writerow([attr_id, taxonomy.name(attr_id)])


def parse_annotations(stream: TextIO, taxonomy: AttributeTaxonomy) -> list[AnnotatedRecord]:
    records = []
    for line, row in _rows(stream, ("id", "attribute_ids"), "annotations"):
        if len(row) != 2:
            raise DatasetError(f"malformed row at line {line}: expected 2 fields, got {len(row)}")
        item_id, raw = row
        if not item_id:
            raise DatasetError(f"empty item id at line {line}")
        tokens = raw.split()
        if not tokens:
            raise DatasetError(f"empty attribute list for {item_id!r} at line {line}")
        attrs = set()
        for tok in tokens:
            try:
                attr_id = int(tok)
            except ValueError:
                raise DatasetError(f"bad attribute id {tok!r} at line {line}") from None
            if attr_id not in taxonomy:
                raise DatasetError(f"unknown attribute {attr_id} at line {line}")
            attrs.add(attr_id)
        records.append(AnnotatedRecord(item_id, frozenset(attrs)))
    return records


def serialize_annotations(records: Iterable[AnnotatedRecord], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["id", "attribute_ids"])
    for rec in records:
        writer.writerow([rec.item_id, " ".join(str(a) for a in sorted(rec.attributes))])


def attach_features(records: Sequence[AnnotatedRecord], ids: Sequence[str],
                    rows: np.ndarray) -> list[AnnotatedRecord]:
    """Pair records with feature rows by item id."""
    index = {k: i for i, k in enumerate(ids)}
    out = []
    for rec in records:
        if rec.item_id not in index:
            raise DatasetError(f"no features for item {rec.item_id!r}")
        out.append(AnnotatedRecord(rec.item_id, rec.attributes, rows[index[rec.item_id]]))
    return out


def split_holdout(records: Sequence[AnnotatedRecord], holdout_fraction: float,
                  seed: int) -> tuple[list[AnnotatedRecord], list[AnnotatedRecord]]:
    """Uniform random split; both halves keep the input order."""
    if not records:
        raise DatasetError("cannot split an empty record list")
    if not 0.0 < holdout_fraction < 1.0:
        raise DatasetError(f"holdout fraction must be in (0, 1), got {holdout_fraction}")
    n = len(records)
    n_hold = int(math.floor(holdout_fraction * n + 0.5))
    picked = np.random.default_rng(seed).permutation(n)[:n_hold]
    mask = np.zeros(n, dtype=bool)
    mask[picked] = True
    train = [r for r, m in zip(records, mask) if not m]
    hold = [r for r, m in zip(records, mask) if m]
    return train, hold


# -- synthetic data -----------------------------------------------------------

_WORDS = {
    ParentClass.COUNTRY: ["japan", "egypt", "france", "italy", "china", "peru", "iran", "greece"],
    ParentClass.CULTURE: ["edo", "roma", "attic", "ming", "inca", "coptic", "safavid", "etruscan"],
    ParentClass.MEDIUM: ["paper", "bronze", "terracotta", "silk", "ivory", "glass", "wood", "gold"],
    ParentClass.DIMENSION: ["small", "big", "tall", "wide", "flat", "tiny", "huge", "long"],
    ParentClass.TAGS: ["women", "party", "portraits", "dishes", "men", "popes", "flowers",
                       "birds", "horses", "boats", "trees", "dogs", "masks", "coins",
                       "lions", "temples"],
}

TAG_VOCAB_FACTOR = 4


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic dataset.

    ``centroid_scale`` is the expected Euclidean norm of a cluster centroid.
    The noise norm grows like ``noise_std * sqrt(d_img)`` while centroid
    distances do not, so raising ``d_img`` makes raw nearest-neighbour
    lookups unreliable without making the clusters less learnable.
    """

    n_items: int = 512
    n_clusters: int = 16
    d_img: int = 64
    attrs_per_parent: int = 2
    noise_std: float = 0.05
    seed: int = 0
    centroid_scale: float = 0.25

    def __post_init__(self) -> None:
        if min(self.n_items, self.n_clusters, self.d_img, self.attrs_per_parent) < 1:
            raise DatasetError("synth counts and dimensions must be positive")
        if self.n_clusters > self.n_items:
            raise DatasetError(
                f"n_clusters ({self.n_clusters}) exceeds n_items ({self.n_items})")
        if self.noise_std < 0:
            raise DatasetError("noise_std must be non-negative")
        if self.centroid_scale <= 0:
            raise DatasetError("centroid_scale must be positive")


def _value_names(parent: ParentClass, count: int) -> list[str]:
    words = _WORDS[parent]
    return [words[j % len(words)] + (str(j // len(words)) if j >= len(words) else "")
            for j in range(count)]


def synth_taxonomy(attrs_per_parent: int) -> AttributeTaxonomy:
    """Non-tag classes get ``attrs_per_parent`` values; tags get four times as many."""
    entries = {}
    for parent in ParentClass:
        count = attrs_per_parent * (TAG_VOCAB_FACTOR if parent is ParentClass.TAGS else 1)
        for value in _value_names(parent, count):
            entries[len(entries)] = (parent, value)
    return AttributeTaxonomy(entries)


def _balanced(rng: np.random.Generator, n_values: int, n_slots: int) -> np.ndarray:
    reps = -(-n_slots // n_values)
    return rng.permutation(np.tile(np.arange(n_values), reps)[:n_slots])


def synth_dataset(config: SynthConfig) -> tuple[AttributeTaxonomy, list[AnnotatedRecord]]:
    """Gaussian clusters whose attribute sets are a deterministic function of the cluster.

    Every cluster gets one value per non-tag parent class plus one to three
    tags; no two clusters share a full attribute set. Items are assigned
    to clusters round-robin, so cluster sizes differ by at most one.
    """
    rng = np.random.default_rng(config.seed)
    taxonomy = synth_taxonomy(config.attrs_per_parent)
    by_parent = {p: [a for a in taxonomy.ids if taxonomy.parent(a) is p] for p in ParentClass}
    n_clusters = config.n_clusters

    base: list[list[int]] = [[] for _ in range(n_clusters)]
    for parent in ParentClass:
        if parent is ParentClass.TAGS:
            continue
        values = by_parent[parent]
        for c, j in enumerate(_balanced(rng, len(values), n_clusters)):
            base[c].append(values[j])

    tags = by_parent[ParentClass.TAGS]
    seeded = _balanced(rng, len(tags), n_clusters)
    cluster_attrs: list[frozenset[int]] = []
    seen: set[frozenset[int]] = set()
    for c in range(n_clusters):
        for _ in range(1000):
            n_tags = int(rng.integers(1, 4))
            extra = rng.choice(len(tags), size=n_tags, replace=False)
            # the balanced tag keeps every tag value in use when n_clusters allows it
            chosen = {tags[seeded[c]]} | {tags[j] for j in extra[: n_tags - 1]}
            attrs = frozenset(base[c]) | frozenset(chosen)
            if attrs not in seen:
                break
        else:
            raise DatasetError("could not draw distinct attribute sets; raise attrs_per_parent")
        seen.add(attrs)
        cluster_attrs.append(attrs)

    centroids = rng.normal(size=(n_clusters, config.d_img)) * (
        config.centroid_scale / math.sqrt(config.d_img))
    noise = rng.normal(size=(config.n_items, config.d_img)) * config.noise_std
    width = len(str(config.n_items - 1))
    records = []
    for i in range(config.n_items):
        c = i % n_clusters
        records.append(AnnotatedRecord(f"item{i:0{width}d}", cluster_attrs[c],
                                       centroids[c] + noise[i]))
    return taxonomy, records


def synth_cluster_of(records: Sequence[AnnotatedRecord], n_clusters: int) -> np.ndarray:
    """Cluster index of each synthetic record (round-robin assignment)."""
    return np.array([int(r.item_id[4:]) % n_clusters for r in records])
