"""Turn attribute sets into free-form captions with permutation and dropout augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .dataset import AnnotatedRecord, AttributeTaxonomy, ParentClass

CLAUSES = {
    ParentClass.COUNTRY: "artwork from {}",
    ParentClass.CULTURE: "in {} culture",
    ParentClass.MEDIUM: "made of {}",
    ParentClass.DIMENSION: "{} size",
    ParentClass.TAGS: "related with {}",
}

DEFAULT_VARIANTS = 16
DEFAULT_DROP_PROB = 0.25
MAX_ATTEMPTS = 32


class CaptionError(ValueError):
    pass


@dataclass(frozen=True)
class CaptionTemplate:
    order: tuple[ParentClass, ...]

    def __post_init__(self) -> None:
        order = tuple(ParentClass(p) for p in self.order)
        if len(set(order)) != len(order):
            raise CaptionError("a parent class may appear at most once per template")
        object.__setattr__(self, "order", order)


_C, _U, _M, _D, _T = (ParentClass.COUNTRY, ParentClass.CULTURE, ParentClass.MEDIUM,
                      ParentClass.DIMENSION, ParentClass.TAGS)

CANONICAL = CaptionTemplate((_C, _U, _M, _D, _T))

# cycled by variant index
PERMUTATIONS = (
    CANONICAL,
    CaptionTemplate((_T, _C, _U, _M, _D)),
    CaptionTemplate((_M, _D, _C, _U, _T)),
    CaptionTemplate((_U, _C, _T, _M, _D)),
    CaptionTemplate((_D, _M, _T, _C, _U)),
    CaptionTemplate((_C, _T, _D, _M, _U)),
    CaptionTemplate((_U, _M, _C, _D, _T)),
    CaptionTemplate((_T, _D, _U, _C, _M)),
)


@dataclass(frozen=True)
class CaptionVariant:
    item_id: str
    text: str
    variant_index: int
    dropped: frozenset[int]


def _grouped(attrs: Iterable[int], taxonomy: AttributeTaxonomy) -> dict[ParentClass, list[int]]:
    groups: dict[ParentClass, list[int]] = {}
    for a in sorted(attrs):
        groups.setdefault(taxonomy.parent(a), []).append(a)
    return groups


def render(record: AnnotatedRecord, taxonomy: AttributeTaxonomy,
           template: CaptionTemplate, kept: Iterable[int]) -> str:
    kept = set(kept)
    if not kept:
        raise CaptionError("caption would be empty")
    stray = kept - record.attributes
    if stray:
        raise CaptionError(f"kept attributes {sorted(stray)} are not on record {record.item_id!r}")
    groups = _grouped(kept, taxonomy)
    missing = set(groups) - set(template.order)
    if missing:
        raise CaptionError(f"template has no clause for {sorted(p.value for p in missing)}")
    clauses = []
    for parent in template.order:
        if parent in groups:
            values = dict.fromkeys(taxonomy.value(a) for a in groups[parent])
            clauses.append(CLAUSES[parent].format(", ".join(values)))
    return ", ".join(clauses).strip()


def generate_variants(record: AnnotatedRecord, taxonomy: AttributeTaxonomy,
                      n_variants: int = DEFAULT_VARIANTS,
                      drop_prob: float = DEFAULT_DROP_PROB,
                      exclude: Iterable[ParentClass] = (),
                      seed: int | np.random.SeedSequence = 0,
                      templates: Sequence[CaptionTemplate] = PERMUTATIONS) -> list[CaptionVariant]:
    """Distinct caption variants for one record.

    Slot ``i`` uses ``templates[i % len(templates)]``. Each value of a
    multi-valued class is dropped with probability ``drop_prob``; a class
    never loses all of its values. A slot whose text was already produced
    is redrawn up to MAX_ATTEMPTS times before it is given up, so fewer
    than ``n_variants`` come back only when the record cannot support more.
    """
    if not 0.0 <= drop_prob < 1.0:
        raise CaptionError(f"drop_prob must be in [0, 1), got {drop_prob}")
    if n_variants < 1:
        raise CaptionError("n_variants must be positive")
    if not templates:
        raise CaptionError("no templates")
    excluded = {ParentClass(p) for p in exclude}
    groups = {p: ids for p, ids in _grouped(record.attributes, taxonomy).items()
              if p not in excluded}
    if not groups:
        raise CaptionError(f"record {record.item_id!r} has no attributes left after exclusion")

    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    variants: list[CaptionVariant] = []
    for slot in range(n_variants):
        template = templates[slot % len(templates)]
        for _ in range(MAX_ATTEMPTS):
            kept: list[int] = []
            for parent in CANONICAL.order:
                ids = groups.get(parent)
                if not ids:
                    continue
                if len(ids) == 1 or drop_prob == 0.0:
                    kept.extend(ids)
                    continue
                keep = rng.random(len(ids)) >= drop_prob
                if not keep.any():
                    keep[rng.integers(len(ids))] = True
                kept.extend(a for a, k in zip(ids, keep) if k)
            text = render(record, taxonomy, template, kept)
            if text not in seen:
                break
            if drop_prob == 0.0:
                break
        if text in seen:
            continue
        seen.add(text)
        variants.append(CaptionVariant(record.item_id, text, len(variants),
                                       frozenset(record.attributes - set(kept))))
    return variants


def record_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Per-record seed so a corpus and a training run draw the same variants."""
    return np.random.SeedSequence((seed, 1, index))


def canonical_caption(record: AnnotatedRecord, taxonomy: AttributeTaxonomy,
                      exclude: Iterable[ParentClass] = ()) -> str:
    """Canonical-order caption with every (non-excluded) attribute kept."""
    excluded = {ParentClass(p) for p in exclude}
    kept = [a for a in record.attributes if taxonomy.parent(a) not in excluded]
    return render(record, taxonomy, CANONICAL, kept)


def sample_caption(variants: Sequence[CaptionVariant], rng: np.random.Generator) -> CaptionVariant:
    if not variants:
        raise CaptionError("no caption variants to sample from")
    return variants[int(rng.integers(len(variants)))]


def write_corpus(variants: Iterable[CaptionVariant], stream: TextIO) -> None:
    for v in variants:
        stream.write(json.dumps({"id": v.item_id, "variant": v.variant_index, "text": v.text},
                                ensure_ascii=False) + "\n")


def read_corpus(stream: TextIO) -> list[dict]:
    return [json.loads(line) for line in stream if line.strip()]
