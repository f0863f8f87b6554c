"""Hierarchical tag vocabulary and annotation handling.

The vocabulary has two levels: coarse groups (e.g. "powered-saw") and fine
tags (e.g. "chainsaw"), each fine tag belonging to exactly one group.  Most
groups additionally carry an "unknown/other" slot that annotators use when
they can hear the group but cannot identify the fine type.  This module
loads the vocabulary from a YAML document, converts raw per-annotator
annotations into training targets with loss masks, and aggregates multiple
annotators into a single binary label vector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy documents or inconsistent annotations."""


@dataclass(frozen=True)
class Taxonomy:
    """Immutable tag vocabulary with stable orderings.

    ``coarse`` and ``fine`` fix the index of every tag for the lifetime of
    the object.  ``parent`` maps each fine tag to its coarse group and
    ``incomplete`` maps each coarse group to its "unknown/other" slot id,
    or ``None`` when the group has no such slot.
    """

    coarse: tuple[str, ...]
    fine: tuple[str, ...]
    parent: dict[str, str]
    incomplete: dict[str, str | None]
    fine_index: dict[str, int] = field(repr=False, default_factory=dict)
    coarse_index: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "fine_index", {t: i for i, t in enumerate(self.fine)})
        object.__setattr__(self, "coarse_index", {t: i for i, t in enumerate(self.coarse)})

    @property
    def n_fine(self) -> int:
        return len(self.fine)

    @property
    def n_coarse(self) -> int:
        return len(self.coarse)

    @property
    def incomplete_ids(self) -> tuple[str, ...]:
        """Incomplete slot ids ordered by their coarse group's index."""
        return tuple(self.incomplete[c] for c in self.coarse if self.incomplete[c] is not None)

    @property
    def n_incomplete(self) -> int:
        return len(self.incomplete_ids)

    def children(self, coarse_id: str) -> tuple[str, ...]:
        return tuple(f for f in self.fine if self.parent[f] == coarse_id)

    def incomplete_parent(self, slot_id: str) -> str:
        for c, s in self.incomplete.items():
            if s == slot_id:
                return c
        raise TaxonomyError(f"unknown incomplete tag id: {slot_id!r}")

    def is_fine(self, tag_id: str) -> bool:
        return tag_id in self.fine_index

    def is_coarse(self, tag_id: str) -> bool:
        return tag_id in self.coarse_index

    def is_incomplete(self, tag_id: str) -> bool:
        return tag_id in self.incomplete_ids


@dataclass(frozen=True)
class AnnotationSet:
    """One annotator's presence marks for one clip.

    ``fine_presence`` and ``incomplete_presence`` hold binary marks keyed by
    fine tag id and coarse tag id respectively; missing keys mean absent.
    """

    clip_id: str
    annotator_id: str
    fine_presence: dict[str, int]
    incomplete_presence: dict[str, int]

    def validate(self, taxonomy: Taxonomy) -> None:
        for tag, v in self.fine_presence.items():
            if tag not in taxonomy.fine_index:
                raise TaxonomyError(f"unknown fine tag id: {tag!r} (clip {self.clip_id})")
            if v not in (0, 1):
                raise TaxonomyError(f"non-binary presence {v!r} for tag {tag!r}")
        for coarse, v in self.incomplete_presence.items():
            if coarse not in taxonomy.coarse_index:
                raise TaxonomyError(f"unknown coarse tag id: {coarse!r} (clip {self.clip_id})")
            if taxonomy.incomplete[coarse] is None and v:
                raise TaxonomyError(f"group {coarse!r} has no unknown/other slot")
            if v not in (0, 1):
                raise TaxonomyError(f"non-binary presence {v!r} for group {coarse!r}")


@dataclass(frozen=True)
class TargetVector:
    """Per-annotation-set training target.

    ``coarse[c]`` is 1 iff a child fine tag is marked or the group's
    unknown/other slot is marked.  ``mask_fine[f]`` is 0 exactly when the
    parent group's unknown/other slot is marked: the annotator declared the
    fine type unknowable, so no fine-level loss may flow there.
    """

    fine: np.ndarray
    coarse: np.ndarray
    mask_fine: np.ndarray


def load_taxonomy(source: str | Path) -> Taxonomy:
    """Load a taxonomy from a YAML file path or a YAML string.

    Expected document shape::

        coarse:
          - id: powered-saw
            other: other-unknown-powered-saw   # optional
            fine: [chainsaw, large-rotating-saw]

    Raises :class:`TaxonomyError` on duplicate ids, fine tags with zero or
    multiple parents, or an empty document.
    """
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and source.endswith((".yaml", ".yml"))):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or not doc.get("coarse"):
        raise TaxonomyError("taxonomy document is empty or missing 'coarse' groups")

    coarse: list[str] = []
    fine: list[str] = []
    parent: dict[str, str] = {}
    incomplete: dict[str, str | None] = {}
    seen: set[str] = set()

    def claim(tag_id, kind):
        if not tag_id or not isinstance(tag_id, str):
            raise TaxonomyError(f"invalid {kind} tag id: {tag_id!r}")
        if tag_id in seen:
            raise TaxonomyError(f"duplicate tag id: {tag_id!r}")
        seen.add(tag_id)

    for group in doc["coarse"]:
        cid = group.get("id")
        claim(cid, "coarse")
        coarse.append(cid)
        slot = group.get("other")
        if slot is not None:
            claim(slot, "incomplete")
        incomplete[cid] = slot
        for fid in group.get("fine") or []:
            if fid in parent:
                raise TaxonomyError(f"fine tag {fid!r} listed under multiple groups")
            claim(fid, "fine")
            fine.append(fid)
            parent[fid] = cid

    if not fine:
        raise TaxonomyError("taxonomy has no fine tags")
    return Taxonomy(coarse=tuple(coarse), fine=tuple(fine), parent=parent, incomplete=incomplete)


def default_taxonomy_path() -> Path:
    """Path of the packaged urban noise taxonomy (23 fine tags, 8 groups)."""
    return Path(__file__).parent / "data" / "dcase_ust.yaml"


def build_target(taxonomy: Taxonomy, annotation_set: AnnotationSet) -> TargetVector:
    """Convert one annotator's marks into a target vector with a fine mask.

    Coarse targets are derived: a group is positive when any of its fine
    tags is marked or its unknown/other slot is marked.  Whenever the
    unknown/other slot of a group is marked, every fine position of that
    group is masked out of the fine-level loss.
    """
    annotation_set.validate(taxonomy)
    fine = np.zeros(taxonomy.n_fine, dtype=np.float64)
    coarse = np.zeros(taxonomy.n_coarse, dtype=np.float64)
    mask_fine = np.ones(taxonomy.n_fine, dtype=np.float64)

    for tag, v in annotation_set.fine_presence.items():
        if v:
            fi = taxonomy.fine_index[tag]
            fine[fi] = 1.0
            coarse[taxonomy.coarse_index[taxonomy.parent[tag]]] = 1.0
    for group, v in annotation_set.incomplete_presence.items():
        if v:
            coarse[taxonomy.coarse_index[group]] = 1.0
            for f in taxonomy.children(group):
                mask_fine[taxonomy.fine_index[f]] = 0.0
    return TargetVector(fine=fine, coarse=coarse, mask_fine=mask_fine)


def aggregate_at_least_one(annotation_sets: list[AnnotationSet], taxonomy: Taxonomy) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise OR of annotators: a tag is positive if anyone marked it.

    Returns ``(fine, coarse)`` binary vectors.  The coarse vector is the OR
    of each set's derived coarse target, so unknown/other marks count as
    coarse evidence.  All sets must belong to the same clip.
    """
    if not annotation_sets:
        raise TaxonomyError("need at least one annotation set")
    clip_ids = {s.clip_id for s in annotation_sets}
    if len(clip_ids) > 1:
        raise TaxonomyError(f"mismatched clip ids in aggregation: {sorted(clip_ids)}")
    fine = np.zeros(taxonomy.n_fine, dtype=np.float64)
    coarse = np.zeros(taxonomy.n_coarse, dtype=np.float64)
    for s in annotation_sets:
        t = build_target(taxonomy, s)
        fine = np.maximum(fine, t.fine)
        coarse = np.maximum(coarse, t.coarse)
    return fine, coarse


ANNOTATION_HEADER = ["clip_id", "annotator_id", "tag_id", "presence"]


def load_annotations(path: str | Path, taxonomy: Taxonomy) -> dict[str, list[AnnotationSet]]:
    """Read a long-format annotation CSV into per-clip annotation sets.

    Columns: ``clip_id,annotator_id,tag_id,presence`` with presence in
    {0,1}.  Rows for "unknown/other" use the incomplete slot id.  Rows with
    presence 0 are accepted (explicit negatives) and equivalent to absent
    rows.  Sets are ordered by annotator id for reproducibility.
    """
    by_key: dict[tuple[str, str], AnnotationSet] = {}
    with open(path, newline="", encoding="utf-8") as fp:
        reader = csv.DictReader(fp)
        if reader.fieldnames != ANNOTATION_HEADER:
            raise TaxonomyError(f"bad annotation header {reader.fieldnames!r}, expected {ANNOTATION_HEADER}")
        for row in reader:
            presence = int(row["presence"])
            if presence not in (0, 1):
                raise TaxonomyError(f"presence must be 0 or 1, got {row['presence']!r}")
            key = (row["clip_id"], row["annotator_id"])
            if key not in by_key:
                by_key[key] = AnnotationSet(row["clip_id"], row["annotator_id"], {}, {})
            s = by_key[key]
            tag = row["tag_id"]
            if taxonomy.is_fine(tag):
                s.fine_presence[tag] = max(s.fine_presence.get(tag, 0), presence)
            elif taxonomy.is_incomplete(tag):
                group = taxonomy.incomplete_parent(tag)
                s.incomplete_presence[group] = max(s.incomplete_presence.get(group, 0), presence)
            else:
                raise TaxonomyError(f"unknown tag id in annotations: {tag!r}")

    clips: dict[str, list[AnnotationSet]] = {}
    for (clip_id, _), s in by_key.items():
        s.validate(taxonomy)
        clips.setdefault(clip_id, []).append(s)
    for sets in clips.values():
        sets.sort(key=lambda s: s.annotator_id)
    return clips


def write_annotations(path: str | Path, sets: list[AnnotationSet], taxonomy: Taxonomy) -> None:
    """Write annotation sets as a long-format CSV (positive rows only)."""
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(ANNOTATION_HEADER)
        for s in sets:
            for tag in taxonomy.fine:
                if s.fine_presence.get(tag):
                    writer.writerow([s.clip_id, s.annotator_id, tag, 1])
            for group in taxonomy.coarse:
                if s.incomplete_presence.get(group):
                    writer.writerow([s.clip_id, s.annotator_id, taxonomy.incomplete[group], 1])
