"""Tree-structured label hierarchy.

Levels are numbered from 1 (finest) to m (coarsest). Every class at level
k < m has exactly one parent at level k + 1; classes are identified by
``(level, index)`` pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import TaxonomyError


class LabelId(NamedTuple):
    level: int
    index: int


@dataclass(frozen=True)
class Taxonomy:
    num_levels: int
    classes_per_level: tuple[int, ...]
    # parent_of[k - 1][i] is the level-(k+1) parent of class i at level k
    parent_of: tuple[tuple[int, ...], ...]
    class_names: tuple[tuple[str, ...], ...] | None = None
    _children: tuple[tuple[tuple[int, ...], ...], ...] = field(
        default=(), init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        _validate(self.num_levels, self.classes_per_level, self.parent_of, self.class_names)
        # children index: _children[k - 2][p] = sorted child indices at level k-1
        children = []
        for k in range(2, self.num_levels + 1):
            groups: list[list[int]] = [[] for _ in range(self.classes_per_level[k - 1])]
            for child, par in enumerate(self.parent_of[k - 2]):
                groups[par].append(child)
            children.append(tuple(tuple(g) for g in groups))
        object.__setattr__(self, "_children", tuple(children))

    @property
    def m(self) -> int:
        return self.num_levels

    @property
    def total_labels(self) -> int:
        """|Y|: number of classes summed over all levels."""
        return sum(self.classes_per_level)

    def size(self, level: int) -> int:
        self._check_level(level)
        return self.classes_per_level[level - 1]

    def parent_array(self, level: int) -> np.ndarray:
        """Parent index (at ``level + 1``) for every class at ``level``."""
        if not 1 <= level < self.num_levels:
            raise TaxonomyError(f"level {level} has no parents (m={self.num_levels})")
        return np.asarray(self.parent_of[level - 1], dtype=np.int64)

    def name(self, label: LabelId) -> str:
        self._check_label(label)
        if self.class_names is None:
            return f"L{label.level}:{label.index}"
        return self.class_names[label.level - 1][label.index]

    def chain(self, index: int, level: int = 1) -> tuple[int, ...]:
        """Label tuple from ``(level, index)`` up to the top, finest first."""
        self._check_label(LabelId(level, index))
        out = [index]
        for k in range(level, self.num_levels):
            index = self.parent_of[k - 1][index]
            out.append(index)
        return tuple(out)

    def is_consistent(self, labels: Sequence[int]) -> bool:
        return self.first_violation(labels) is None

    def first_violation(self, labels: Sequence[int]) -> tuple[int, int, int] | None:
        """First broken edge ``(k, expected_parent, got)`` of a finest-first tuple.

        ``k`` is the level of the child. Returns None for a consistent chain.
        Raises TaxonomyError if the tuple has the wrong length or an index is
        out of range.
        """
        if len(labels) != self.num_levels:
            raise TaxonomyError(f"label tuple has {len(labels)} entries, expected {self.num_levels}")
        for k, idx in enumerate(labels, start=1):
            if not 0 <= int(idx) < self.classes_per_level[k - 1]:
                raise TaxonomyError(f"label {idx} out of range at level {k}")
        for k in range(1, self.num_levels):
            expected = self.parent_of[k - 1][int(labels[k - 1])]
            if expected != int(labels[k]):
                return k, expected, int(labels[k])
        return None

    def _check_level(self, level: int) -> None:
        if not 1 <= level <= self.num_levels:
            raise TaxonomyError(f"level {level} out of range 1..{self.num_levels}")

    def _check_label(self, label: LabelId) -> None:
        self._check_level(label.level)
        if not 0 <= label.index < self.classes_per_level[label.level - 1]:
            raise TaxonomyError(f"class index {label.index} out of range at level {label.level}")

    def to_dict(self) -> dict:
        out: dict = {
            "levels": self.num_levels,
            "classes_per_level": list(self.classes_per_level),
            "parents": [list(p) for p in self.parent_of],
        }
        if self.class_names is not None:
            out["names"] = [list(n) for n in self.class_names]
        return out


def _validate(m, sizes, parents, names) -> None:
    if not isinstance(m, int) or m < 1:
        raise TaxonomyError(f"levels must be a positive integer, got {m!r}")
    if len(sizes) != m:
        raise TaxonomyError(f"classes_per_level has {len(sizes)} entries, expected {m}")
    for k, s in enumerate(sizes, start=1):
        if not isinstance(s, int) or s < 1:
            raise TaxonomyError(f"level {k} must have a positive class count, got {s!r}")
    if len(parents) != m - 1:
        raise TaxonomyError(f"parents has {len(parents)} arrays, expected {m - 1}")
    for k in range(1, m):
        row = parents[k - 1]
        n_child, n_parent = sizes[k - 1], sizes[k]
        if len(row) < n_child:
            raise TaxonomyError(
                f"orphan class at level {k}: index {len(row)} has no parent entry"
            )
        if len(row) > n_child:
            raise TaxonomyError(
                f"level {k} lists {len(row)} parent entries for {n_child} classes"
            )
        seen = set()
        for i, p in enumerate(row):
            if p is None:
                raise TaxonomyError(f"orphan class at level {k}: index {i} has no parent")
            if not isinstance(p, int) or isinstance(p, bool):
                raise TaxonomyError(f"parent of class {i} at level {k} must be an integer, got {p!r}")
            if not 0 <= p < n_parent:
                raise TaxonomyError(
                    f"class {i} at level {k} references nonexistent parent {p} at level {k + 1}"
                )
            seen.add(p)
        missing = sorted(set(range(n_parent)) - seen)
        if missing:
            raise TaxonomyError(f"class {missing[0]} at level {k + 1} has no children")
    if names is not None:
        if len(names) != m:
            raise TaxonomyError(f"names has {len(names)} arrays, expected {m}")
        for k, row in enumerate(names, start=1):
            if len(row) != sizes[k - 1]:
                raise TaxonomyError(f"level {k} has {len(row)} names for {sizes[k - 1]} classes")
            dupes = {n for n in row if list(row).count(n) > 1}
            if dupes:
                raise TaxonomyError(f"duplicate class id {sorted(dupes)[0]!r} at level {k}")


def _parent_entries(row, k: int) -> list:
    """Flatten one parents array; a list entry means several parents were given."""
    out = []
    for i, p in enumerate(row):
        if isinstance(p, list):
            if len(p) == 1:
                p = p[0]
            elif len(p) == 0:
                p = None
            else:
                raise TaxonomyError(
                    f"class {i} at level {k} has {len(p)} parent entries (duplicate parent)"
                )
        out.append(p)
    return out


def from_dict(doc: dict) -> Taxonomy:
    if not isinstance(doc, dict):
        raise TaxonomyError("taxonomy document must be a JSON object")
    for key in ("levels", "classes_per_level"):
        if key not in doc:
            raise TaxonomyError(f"taxonomy document missing field {key!r}")
    m = doc["levels"]
    parents_raw = doc.get("parents", [])
    if not isinstance(parents_raw, list) or not all(isinstance(r, list) for r in parents_raw):
        raise TaxonomyError("parents must be an array of arrays")
    parents = tuple(tuple(_parent_entries(r, k)) for k, r in enumerate(parents_raw, start=1))
    names = doc.get("names")
    if names is not None:
        names = tuple(tuple(str(n) for n in row) for row in names)
    return Taxonomy(
        num_levels=m,
        classes_per_level=tuple(doc["classes_per_level"]),
        parent_of=parents,
        class_names=names,
    )


def load_taxonomy(path: str | Path) -> Taxonomy:
    path = Path(path)
    if not path.is_file():
        raise TaxonomyError(f"taxonomy file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise TaxonomyError(f"malformed taxonomy document {path}: {exc}") from exc
    return from_dict(doc)


def save_taxonomy(tax: Taxonomy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(tax.to_dict(), indent=1) + "\n", encoding="utf-8")


def balanced(classes_per_level: Iterable[int]) -> Taxonomy:
    """Taxonomy where class i at level k has parent i // fan_out (finest first)."""
    sizes = tuple(int(s) for s in classes_per_level)
    parents = []
    for k in range(len(sizes) - 1):
        if sizes[k] % sizes[k + 1]:
            raise TaxonomyError(
                f"level {k + 1} size {sizes[k]} is not a multiple of level {k + 2} size {sizes[k + 1]}"
            )
        fan = sizes[k] // sizes[k + 1]
        parents.append(tuple(i // fan for i in range(sizes[k])))
    return Taxonomy(len(sizes), sizes, tuple(parents))


def parent(tax: Taxonomy, label: LabelId) -> LabelId:
    tax._check_label(label)
    if label.level == tax.num_levels:
        raise TaxonomyError(f"class {label.index} at top level {label.level} has no parent")
    return LabelId(label.level + 1, tax.parent_of[label.level - 1][label.index])


def children(tax: Taxonomy, label: LabelId) -> frozenset[LabelId]:
    tax._check_label(label)
    if label.level == 1:
        raise TaxonomyError("classes at level 1 have no children")
    return frozenset(
        LabelId(label.level - 1, c) for c in tax._children[label.level - 2][label.index]
    )


def edge_count_R(tax: Taxonomy) -> int:
    """Number of parent-child edges: sum of |C^k| over k = 1..m-1."""
    return sum(tax.classes_per_level[:-1])
