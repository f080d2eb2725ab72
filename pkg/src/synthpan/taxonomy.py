"""Category palette shared by every stage of the toolkit.

A taxonomy is a plain-text document with one record per category::

    # comments and blank lines are ignored
    name,r,g,b,kind
    floor,128,64,128,stuff
    screwdriver,0,60,100,thing

The header line is optional. Category indices follow document order.
Black ``(0, 0, 0)`` is reserved for unlabeled pixels and may not appear in
the palette.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

RGB = Tuple[int, int, int]

UNLABELED = -1
BLACK: RGB = (0, 0, 0)
KINDS = ("thing", "stuff")
_HEADER = ["name", "r", "g", "b", "kind"]


class TaxonomyError(ValueError):
    """Raised for malformed or inconsistent taxonomy documents."""


@dataclass(frozen=True)
class SemanticCategory:
    index: int
    name: str
    color: RGB
    kind: str

    @property
    def isthing(self) -> bool:
        return self.kind == "thing"


@dataclass(frozen=True)
class Taxonomy:
    """Ordered, validated list of categories.

    Instances are immutable. Lookup tables are built once at construction.
    """

    categories: Tuple[SemanticCategory, ...]
    counts: Optional[Tuple[int, ...]] = None
    _by_color: dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _by_name: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        by_color, by_name = {}, {}
        for i, cat in enumerate(self.categories):
            if cat.index != i:
                raise TaxonomyError(f"category {cat.name!r} has index {cat.index}, expected {i}")
            if cat.kind not in KINDS:
                raise TaxonomyError(f"category {cat.name!r}: kind must be thing or stuff, got {cat.kind!r}")
            if len(cat.color) != 3 or any(not 0 <= c <= 255 for c in cat.color):
                raise TaxonomyError(f"category {cat.name!r}: color channels must be in 0..255")
            if tuple(cat.color) == BLACK:
                raise TaxonomyError(f"category {cat.name!r}: black is reserved for unlabeled")
            if cat.color in by_color:
                raise TaxonomyError(
                    f"duplicate color {cat.color} for {cat.name!r} and {by_color[cat.color].name!r}")
            if cat.name in by_name:
                raise TaxonomyError(f"duplicate name {cat.name!r}")
            by_color[cat.color] = cat
            by_name[cat.name] = cat
        if self.counts is not None and len(self.counts) != len(self.categories):
            raise TaxonomyError("counts must have one entry per category")
        object.__setattr__(self, "_by_color", by_color)
        object.__setattr__(self, "_by_name", by_name)

    def __len__(self) -> int:
        return len(self.categories)

    def __iter__(self):
        return iter(self.categories)

    def __getitem__(self, index: int) -> SemanticCategory:
        return self.categories[index]

    def by_name(self, name: str) -> SemanticCategory:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown category {name!r}") from None

    @property
    def things(self) -> Tuple[SemanticCategory, ...]:
        return tuple(c for c in self.categories if c.isthing)

    @property
    def stuff(self) -> Tuple[SemanticCategory, ...]:
        return tuple(c for c in self.categories if not c.isthing)

    def palette(self) -> np.ndarray:
        """(N, 3) uint8 array of category colors in index order."""
        return np.array([c.color for c in self.categories], dtype=np.uint8).reshape(-1, 3)

    def require_panoptic(self) -> None:
        """Check the taxonomy can drive a panoptic export."""
        if not self.things or not self.stuff:
            raise TaxonomyError("panoptic export needs at least one thing and one stuff category")


def _parse_int(value: str, lineno: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise TaxonomyError(f"line {lineno}: expected an integer, got {value!r}") from None


def loads(document: str) -> Taxonomy:
    """Parse a taxonomy document from a string."""
    categories = []
    reader = csv.reader(io.StringIO(document))
    for lineno, row in enumerate(reader, start=1):
        row = [cell.strip() for cell in row]
        if not row or not any(row) or row[0].startswith("#"):
            continue
        if [cell.lower() for cell in row] == _HEADER:
            continue
        if len(row) != 5:
            raise TaxonomyError(f"line {lineno}: expected 5 fields (name,r,g,b,kind), got {len(row)}")
        name, r, g, b, kind = row
        if not name:
            raise TaxonomyError(f"line {lineno}: empty category name")
        color = tuple(_parse_int(v, lineno) for v in (r, g, b))
        categories.append(SemanticCategory(len(categories), name, color, kind.lower()))
    return Taxonomy(tuple(categories))


def load_taxonomy(source: Union[str, Path, io.TextIOBase]) -> Taxonomy:
    """Load and validate a taxonomy.

    Args:
      source: a path to a taxonomy document, or an open text stream.

    Returns:
      The validated Taxonomy, indices assigned by document order.

    Raises:
      TaxonomyError: on duplicate colors or names, a black color, an unknown
        kind or a malformed record.
    """
    if hasattr(source, "read"):
        return loads(source.read())
    return loads(Path(source).read_text(encoding="utf-8"))


def dumps(taxonomy: Taxonomy) -> str:
    """Serialize a taxonomy; ``loads(dumps(t)) == t``."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(_HEADER)
    for cat in taxonomy:
        writer.writerow([cat.name, *cat.color, cat.kind])
    return out.getvalue()


def from_records(records: Iterable[Sequence]) -> Taxonomy:
    """Build a taxonomy from ``(name, (r, g, b), kind)`` tuples."""
    return Taxonomy(tuple(
        SemanticCategory(i, name, tuple(int(c) for c in color), kind)
        for i, (name, color, kind) in enumerate(records)))


def default_taxonomy() -> Taxonomy:
    """The bundled 35-category worksite palette."""
    text = resources.files("synthpan").joinpath("data/worksite35.txt").read_text(encoding="utf-8")
    return loads(text)


def color_to_category(taxonomy: Taxonomy, color: Sequence[int]) -> int:
    """Exact-match lookup; black and off-palette colors give ``UNLABELED``."""
    cat = taxonomy._by_color.get(tuple(int(c) for c in color))
    return UNLABELED if cat is None else cat.index


def pack_rgb(image: np.ndarray) -> np.ndarray:
    """Pack an (..., 3) uint8 RGB array into int32 keys ``r + g*256 + b*65536``."""
    image = np.asarray(image)
    return (image[..., 0].astype(np.int32)
            + image[..., 1].astype(np.int32) * 256
            + image[..., 2].astype(np.int32) * 65536)


def image_to_categories(taxonomy: Taxonomy, image: np.ndarray) -> np.ndarray:
    """Vectorized color_to_category over an (H, W, 3) image.

    Returns an int32 (H, W) array holding category indices, ``UNLABELED``
    for black and off-palette pixels.
    """
    keys = pack_rgb(image)
    palette_keys = pack_rgb(taxonomy.palette())
    if palette_keys.size == 0:
        return np.full(keys.shape, UNLABELED, dtype=np.int32)
    order = np.argsort(palette_keys)
    sorted_keys = palette_keys[order]
    pos = np.clip(np.searchsorted(sorted_keys, keys), 0, len(sorted_keys) - 1)
    hit = sorted_keys[pos] == keys
    return np.where(hit, order[pos], UNLABELED).astype(np.int32)


def categories_to_image(taxonomy: Taxonomy, categories: np.ndarray) -> np.ndarray:
    """Inverse of :func:`image_to_categories`: paint indices with palette colors."""
    lut = np.concatenate([taxonomy.palette(), np.zeros((1, 3), np.uint8)])
    idx = np.where(categories < 0, len(taxonomy), categories)
    return lut[idx]
