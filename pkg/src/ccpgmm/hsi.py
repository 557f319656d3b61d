"""Hyperspectral image containers, pixel tables and constraint documents.

An image is a ``rows x cols x bands`` reflectance tensor.  Several images
sharing the same band count are stacked into one ``N x p`` pixel table,
scanning every image row-major; ``PixelTable.geometry`` maps table rows
back to ``(image, row, col)``.

On disk an image is a JSON header plus a raw little-endian payload::

    {"id": "wheat1", "rows": 67, "cols": 53, "bands": 101,
     "dtype": "f64", "order": "row-major, band-fastest",
     "payload": "wheat1.bin"}

Small fixtures may instead use a band-major CSV file whose first line is a
``# id=<id> rows=<R> cols=<C> bands=<P>`` comment followed by one line per
band holding the ``R*C`` pixel values of that band in row-major order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConstraintError,
    DimensionMismatchError,
    LoadError,
    NonFiniteValueError,
    UnreadableFileError,
    ValidationError,
)

RAW_FORMAT = "raw-f64+json-header"
CSV_FORMAT = "csv-band-major"
ORDER = "row-major, band-fastest"

_DTYPES = {"f64": "<f8", "f32": "<f4", "u16": "<u2"}


@dataclass(frozen=True)
class ImageTensor:
    id: str
    values: np.ndarray  # (rows, cols, bands)

    def __post_init__(self):
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise DimensionMismatchError(
                f"image {self.id!r}: expected a non-empty rows x cols x bands array, "
                f"got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteValueError(f"image {self.id!r} contains NaN or Inf")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ImageGeometry:
    id: str
    rows: int
    cols: int
    offset: int

    @property
    def size(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class PixelTable:
    """Pixels of one or more images stacked into an ``N x p`` matrix."""

    data: np.ndarray
    geometry: tuple[ImageGeometry, ...]

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValidationError("pixel table data must be two-dimensional")
        expected = 0
        for geo in self.geometry:
            if geo.offset != expected:
                raise ValidationError("geometry offsets must be contiguous")
            expected += geo.size
        if expected != self.data.shape[0]:
            raise ValidationError(
                f"geometry covers {expected} pixels but the table has {self.data.shape[0]}"
            )

    @classmethod
    def from_array(cls, data, image_id: str = "table") -> "PixelTable":
        """Wrap a bare matrix as a single ``N x 1`` image."""
        data = np.ascontiguousarray(data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        return cls(data, (ImageGeometry(image_id, data.shape[0], 1, 0),))

    @property
    def n_pixels(self) -> int:
        return self.data.shape[0]

    @property
    def n_vars(self) -> int:
        return self.data.shape[1]

    @property
    def image_ids(self) -> list[str]:
        return [g.id for g in self.geometry]

    def image(self, image_id: str) -> ImageGeometry:
        for geo in self.geometry:
            if geo.id == image_id:
                return geo
        raise KeyError(image_id)

    def index(self, image_id: str, row: int, col: int) -> int:
        geo = self.image(image_id)
        if not (0 <= row < geo.rows and 0 <= col < geo.cols):
            raise IndexError(f"({row}, {col}) outside image {image_id!r}")
        return geo.offset + row * geo.cols + col

    def locate(self, index: int) -> tuple[str, int, int]:
        for geo in self.geometry:
            if geo.offset <= index < geo.offset + geo.size:
                r, c = divmod(index - geo.offset, geo.cols)
                return geo.id, r, c
        raise IndexError(index)

    def split(self, values=None) -> dict[str, np.ndarray]:
        """Reshape per-pixel values (default: the data) back onto each image."""
        values = self.data if values is None else np.asarray(values)
        out = {}
        for geo in self.geometry:
            chunk = values[geo.offset : geo.offset + geo.size]
            out[geo.id] = chunk.reshape((geo.rows, geo.cols) + chunk.shape[1:])
        return out

    def to_images(self) -> list[ImageTensor]:
        return [ImageTensor(k, v) for k, v in self.split().items()]

    def select_columns(self, columns) -> "PixelTable":
        return PixelTable(np.ascontiguousarray(self.data[:, columns]), self.geometry)


@dataclass(frozen=True)
class ConstraintSet:
    """Positive blocks of pixels plus a negative relation between blocks.

    ``blocks[k]`` holds sorted global pixel indices that must share one
    mixture component; ``relation[a, b]`` is true when blocks ``a`` and
    ``b`` must not share a component.
    """

    blocks: tuple[np.ndarray, ...] = ()
    relation: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))
    names: tuple[str, ...] = ()

    def __post_init__(self):
        k = len(self.blocks)
        rel = np.asarray(self.relation, dtype=bool)
        if rel.shape != (k, k):
            raise ConstraintError(f"relation must be {k}x{k}, got {rel.shape}")
        if np.any(np.diag(rel)):
            raise ConstraintError("a block cannot be negatively related to itself")
        if not np.array_equal(rel, rel.T):
            raise ConstraintError("relation must be symmetric")
        seen = set()
        for i, b in enumerate(self.blocks):
            if len(b) == 0:
                raise ConstraintError(f"block {i} is empty")
            members = set(int(x) for x in b)
            if members & seen:
                raise ConstraintError("blocks overlap")
            seen |= members
        object.__setattr__(self, "relation", rel)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"block{i}" for i in range(k)))

    @classmethod
    def empty(cls) -> "ConstraintSet":
        return cls()

    @classmethod
    def from_blocks(cls, blocks: Sequence[Iterable[int]], negative_pairs=None, names=()):
        """Blocks as index lists; all pairs negative unless ``negative_pairs`` given."""
        blocks = tuple(np.array(sorted(set(int(i) for i in b)), dtype=np.int64) for b in blocks)
        k = len(blocks)
        if negative_pairs is None:
            rel = ~np.eye(k, dtype=bool)
        else:
            rel = np.zeros((k, k), dtype=bool)
            for a, b in negative_pairs:
                rel[a, b] = rel[b, a] = True
        return cls(blocks, rel, tuple(names))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def has_negative(self) -> bool:
        return bool(self.relation.any())

    def constrained_mask(self, n_pixels: int) -> np.ndarray:
        mask = np.zeros(n_pixels, dtype=bool)
        for b in self.blocks:
            mask[b] = True
        return mask

    def check(self, n_pixels: int) -> None:
        for i, b in enumerate(self.blocks):
            if b.min() < 0 or b.max() >= n_pixels:
                raise ConstraintError(f"block {i} references pixels outside [0, {n_pixels})")

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "blocks": [b.tolist() for b in self.blocks],
            "negative_pairs": [
                [int(a), int(b)] for a, b in zip(*np.nonzero(np.triu(self.relation)))
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ConstraintSet":
        return cls.from_blocks(doc["blocks"], doc["negative_pairs"], doc.get("names", ()))


# ---------------------------------------------------------------- file I/O


def _read_header(path: Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UnreadableFileError(f"cannot read header {path}: {exc}") from exc


def _read_container(path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    header = _read_header(path)
    try:
        rows, cols, bands = int(header["rows"]), int(header["cols"]), int(header["bands"])
        dtype = _DTYPES[header.get("dtype", "f64")]
    except (KeyError, ValueError, TypeError) as exc:
        raise UnreadableFileError(f"malformed header {path}: {exc!r}") from exc
    payload = path.parent / header.get("payload", path.with_suffix(".bin").name)
    try:
        raw = np.fromfile(payload, dtype=dtype)
    except OSError as exc:
        raise UnreadableFileError(f"cannot read payload {payload}: {exc}") from exc
    if raw.size != rows * cols * bands:
        raise DimensionMismatchError(
            f"{payload}: header says {rows}x{cols}x{bands} = {rows * cols * bands} "
            f"values, payload holds {raw.size}"
        )
    return header, raw.reshape(rows, cols, bands)


def _write_container(path, image_id: str, array: np.ndarray, dtype: str) -> Path:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    if array.ndim == 2:
        array = array[:, :, None]
    payload = path.with_suffix(".bin")
    header = {
        "id": image_id,
        "rows": int(array.shape[0]),
        "cols": int(array.shape[1]),
        "bands": int(array.shape[2]),
        "dtype": dtype,
        "order": ORDER,
        "payload": payload.name,
    }
    np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tofile(payload)
    with open(path, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_csv(path: Path) -> ImageTensor:
    try:
        with open(path) as fh:
            first = fh.readline().strip()
            body = fh.read()
    except OSError as exc:
        raise UnreadableFileError(f"cannot read {path}: {exc}") from exc
    if not first.startswith("#"):
        raise UnreadableFileError(f"{path}: missing '# id=.. rows=.. cols=.. bands=..' line")
    meta = dict(tok.split("=", 1) for tok in first[1:].split())
    try:
        rows, cols, bands = int(meta["rows"]), int(meta["cols"]), int(meta["bands"])
    except (KeyError, ValueError) as exc:
        raise UnreadableFileError(f"{path}: malformed dimension line") from exc
    try:
        values = np.array(
            [float(v) for v in body.replace("\n", ",").split(",") if v.strip()], dtype=float
        )
    except ValueError as exc:
        raise UnreadableFileError(f"{path}: non-numeric value ({exc})") from exc
    if values.size != rows * cols * bands:
        raise DimensionMismatchError(
            f"{path}: header says {rows}x{cols}x{bands}, payload holds {values.size} values"
        )
    # band-major on disk -> (rows, cols, bands)
    cube = values.reshape(bands, rows, cols).transpose(1, 2, 0)
    return ImageTensor(meta.get("id", path.stem), np.ascontiguousarray(cube))


def load_image(path, format: str | None = None) -> ImageTensor:
    """Load one image; the format is inferred from the suffix when not given."""
    path = Path(path)
    if format is None:
        format = CSV_FORMAT if path.suffix == ".csv" else RAW_FORMAT
    if format == CSV_FORMAT:
        return _load_csv(path)
    if format != RAW_FORMAT:
        raise ValidationError(f"unknown image format {format!r}")
    header, cube = _read_container(path)
    if header.get("dtype", "f64") != "f64":
        raise UnreadableFileError(f"{path}: images must be stored as f64")
    return ImageTensor(str(header.get("id", Path(path).stem)), cube.astype(float))


def save_image(image: ImageTensor, path, format: str = RAW_FORMAT) -> Path:
    path = Path(path)
    if format == CSV_FORMAT:
        path = path.with_suffix(".csv")
        path.parent.mkdir(parents=True, exist_ok=True)
        band_major = image.values.transpose(2, 0, 1).reshape(image.bands, -1)
        with open(path, "w") as fh:
            fh.write(f"# id={image.id} rows={image.rows} cols={image.cols} bands={image.bands}\n")
            for band in band_major:
                fh.write(",".join(repr(float(v)) for v in band) + "\n")
        return path
    return _write_container(path, image.id, image.values, "f64")


def save_raster(path, image_id: str, raster: np.ndarray, dtype: str) -> Path:
    """Write a 2-D per-pixel map (``u16`` labels or ``f64`` uncertainty)."""
    return _write_container(path, image_id, np.asarray(raster), dtype)


def load_raster(path) -> tuple[str, np.ndarray]:
    header, cube = _read_container(path)
    return str(header.get("id", Path(path).stem)), cube[:, :, 0]


def write_manifest(directory, image_ids: Sequence[str]) -> None:
    with open(Path(directory) / "manifest.json", "w") as fh:
        json.dump({"images": list(image_ids)}, fh, indent=2)
        fh.write("\n")


def load_image_dir(directory) -> list[ImageTensor]:
    """Load every image in a directory, in manifest order when one exists."""
    directory = Path(directory)
    if not directory.is_dir():
        raise UnreadableFileError(f"{directory} is not a directory")
    manifest = directory / "manifest.json"
    if manifest.exists():
        ids = _read_header(manifest)["images"]
        paths = [directory / f"{i}.json" for i in ids]
    else:
        paths = sorted(
            p for p in directory.iterdir()
            if (p.suffix == ".json" and p.name != "manifest.json") or p.suffix == ".csv"
        )
    if not paths:
        raise UnreadableFileError(f"no images found in {directory}")
    return [load_image(p) for p in paths]


# ------------------------------------------------------------ table building


def flatten_images(images: Sequence[ImageTensor]) -> PixelTable:
    if not images:
        raise ValidationError("need at least one image")
    bands = {im.bands for im in images}
    if len(bands) != 1:
        raise DimensionMismatchError(f"images disagree on band count: {sorted(bands)}")
    ids = [im.id for im in images]
    if len(set(ids)) != len(ids):
        raise ValidationError("image ids must be unique")
    geometry, offset = [], 0
    for im in images:
        geometry.append(ImageGeometry(im.id, im.rows, im.cols, offset))
        offset += im.rows * im.cols
    data = np.concatenate([im.values.reshape(-1, im.bands) for im in images], axis=0)
    return PixelTable(np.ascontiguousarray(data, dtype=float), tuple(geometry))


def greyscale(image: ImageTensor) -> np.ndarray:
    """Per-pixel mean reflectance over the bands."""
    return image.values.mean(axis=2)


def build_constraints(doc, table: PixelTable) -> ConstraintSet:
    """Turn a constraint document into blocks of global pixel indices.

    ``doc`` is a mapping (or a path to a JSON file) of the form::

        {"groups": [{"name": "background",
                     "regions": [{"image": "w1", "row0": 0, "row1": 4,
                                  "col0": 0, "col1": 9}]}, ...],
         "negative_pairs": [["background", "wheat"], ...]}   # optional

    Row and column ranges are inclusive.  Without ``negative_pairs`` every
    pair of groups is negatively related.
    """
    if isinstance(doc, (str, os.PathLike)):
        doc = _read_header(Path(doc))
    groups = doc.get("groups", [])
    names, blocks, owner = [], [], {}
    for gi, group in enumerate(groups):
        name = str(group.get("name", f"group{gi}"))
        if name in names:
            raise ConstraintError(f"duplicate group name {name!r}")
        members: list[np.ndarray] = []
        for reg in group.get("regions", []):
            image_id = reg["image"]
            try:
                geo = table.image(image_id)
            except KeyError:
                raise ConstraintError(f"group {name!r}: unknown image {image_id!r}") from None
            r0, r1, c0, c1 = (int(reg[k]) for k in ("row0", "row1", "col0", "col1"))
            if not (0 <= r0 <= r1 < geo.rows and 0 <= c0 <= c1 < geo.cols):
                raise ConstraintError(
                    f"group {name!r}: rectangle rows {r0}-{r1}, cols {c0}-{c1} "
                    f"outside {geo.rows}x{geo.cols} image {image_id!r}"
                )
            rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
            members.append((geo.offset + rr * geo.cols + cc).ravel())
        idx = np.unique(np.concatenate(members)) if members else np.zeros(0, dtype=np.int64)
        if idx.size == 0:
            raise ConstraintError(f"group {name!r} selects no pixels")
        for i in idx.tolist():
            if i in owner:
                raise ConstraintError(f"groups {owner[i]!r} and {name!r} overlap")
            owner[i] = name
        names.append(name)
        blocks.append(idx.astype(np.int64))

    k = len(blocks)
    if "negative_pairs" in doc:
        pos = {n: i for i, n in enumerate(names)}
        rel = np.zeros((k, k), dtype=bool)
        for a, b in doc["negative_pairs"]:
            if a not in pos or b not in pos:
                raise ConstraintError(f"negative pair ({a!r}, {b!r}) names an unknown group")
            if a == b:
                raise ConstraintError(f"group {a!r} cannot be negative with itself")
            rel[pos[a], pos[b]] = rel[pos[b], pos[a]] = True
    else:
        rel = ~np.eye(k, dtype=bool)
    return ConstraintSet(tuple(blocks), rel, tuple(names))


def constraint_document(rectangles: Mapping[str, Sequence[tuple]], negative_pairs=None) -> dict:
    """Build a constraint document from ``{group: [(image, r0, r1, c0, c1), ...]}``."""
    doc = {
        "groups": [
            {
                "name": name,
                "regions": [
                    {"image": im, "row0": r0, "row1": r1, "col0": c0, "col1": c1}
                    for im, r0, r1, c0, c1 in rects
                ],
            }
            for name, rects in rectangles.items()
        ]
    }
    if negative_pairs is not None:
        doc["negative_pairs"] = [list(p) for p in negative_pairs]
    return doc


def read_json(path) -> dict:
    return _read_header(Path(path))


__all__ = [
    "CSV_FORMAT",
    "RAW_FORMAT",
    "ConstraintSet",
    "ImageGeometry",
    "ImageTensor",
    "LoadError",
    "PixelTable",
    "build_constraints",
    "constraint_document",
    "flatten_images",
    "greyscale",
    "load_image",
    "load_image_dir",
    "load_raster",
    "save_image",
    "save_raster",
    "write_manifest",
]
