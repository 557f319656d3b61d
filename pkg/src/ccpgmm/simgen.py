"""Simulated hyperspectral datasets with known pixel labels.

Class ``1`` is background and classes ``2, 3, 4`` are grains.  Each image
is a background with one or more elliptical grain regions; every pixel
is drawn from its class's factor model ``x = mu + Lambda u + e``.
Constraint blocks are emitted as rectangles inside single class regions,
one group per class, all pairs negatively related.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConstraintError, ValidationError
from .hsi import (
    ImageTensor,
    PixelTable,
    build_constraints,
    constraint_document,
    flatten_images,
    save_image,
    save_raster,
    write_manifest,
)
from .pgmm import PSI_FLOOR, MixtureModel

BACKGROUND, WHEAT, CORN, RICE = 1, 2, 3, 4
CLASS_NAMES = {BACKGROUND: "background", WHEAT: "wheat", CORN: "corn", RICE: "rice"}
GROUP_COLOURS = {BACKGROUND: "blue", WHEAT: "yellow", CORN: "green", RICE: "red"}

# mean-location values and the variance of mu_g around them
SCENARIOS = {
    "low": ((-5.0, 0.0, 5.0, 10.0), 0.5),
    "mild": ((-2.5, 0.0, 2.5, 5.0), 1.0),
    "high": ((-1.25, 0.0, 1.25, 2.5), 1.5),
}

# (id, rows, cols, grain class) at full size
SCENARIO_IMAGES = (("wheat1", 67, 53, WHEAT), ("corn1", 61, 34, CORN), ("rice3", 50, 44, RICE))
SCENARIO_COUNTS = {BACKGROUND: 1356, WHEAT: 750, CORN: 450, RICE: 400}

CEREAL_IMAGES = (
    ("wheat1", 67, 53, WHEAT),
    ("wheat2", 62, 64, WHEAT),
    ("wheat3", 65, 55, WHEAT),
    ("corn1", 61, 34, CORN),
    ("corn2", 39, 69, CORN),
    ("corn3", 56, 54, CORN),
    ("rice1", 56, 49, RICE),
    ("rice2", 78, 54, RICE),
    ("rice3", 50, 44, RICE),
)
CEREAL_PRESETS = {
    "large": {BACKGROUND: 5900, WHEAT: 3130, CORN: 1535, RICE: 1650},
    "small": {BACKGROUND: 3801, WHEAT: 1540, CORN: 783, RICE: 827},
}
HELDOUT_SHAPE = (241, 181)

SCALES = {"paper": 1.0, "desk": 0.5, "quarter": 0.5}
ELLIPSE_AXIS = 0.42


# ----------------------------------------------------------------- layout


@dataclass(frozen=True)
class Ellipse:
    """Region in fractional image coordinates (centre and semi-axes)."""

    class_id: int
    center: tuple[float, float] = (0.5, 0.5)
    axes: tuple[float, float] = (ELLIPSE_AXIS, ELLIPSE_AXIS)


@dataclass(frozen=True)
class ImageMask:
    id: str
    rows: int
    cols: int
    ellipses: tuple[Ellipse, ...]
    background: int = BACKGROUND

    def labels(self) -> np.ndarray:
        """Class raster; a pixel belongs to an ellipse when its centre is inside."""
        r = (np.arange(self.rows) + 0.5) / self.rows
        c = (np.arange(self.cols) + 0.5) / self.cols
        out = np.full((self.rows, self.cols), self.background, dtype=np.int64)
        for e in self.ellipses:
            inside = ((r[:, None] - e.center[0]) / e.axes[0]) ** 2 + (
                (c[None, :] - e.center[1]) / e.axes[1]
            ) ** 2 <= 1.0
            out[inside] = e.class_id
        return out


@dataclass(frozen=True)
class MaskSpec:
    """Images plus constraint rectangles ``{class_id: [(image, r0, r1, c0, c1), ...]}``."""

    images: tuple[ImageMask, ...]
    rectangles: Mapping[int, Sequence[tuple]] = field(default_factory=dict)

    @property
    def n_pixels(self) -> int:
        return sum(m.rows * m.cols for m in self.images)

    def check(self) -> None:
        by_id = {m.id: m.labels() for m in self.images}
        for cls, rects in self.rectangles.items():
            for im, r0, r1, c0, c1 in rects:
                if im not in by_id:
                    raise ConstraintError(f"rectangle on unknown image {im!r}")
                lab = by_id[im]
                if not (0 <= r0 <= r1 < lab.shape[0] and 0 <= c0 <= c1 < lab.shape[1]):
                    raise ConstraintError(f"rectangle {(im, r0, r1, c0, c1)} out of bounds")
                if np.any(lab[r0 : r1 + 1, c0 : c1 + 1] != cls):
                    raise ConstraintError(
                        f"rectangle {(im, r0, r1, c0, c1)} crosses the boundary of class {cls}"
                    )

    def constraint_document(self) -> dict:
        rects = {
            CLASS_NAMES.get(cls, f"class{cls}"): [tuple(r) for r in rs]
            for cls, rs in sorted(self.rectangles.items())
            if rs
        }
        return constraint_document(rects)


def scaled(n: int, factor: float) -> int:
    return max(1, int(math.floor(n * factor + 0.5)))


def _largest_remainder(total: int, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    raw = total * w / w.sum()
    out = np.floor(raw).astype(int)
    short = total - out.sum()
    order = np.lexsort((np.arange(w.size), -(raw - out)))
    out[order[:short]] += 1
    return out


def _row_runs(image_id: str, cells: np.ndarray) -> list[tuple]:
    """Compress ``(r, c)`` cells into one-row rectangles of consecutive columns."""
    out = []
    cells = cells[np.lexsort((cells[:, 1], cells[:, 0]))]
    start = 0
    for k in range(1, len(cells) + 1):
        if k == len(cells) or cells[k, 0] != cells[k - 1, 0] or cells[k, 1] != cells[k - 1, 1] + 1:
            r = int(cells[start, 0])
            out.append((image_id, r, r, int(cells[start, 1]), int(cells[k - 1, 1])))
            start = k
    return out


def _pick_cells(mask: ImageMask, lab: np.ndarray, cls: int, n: int) -> np.ndarray:
    """``n`` pixels of class ``cls``: border rings for background, centre-out for grains."""
    rr, cc = np.nonzero(lab == cls)
    if n > rr.size:
        raise ConstraintError(
            f"image {mask.id!r} has {rr.size} pixels of class {cls}, {n} constraints requested"
        )
    if cls == mask.background:
        key = np.minimum.reduce([rr, mask.rows - 1 - rr, cc, mask.cols - 1 - cc]).astype(float)
    else:
        cr, ccen = (mask.rows - 1) / 2.0, (mask.cols - 1) / 2.0
        key = np.maximum(np.abs(rr - cr) / mask.rows, np.abs(cc - ccen) / mask.cols)
    order = np.lexsort((cc, rr, key))[:n]
    return np.stack([rr[order], cc[order]], axis=1)


def constraint_rectangles(images: Sequence[ImageMask], counts: Mapping[int, int]) -> dict:
    """Rectangles selecting exactly ``counts[cls]`` pixels of each class.

    A class's quota is split over the images holding it in proportion to
    the class area of each image.
    """
    labs = [m.labels() for m in images]
    rects: dict[int, list] = {}
    for cls, total in counts.items():
        areas = np.array([(lab == cls).sum() for lab in labs])
        if areas.sum() < total:
            raise ConstraintError(f"only {areas.sum()} pixels of class {cls}, {total} requested")
        quota = _largest_remainder(total, areas) if total else np.zeros(len(images), dtype=int)
        rs = []
        for m, lab, n in zip(images, labs, quota):
            if n:
                rs.extend(_row_runs(m.id, _pick_cells(m, lab, cls, int(n))))
        rects[cls] = rs
    return rects


def scenario_layout(scale: str = "desk", counts: Mapping[int, int] | None = None) -> MaskSpec:
    """Three single-grain images with the scenario constraint mix."""
    f = SCALES[scale]
    images = tuple(
        ImageMask(i, scaled(r, f), scaled(c, f), (Ellipse(cls),)) for i, r, c, cls in SCENARIO_IMAGES
    )
    return _with_counts(images, counts or SCENARIO_COUNTS, sum(r * c for _, r, c, _ in SCENARIO_IMAGES))


def cereal_layout(scale: str = "desk", preset: str = "large") -> MaskSpec:
    """Nine single-grain images with one of the two cereal constraint presets."""
    if preset not in CEREAL_PRESETS:
        raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(CEREAL_PRESETS)}")
    f = SCALES[scale]
    images = tuple(
        ImageMask(i, scaled(r, f), scaled(c, f), (Ellipse(cls),)) for i, r, c, cls in CEREAL_IMAGES
    )
    return _with_counts(images, CEREAL_PRESETS[preset], sum(r * c for _, r, c, _ in CEREAL_IMAGES))


def _with_counts(images, counts, n_full) -> MaskSpec:
    n = sum(m.rows * m.cols for m in images)
    if n != n_full:
        counts = dict(zip(counts, _scaled_counts(counts, n / n_full)))
    return MaskSpec(images, constraint_rectangles(images, counts))


def _scaled_counts(counts: Mapping[int, int], ratio: float) -> list[int]:
    total = int(round(sum(counts.values()) * ratio))
    return _largest_remainder(total, list(counts.values())).tolist()


def heldout_layout(scale: str = "desk", image_id: str = "mixture") -> MaskSpec:
    """One image with a 3x3 grid of grains, each grain class three times."""
    f = SCALES[scale]
    rows, cols = scaled(HELDOUT_SHAPE[0], f), scaled(HELDOUT_SHAPE[1], f)
    order = (WHEAT, CORN, RICE, CORN, RICE, WHEAT, RICE, WHEAT, CORN)
    ellipses = tuple(
        Ellipse(cls, ((k // 3 + 0.5) / 3, (k % 3 + 0.5) / 3), (0.14, 0.14)) for k, cls in enumerate(order)
    )
    return MaskSpec((ImageMask(image_id, rows, cols, ellipses),))


# ------------------------------------------------------------ parameters


def gen_component_params(
    G: int, p: int, q: int, a_values, mean_var: float, seed, psi_floor: float = PSI_FLOOR, block: int = 5
) -> MixtureModel:
    """Random factor-analyzer components with block-correlated loadings.

    Parameters
    ----------
    a_values : sequence of float
        Mean location of each component; ``mu_g`` has i.i.d. coordinates
        ``N(a_g, mean_var)``.
    mean_var : float
        Variance of the mean coordinates.
    block : int
        Loading rows of ``block`` consecutive variables share one centre
        vector with ``q`` coordinates drawn from ``U(0.3, 0.9)``; each row is
        ``N_q(centre, 0.03 I)``.  A trailing short block takes the remainder.

    Returns
    -------
    MixtureModel
        Equal mixing weights.
    """
    a = np.asarray(a_values, dtype=float)
    if a.shape != (G,):
        raise ValidationError(f"need {G} mean locations, got {a.size}")
    if not (G >= 1 and 1 <= q < p):
        raise ValidationError(f"invalid dimensions G={G}, p={p}, q={q}")
    if not mean_var > 0:
        raise ValidationError("mean variance must be positive")
    rng = np.random.default_rng(seed)
    mu = np.empty((G, p))
    lam = np.empty((G, p, q))
    psi = np.empty((G, p))
    starts = np.arange(0, p, block)
    for g in range(G):
        mu[g] = rng.normal(a[g], math.sqrt(mean_var), size=p)
        for s in starts:
            e = min(s + block, p)
            centre = rng.uniform(0.3, 0.9, size=q)
            lam[g, s:e] = rng.normal(centre, math.sqrt(0.03), size=(e - s, q))
        shape = rng.uniform(0.0, 0.1, size=p)
        psi[g] = np.maximum(rng.gamma(shape, 1.0), psi_floor)
    return MixtureModel(np.full(G, 1.0 / G), mu, lam, psi)


def _nir_axis(p: int = 101) -> np.ndarray:
    return np.linspace(880.0, 1720.0, p)


def _bump(w, centre, width):
    return np.exp(-0.5 * ((w - centre) / width) ** 2)


# latent (brightness, band depth) positions and spreads of each class
_CEREAL_LATENT = {
    BACKGROUND: ((0.08, 0.00), (0.010, 0.004)),
    WHEAT: ((0.46, 0.11), (0.020, 0.016)),
    CORN: ((0.52, 0.17), (0.020, 0.016)),
    RICE: ((0.41, 0.19), (0.020, 0.016)),
}


def reference_cereal_params(p: int = 101, psi: float = 1e-5) -> MixtureModel:
    """Hand-built NIR-like class models for the synthetic cereal data (q = 2).

    Every class spectrum is ``b * shape(w) - t * bands(w)``: ``shape`` is a
    gently sloping baseline, ``bands`` two absorption features near 1200
    and 1450 nm.  The two factors perturb brightness ``b`` and depth ``t``,
    so classes overlap mildly in that plane.
    """
    w = _nir_axis(p)
    shape = 1.0 + 0.15 * (w - w[0]) / (w[-1] - w[0])
    bands = 0.6 * _bump(w, 1200.0, 45.0) + _bump(w, 1450.0, 70.0)
    classes = sorted(_CEREAL_LATENT)
    mu = np.empty((4, p))
    lam = np.empty((4, p, 2))
    for g, cls in enumerate(classes):
        (b, t), (sb, st) = _CEREAL_LATENT[cls]
        mu[g] = b * shape - t * bands
        lam[g, :, 0] = sb * shape
        lam[g, :, 1] = -st * bands
    return MixtureModel(np.full(4, 0.25), mu, lam, np.full((4, p), psi))


# --------------------------------------------------------------- datasets


@dataclass
class SimDataset:
    table: PixelTable
    labels: np.ndarray
    constraints: object  # ConstraintSet
    constraint_doc: dict
    params: MixtureModel
    layout: MaskSpec
    presets: dict = field(default_factory=dict)  # name -> constraint document

    @property
    def n_pixels(self) -> int:
        return self.table.n_pixels


def _seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _draw_images(layout: MaskSpec, params: MixtureModel, seed) -> tuple[list[ImageTensor], np.ndarray]:
    G, p, q = params.G, params.p, params.q
    children = _seq(seed).spawn(len(layout.images))
    images, labels = [], []
    for mask, child in zip(layout.images, children):
        rng = np.random.default_rng(child)
        lab = mask.labels().ravel()
        if lab.max() > G or lab.min() < 1:
            raise ValidationError(f"mask of {mask.id!r} uses classes outside 1..{G}")
        u = rng.standard_normal((lab.size, q))
        e = rng.standard_normal((lab.size, p))
        k = lab - 1
        x = params.mu[k] + np.einsum("npq,nq->np", params.lam[k], u) + e * np.sqrt(params.psi[k])
        images.append(ImageTensor(mask.id, x.reshape(mask.rows, mask.cols, p)))
        labels.append(lab)
    return images, np.concatenate(labels)


def _dataset(layout: MaskSpec, params: MixtureModel, seed, presets=None) -> SimDataset:
    layout.check()
    images, labels = _draw_images(layout, params, seed)
    table = flatten_images(images)
    doc = layout.constraint_document()
    cons = build_constraints(doc, table)
    return SimDataset(table, labels, cons, doc, params, layout, presets or {})


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str
    a_values: tuple[float, ...]
    mean_var: float
    q: int
    p: int
    seed: int
    layout: MaskSpec


def scenario_spec(scenario: str, seed: int = 0, scale: str = "desk", p: int = 101, q: int = 3) -> "ScenarioSpec":
    if scenario not in SCENARIOS:
        raise ValidationError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
    a, var = SCENARIOS[scenario]
    return ScenarioSpec(scenario, a, var, q, p, seed, scenario_layout(scale))


def gen_scenario(spec: ScenarioSpec) -> SimDataset:
    """Dataset for one overlap scenario; parameters and pixels follow ``spec.seed``."""
    params_seed, pixel_seed = _seq(spec.seed).spawn(2)
    G = len(spec.a_values)
    params = gen_component_params(G, spec.p, spec.q, spec.a_values, spec.mean_var, params_seed)
    return _dataset(spec.layout, params, pixel_seed)


def gen_synthetic_cereal(
    params: MixtureModel | None = None, scale: str = "desk", preset: str = "large", seed: int = 0
) -> SimDataset:
    """Nine-image cereal analogue; ``presets`` holds both constraint documents."""
    params = reference_cereal_params() if params is None else params
    if params.q != 2 or params.G != 4:
        raise ValidationError("cereal class models must have G = 4 and q = 2")
    layouts = {name: cereal_layout(scale, name) for name in CEREAL_PRESETS}
    presets = {name: lay.constraint_document() for name, lay in layouts.items()}
    return _dataset(layouts[preset], params, seed, presets)


def gen_heldout(params: MixtureModel | None = None, scale: str = "desk", seed: int = 0) -> SimDataset:
    """A single multi-grain image without constraints."""
    params = reference_cereal_params() if params is None else params
    return _dataset(heldout_layout(scale), params, seed)


def write_dataset(ds: SimDataset, directory) -> dict[str, Path]:
    """Images (with manifest), truth rasters and constraint documents."""
    directory = Path(directory)
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for im in ds.table.to_images():
        save_image(im, img_dir / f"{im.id}.json")
    write_manifest(img_dir, ds.table.image_ids)
    truth = ds.table.split(ds.labels)
    for image_id, raster in truth.items():
        save_raster(directory / "truth" / f"{image_id}.labels.json", image_id, raster, "u16")
    out = {"images": img_dir, "truth": directory / "truth"}
    docs = {"constraints": ds.constraint_doc}
    docs.update({f"constraints_{k}": v for k, v in ds.presets.items()})
    for name, doc in docs.items():
        if not doc.get("groups"):
            continue
        path = directory / f"{name}.json"
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        out[name] = path
    return out
