from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .schemas.core import PatchSpec


class DensityError(RuntimeError):
    pass


class StitchError(DensityError):
    pass


# (n, 2) array of (x, y) pixel coordinates; pixel (r, c) spans [c, c+1) x [r, r+1)
HeadPoints = np.ndarray
Placement = Tuple[int, int]  # (top, left)


@dataclass
class DensityMap:
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) <= 0:
            raise DensityError(f"density map needs positive 2-D extents, got {list(self.values.shape)}")
        if (self.values < 0).any():
            raise DensityError("density map has negative cells")

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def count(self) -> float:
        return float(self.values.sum())


def as_points(points: Iterable[Sequence[float]]) -> HeadPoints:
    arr = np.asarray(list(points) if not isinstance(points, np.ndarray) else points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 2))
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DensityError(f"head points must be (n, 2) (x, y) pairs, got {list(arr.shape)}")
    return arr


def check_points(points: HeadPoints, shape: Tuple[int, int]) -> None:
    h, w = shape
    for i, (x, y) in enumerate(points):
        if not (0.0 <= x < w and 0.0 <= y < h):
            raise DensityError(f"head point {i} at ({x}, {y}) lies outside the {h}x{w} image")


def make_density_map(points: Iterable[Sequence[float]], shape: Tuple[int, int], sigma: float = 2.0) -> DensityMap:
    """One unit-mass Gaussian per head, truncated at 4 sigma and renormalised inside the image."""
    if sigma <= 0:
        raise DensityError(f"sigma must be positive, got {sigma}")
    pts = as_points(points)
    h, w = int(shape[0]), int(shape[1])
    check_points(pts, (h, w))
    out = np.zeros((h, w))
    radius = 4.0 * sigma
    for x, y in pts:
        r0 = max(0, int(math.floor(y - radius - 0.5)))
        r1 = min(h, int(math.ceil(y + radius + 0.5)))
        c0 = max(0, int(math.floor(x - radius - 0.5)))
        c1 = min(w, int(math.ceil(x + radius + 0.5)))
        rows, cols = np.ogrid[r0:r1, c0:c1]
        d2 = (rows + 0.5 - y) ** 2 + (cols + 0.5 - x) ** 2
        kernel = np.where(d2 <= radius * radius, np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
        mass = kernel.sum()
        if mass > 0:
            out[r0:r1, c0:c1] += kernel / mass
        else:
            out[int(y), int(x)] += 1.0
    return DensityMap(out)


def block_sum(values: np.ndarray, factor: int = 4) -> np.ndarray:
    h, w = values.shape[-2:]
    if h % factor or w % factor:
        raise DensityError(f"map extents {h}x{w} are not divisible by {factor}")
    lead = values.shape[:-2]
    return values.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1))


def extract_patch_at(
    image: np.ndarray, gt_map: np.ndarray, top: int, left: int, spec: PatchSpec
) -> Tuple[np.ndarray, np.ndarray, float]:
    h, w = image.shape
    if top < 0 or left < 0 or top + spec.roi_h > h or left + spec.roi_w > w:
        raise DensityError(f"RoI at ({top}, {left}) of size {spec.roi_h}x{spec.roi_w} is not inside the {h}x{w} image")
    mt, ml = spec.margin
    pt, pl = top - mt, left - ml
    patch = np.zeros((spec.patch_h, spec.patch_w))
    st, sl = max(pt, 0), max(pl, 0)
    sb, sr = min(pt + spec.patch_h, h), min(pl + spec.patch_w, w)
    patch[st - pt:sb - pt, sl - pl:sr - pl] = image[st:sb, sl:sr]
    roi_gt = block_sum(gt_map[top:top + spec.roi_h, left:left + spec.roi_w])
    return patch, roi_gt, float(roi_gt.sum())


def extract_patch(
    image: np.ndarray, gt_map: np.ndarray, center: Tuple[int, int], spec: PatchSpec
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Patch (zero padded at borders), 1/4-scale RoI ground truth and RoI count.

    ``center`` is the (row, col) pixel at the RoI center.
    """
    cy, cx = int(center[0]), int(center[1])
    return extract_patch_at(image, gt_map, cy - spec.roi_h // 2, cx - spec.roi_w // 2, spec)


def roi_grid(image_shape: Tuple[int, int], spec: PatchSpec, stride: Optional[int] = None) -> List[Placement]:
    """RoI placements covering the whole image; the last row/column is snapped to the border."""
    h, w = image_shape
    stride = stride or spec.resolved_stride
    if spec.roi_h > h or spec.roi_w > w:
        raise DensityError(f"RoI {spec.roi_h}x{spec.roi_w} does not fit a {h}x{w} image")

    def axis(extent: int, roi: int) -> List[int]:
        pos = list(range(0, extent - roi + 1, stride))
        if pos[-1] != extent - roi:
            pos.append(extent - roi)
        return pos

    return [(t, l) for t in axis(h, spec.roi_h) for l in axis(w, spec.roi_w)]


def stitch_predictions(
    predictions: Sequence[Tuple[np.ndarray, Placement]], shape: Tuple[int, int]
) -> DensityMap:
    """Average overlapping RoI predictions; placements are in map cells."""
    acc = np.zeros(shape)
    hits = np.zeros(shape)
    for pred, (top, left) in predictions:
        ph, pw = pred.shape
        if top < 0 or left < 0 or top + ph > shape[0] or left + pw > shape[1]:
            raise StitchError(f"prediction of size {ph}x{pw} at ({top}, {left}) falls outside {shape[0]}x{shape[1]}")
        acc[top:top + ph, left:left + pw] += pred
        hits[top:top + ph, left:left + pw] += 1
    uncovered = np.argwhere(hits == 0)
    if len(uncovered):
        r, c = uncovered[0]
        raise StitchError(f"{len(uncovered)} cells are not covered by any RoI, first at ({r}, {c}); check the stride")
    return DensityMap(acc / hits)


def flip_augment(patch: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.flip(patch, axis=-1).copy(), np.flip(gt, axis=-1).copy()


class SceneLike(Protocol):
    scene_id: str
    image: np.ndarray
    density: np.ndarray
    regime_label: str


@dataclass
class PatchBank:
    """A fixed, id-addressed set of patches with RoI ground truth at 1/4 scale."""

    spec: PatchSpec
    images: np.ndarray  # (P, 1, patch_h, patch_w)
    gts: np.ndarray  # (P, 1, roi_h / 4, roi_w / 4)
    counts: np.ndarray  # (P,)
    ids: List[str] = field(default_factory=list)
    scene_ids: List[str] = field(default_factory=list)
    regimes: List[str] = field(default_factory=list)
    placements: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self) -> int:
        return int(self.counts.shape[0])

    def subset(self, indices: Sequence[int]) -> "PatchBank":
        idx = np.asarray(indices, dtype=np.int64)
        return PatchBank(
            spec=self.spec,
            images=self.images[idx],
            gts=self.gts[idx],
            counts=self.counts[idx],
            ids=[self.ids[i] for i in idx],
            scene_ids=[self.scene_ids[i] for i in idx],
            regimes=[self.regimes[i] for i in idx],
            placements=self.placements[idx],
        )

    def rois(self) -> np.ndarray:
        mt, ml = self.spec.margin
        return self.images[:, :, mt:mt + self.spec.roi_h, ml:ml + self.spec.roi_w]

    def draw(self, rng: np.random.Generator) -> "PatchBank":
        return self

    @classmethod
    def empty(cls, spec: PatchSpec) -> "PatchBank":
        gh, gw = spec.roi_map_shape
        return cls(
            spec=spec,
            images=np.zeros((0, 1, spec.patch_h, spec.patch_w)),
            gts=np.zeros((0, 1, gh, gw)),
            counts=np.zeros(0),
        )

    @classmethod
    def from_rows(cls, spec: PatchSpec, rows: List[Tuple[np.ndarray, np.ndarray, float, str, str, str, Placement]]) -> "PatchBank":
        if not rows:
            return cls.empty(spec)
        return cls(
            spec=spec,
            images=np.stack([r[0] for r in rows])[:, None],
            gts=np.stack([r[1] for r in rows])[:, None],
            counts=np.array([r[2] for r in rows], dtype=np.float64),
            ids=[r[3] for r in rows],
            scene_ids=[r[4] for r in rows],
            regimes=[r[5] for r in rows],
            placements=np.array([r[6] for r in rows], dtype=np.int64),
        )


def _random_placement(rng: np.random.Generator, shape: Tuple[int, int], spec: PatchSpec) -> Placement:
    h, w = shape
    return int(rng.integers(0, h - spec.roi_h + 1)), int(rng.integers(0, w - spec.roi_w + 1))


def sample_patches(scenes: Sequence[SceneLike], spec: PatchSpec, per_scene: int, rng: np.random.Generator) -> PatchBank:
    """``per_scene`` random RoI placements from every scene, in scene order."""
    rows = []
    for scene in scenes:
        for k in range(per_scene):
            top, left = _random_placement(rng, scene.image.shape, spec)
            patch, gt, count = extract_patch_at(scene.image, scene.density, top, left, spec)
            rows.append((patch, gt, count, f"{scene.scene_id}#{k}@{top},{left}", scene.scene_id, scene.regime_label, (top, left)))
    return PatchBank.from_rows(spec, rows)


def grid_patches(scene: SceneLike, spec: PatchSpec, stride: Optional[int] = None) -> PatchBank:
    """Every slid RoI of one scene (test-time protocol)."""
    rows = []
    for k, (top, left) in enumerate(roi_grid(scene.image.shape, spec, stride)):
        patch, gt, count = extract_patch_at(scene.image, scene.density, top, left, spec)
        rows.append((patch, gt, count, f"{scene.scene_id}#g{k}@{top},{left}", scene.scene_id, scene.regime_label, (top, left)))
    return PatchBank.from_rows(spec, rows)


@dataclass
class SceneSampler:
    """Fresh random crops on every ``draw`` (pretraining / MoE training)."""

    scenes: Sequence[SceneLike]
    spec: PatchSpec
    per_draw: int

    def draw(self, rng: np.random.Generator) -> PatchBank:
        if not self.scenes:
            raise DensityError("scene sampler has no scenes")
        rows = []
        picks = rng.integers(0, len(self.scenes), size=self.per_draw)
        for k, s in enumerate(picks):
            scene = self.scenes[int(s)]
            top, left = _random_placement(rng, scene.image.shape, self.spec)
            patch, gt, count = extract_patch_at(scene.image, scene.density, top, left, self.spec)
            rows.append((patch, gt, count, f"{scene.scene_id}#r{k}@{top},{left}", scene.scene_id, scene.regime_label, (top, left)))
        return PatchBank.from_rows(self.spec, rows)
