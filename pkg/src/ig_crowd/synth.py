from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
import pandas as pd

from .density import DensityError, as_points, check_points, make_density_map
from .logging import logger
from .parallel import ordered_map
from .schemas.core import RegimeSpec
from .tensor.archive import load_tensor, save_tensor


class SynthError(RuntimeError):
    pass


@dataclass
class Scene:
    scene_id: str
    image: np.ndarray  # (H, W) grayscale in [0, 1]
    points: np.ndarray  # (n, 2) head (x, y)
    regime_label: str  # analysis only, never fed to a trainable component
    density: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def with_density(self, sigma: float) -> "Scene":
        self.density = make_density_map(self.points, self.image.shape, sigma).values
        return self


@dataclass
class DatasetBundle:
    scenes: List[Scene]
    meta: Dict[str, Any]

    def by_id(self) -> Dict[str, Scene]:
        return {s.scene_id: s for s in self.scenes}

    def subset(self, split_name: str) -> List[Scene]:
        ids = self.meta.get("splits", {}).get(split_name, [])
        index = self.by_id()
        return [index[i] for i in ids]


def _background(rng: np.random.Generator, shape: Tuple[int, int], texture_seed: int) -> np.ndarray:
    h, w = shape
    texture = np.random.default_rng(texture_seed).random((h // 8 + 1, w // 8 + 1))
    coarse = np.kron(texture, np.ones((8, 8)))[:h, :w]
    return 0.15 + 0.12 * coarse + rng.normal(0.0, 0.02, size=(h, w))


def _render_disc(img: np.ndarray, x: float, y: float, radius: float, intensity: float) -> None:
    h, w = img.shape
    r0, r1 = max(0, int(y - radius - 1)), min(h, int(y + radius + 2))
    c0, c1 = max(0, int(x - radius - 1)), min(w, int(x + radius + 2))
    rows, cols = np.ogrid[r0:r1, c0:c1]
    d = np.sqrt((rows + 0.5 - y) ** 2 + (cols + 0.5 - x) ** 2)
    # anti-aliased edge: one pixel of linear falloff around the radius
    alpha = np.clip(radius + 0.5 - d, 0.0, 1.0)
    np.maximum(img[r0:r1, c0:c1], alpha * intensity, out=img[r0:r1, c0:c1])


def render_scene(
    regime: RegimeSpec,
    regime_index: int,
    scene_index: int,
    image_shape: Tuple[int, int],
    region_shape: Tuple[int, int],
    seed: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """One scene from its own RNG stream ``(seed, regime_index, scene_index)``."""
    rng = np.random.default_rng([seed, regime_index, scene_index])
    h, w = image_shape
    scale = (h * w) / float(region_shape[0] * region_shape[1])
    lo, hi = regime.count_range
    n = int(rng.integers(int(round(lo * scale)), int(round(hi * scale)) + 1))
    xs = np.minimum(np.round(rng.uniform(0.0, w, size=n), 3), w - 1e-3)
    ys = np.minimum(np.round(rng.uniform(0.0, h, size=n), 3), h - 1e-3)
    points = np.stack([xs, ys], axis=1) if n else np.zeros((0, 2))

    img = _background(rng, (h, w), int(rng.integers(regime.texture_seed_space)) + 7919 * regime_index)
    radii = rng.uniform(regime.dot_radius_range[0], regime.dot_radius_range[1], size=n)
    intensities = rng.uniform(0.7, 1.0, size=n)
    for (x, y), r, a in zip(points, radii, intensities):
        _render_disc(img, float(x), float(y), float(r), float(a))
    return np.clip(img, 0.0, 1.0), points


def generate_dataset(
    regimes: Sequence[RegimeSpec],
    scenes_per_regime: int,
    image_shape: Tuple[int, int],
    seed: int,
    *,
    sigma: float = 2.0,
    region_shape: Tuple[int, int] = (64, 64),
    threads: Optional[int] = None,
) -> List[Scene]:
    names = [r.name for r in regimes]
    if len(set(names)) != len(names):
        raise SynthError(f"regime names overlap: {names}")
    if scenes_per_regime < 1:
        raise SynthError(f"scenes_per_regime must be >= 1, got {scenes_per_regime}")
    if len(regimes) < 2:
        logger.bind(stage="data").warning("fewer than two regimes: specialization has nothing to separate")
    jobs = [(ri, si) for ri in range(len(regimes)) for si in range(scenes_per_regime)]

    def build(job: Tuple[int, int]) -> Scene:
        ri, si = job
        regime = regimes[ri]
        image, points = render_scene(regime, ri, si, image_shape, region_shape, seed)
        return Scene(f"{regime.name}-{si:04d}", image, points, regime.name).with_density(sigma)

    scenes = ordered_map(build, jobs, threads)
    logger.bind(stage="data").info(f"generated {len(scenes)} scenes over {len(regimes)} regimes")
    return scenes


def _allocate(n: int, fractions: Tuple[float, float, float]) -> List[int]:
    # largest remainder, ties to the earlier split
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(
    scenes: Sequence[Scene], fractions: Tuple[float, float, float], seed: int
) -> Tuple[List[Scene], List[Scene], List[Scene]]:
    """Stratified by regime; membership depends only on ``seed`` and the scene order."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0, atol=1e-9):
        raise SynthError(f"fractions {tuple(fractions)} must be three non-negative values summing to 1")
    rng = np.random.default_rng(seed)
    by_regime: Dict[str, List[int]] = {}
    for i, s in enumerate(scenes):
        by_regime.setdefault(s.regime_label, []).append(i)
    parts: List[List[int]] = [[], [], []]
    for label in by_regime:
        idx = by_regime[label]
        perm = [idx[j] for j in rng.permutation(len(idx))]
        sizes = _allocate(len(idx), tuple(fractions))
        start = 0
        for k, size in enumerate(sizes):
            parts[k].extend(perm[start:start + size])
            start += size
    for name, frac, part in zip(("train", "val", "test"), fractions, parts):
        if frac > 0 and not part:
            raise SynthError(f"{name} split is empty for fraction {frac} over {len(scenes)} scenes")
    if not parts[0]:
        raise SynthError("train split is empty")
    train, val, test = ([scenes[i] for i in sorted(p)] for p in parts)
    return train, val, test


def save_dataset(scenes: Sequence[Scene], directory: Path, meta: Dict[str, Any]) -> List[str]:
    """``dataset.json`` + ``scenes/<id>.tge`` (image) + ``scenes/<id>.csv`` (head points)."""
    directory = Path(directory)
    (directory / "scenes").mkdir(parents=True, exist_ok=True)
    files = ["dataset.json"]
    for s in scenes:
        save_tensor(directory / "scenes" / f"{s.scene_id}.tge", s.image)
        pd.DataFrame(s.points, columns=["x", "y"]).to_csv(
            directory / "scenes" / f"{s.scene_id}.csv", index=False, float_format="%.3f"
        )
        files += [f"scenes/{s.scene_id}.tge", f"scenes/{s.scene_id}.csv"]
    payload = dict(meta)
    payload["scenes"] = [{"id": s.scene_id, "regime": s.regime_label} for s in scenes]
    (directory / "dataset.json").write_bytes(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))
    return files


def read_points(path: Path) -> np.ndarray:
    df = pd.read_csv(path)
    if list(df.columns) != ["x", "y"]:
        raise SynthError(f"{path}: expected header x,y, got {list(df.columns)}")
    return as_points(df[["x", "y"]].to_numpy(dtype=np.float64))


def load_dataset(directory: Path) -> DatasetBundle:
    directory = Path(directory)
    manifest = directory / "dataset.json"
    if not manifest.exists():
        raise SynthError(f"dataset manifest not found: {manifest}")
    meta = orjson.loads(manifest.read_bytes())
    sigma = float(meta.get("sigma", 2.0))
    scenes = []
    for entry in meta.get("scenes", []):
        sid = entry["id"]
        image = load_tensor(directory / "scenes" / f"{sid}.tge")
        points = read_points(directory / "scenes" / f"{sid}.csv")
        try:
            check_points(points, image.shape)
        except DensityError as exc:
            raise SynthError(f"scene {sid}: {exc}") from exc
        scenes.append(Scene(sid, image, points, entry.get("regime", "unknown")).with_density(sigma))
    return DatasetBundle(scenes=scenes, meta=meta)
