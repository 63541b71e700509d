from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np

from ..logging import logger
from ..synth import Scene, SynthError, read_points
from ..tensor.archive import ArchiveError, load_tensor


class FolderAdapterError(RuntimeError):
    pass


def load_folder(path: Path, sigma: float = 2.0) -> List[Scene]:
    """Annotated scenes from a plain directory: ``<id>.tge`` image + ``<id>.csv`` head points.

    This is the contract for dropping real data in. Images are clipped to [0, 1] and
    cropped to the 4-pixel output grid; heads falling into the cropped border are
    dropped. The regime label is ``unknown``.
    """
    root = Path(path)
    if not root.is_dir():
        raise FolderAdapterError(f"not a directory: {root}")
    images = sorted(root.glob("*.tge"))
    if not images:
        raise FolderAdapterError(f"no *.tge images under {root}")
    scenes: List[Scene] = []
    for img_path in images:
        pts_path = img_path.with_suffix(".csv")
        if not pts_path.exists():
            raise FolderAdapterError(f"missing annotations for {img_path.name}: {pts_path.name}")
        try:
            image = load_tensor(img_path)
            points = read_points(pts_path)
        except (ArchiveError, SynthError) as exc:
            raise FolderAdapterError(f"{img_path.stem}: {exc}") from exc
        if image.ndim != 2:
            raise FolderAdapterError(f"{img_path.name}: expected a 2-D grayscale image, got dims {list(image.shape)}")
        h, w = (image.shape[0] // 4) * 4, (image.shape[1] // 4) * 4
        if (h, w) != image.shape:
            keep = (points[:, 0] < w) & (points[:, 1] < h) if len(points) else np.zeros(0, dtype=bool)
            dropped = int(len(points) - keep.sum())
            logger.bind(stage="data").warning(f"{img_path.stem}: cropped to {h}x{w}, dropped {dropped} heads")
            image, points = image[:h, :w], points[keep]
        inside = (points[:, 0] >= 0) & (points[:, 1] >= 0) if len(points) else np.zeros(0, dtype=bool)
        if len(points) and not inside.all():
            raise FolderAdapterError(f"{img_path.stem}: head point {int(np.argmin(inside))} has negative coordinates")
        scenes.append(Scene(img_path.stem, np.clip(image, 0.0, 1.0), points, "unknown").with_density(sigma))
    logger.bind(stage="data").info(f"loaded {len(scenes)} scenes from {root}")
    return scenes
