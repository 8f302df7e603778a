"""Labeled scanpath datasets and their on-disk layout.

A dataset directory contains a ``manifest.json``, one scanpath CSV per
(subject, image) item, optional per-item saccade-feature CSVs, and
optional per-image saliency grids:

    manifest.json
    scanpaths/<subject>__<image>.csv
    features/<subject>__<image>.csv
    saliency/<image>.csv + <image>.json
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .core import (
    SaccadeFeatures,
    Scanpath,
    load_features_csv,
    load_scanpath_csv,
    save_features_csv,
    save_scanpath_csv,
)
from .scenewalk import SaliencyMap, load_saliency, save_saliency


@dataclass(frozen=True)
class DatasetItem:
    """One viewing: a scanpath by one subject on one image."""

    subject_id: str
    image_id: str
    scanpath: Scanpath
    features: tuple[SaccadeFeatures, ...] | None = None


@dataclass(frozen=True)
class GazeDataset:
    items: tuple[DatasetItem, ...]
    saliency: dict[str, SaliencyMap] | None = None
    meta: dict | None = None

    @property
    def subjects(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for item in self.items:
            seen.setdefault(item.subject_id)
        return tuple(seen)

    def images_of(self, subject_id: str) -> tuple[str, ...]:
        return tuple(i.image_id for i in self.items if i.subject_id == subject_id)

    def item(self, subject_id: str, image_id: str) -> DatasetItem:
        for it in self.items:
            if it.subject_id == subject_id and it.image_id == image_id:
                return it
        raise KeyError(f"no item for subject {subject_id!r} image {image_id!r}")


def save_dataset(data: GazeDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "scanpaths").mkdir(parents=True, exist_ok=True)
    has_features = any(item.features is not None for item in data.items)
    if has_features:
        (out / "features").mkdir(exist_ok=True)
    if data.saliency:
        (out / "saliency").mkdir(exist_ok=True)

    manifest = {
        "items": [
            {"subject_id": it.subject_id, "image_id": it.image_id} for it in data.items
        ],
        "has_features": has_features,
        "saliency_images": sorted(data.saliency) if data.saliency else [],
        "meta": data.meta or {},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)

    for it in data.items:
        stem = f"{it.subject_id}__{it.image_id}"
        save_scanpath_csv(it.scanpath, out / "scanpaths" / f"{stem}.csv")
        if it.features is not None:
            save_features_csv(it.features, out / "features" / f"{stem}.csv")
    if data.saliency:
        for image_id, sal in data.saliency.items():
            save_saliency(sal, out / "saliency" / image_id)


def load_dataset(in_dir: str | Path) -> GazeDataset:
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root}: no manifest.json; not a dataset directory")
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    items = []
    for entry in manifest["items"]:
        subject_id, image_id = entry["subject_id"], entry["image_id"]
        stem = f"{subject_id}__{image_id}"
        path = load_scanpath_csv(
            root / "scanpaths" / f"{stem}.csv", subject_id=subject_id, image_id=image_id
        )
        features = None
        feat_path = root / "features" / f"{stem}.csv"
        if manifest.get("has_features") and feat_path.exists():
            features = tuple(load_features_csv(feat_path))
        items.append(
            DatasetItem(subject_id=subject_id, image_id=image_id, scanpath=path, features=features)
        )

    saliency = None
    if manifest.get("saliency_images"):
        saliency = {
            image_id: load_saliency(root / "saliency" / image_id)
            for image_id in manifest["saliency_images"]
        }
    return GazeDataset(items=tuple(items), saliency=saliency, meta=manifest.get("meta") or {})
