#!/usr/bin/env python3
"""
Procedural point-cloud corpus with analytic part labels.

Each category owns a disjoint range of global part ids, the way a
multi-category part dataset numbers its parts. Proportions are drawn
per seed so no two shapes of a category are alike.
"""

import logging
import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import CategorySchema, DatasetManifest, PointCloud, ShapeEntry, save_manifest, save_shape
from .validation import DataError, ValidationError

logger = logging.getLogger(__name__)

SYNTHETIC_SCHEMAS: Dict[str, CategorySchema] = {
    "barbell": CategorySchema("barbell", (0, 1, 2), ("left_bell", "bar", "right_bell")),
    "table": CategorySchema("table", (3, 4), ("top", "legs")),
    "lamp": CategorySchema("lamp", (5, 6, 7), ("base", "pole", "shade")),
    "mug": CategorySchema("mug", (8, 9), ("body", "handle")),
}

DEFAULT_POINTS = 2048


def _allocate(n: int, weights: Sequence[float]) -> List[int]:
    """Split n points across parts proportionally to weights, at least one each."""
    if n < len(weights):
        raise ValidationError(f"Need at least {len(weights)} points, got {n}", "points")
    w = np.asarray(weights, dtype=np.float64)
    exact = (n - len(w)) * w / w.sum()
    counts = np.floor(exact).astype(int) + 1
    remainder = n - counts.sum()
    order = np.argsort(-(exact - np.floor(exact)), kind="stable")
    counts[order[:remainder]] += 1
    return counts.tolist()


def _sphere(rng, center, radius, k) -> np.ndarray:
    v = rng.normal(size=(k, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v


def _cylinder_z(rng, cx, cy, radius, z0, z1, k) -> np.ndarray:
    theta = rng.uniform(0.0, 2 * np.pi, k)
    z = rng.uniform(z0, z1, k)
    return np.stack([cx + radius * np.cos(theta), cy + radius * np.sin(theta), z], axis=1)


def _disk_z(rng, radius, z0, z1, k) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, k))
    theta = rng.uniform(0.0, 2 * np.pi, k)
    return np.stack([r * np.cos(theta), r * np.sin(theta), rng.uniform(z0, z1, k)], axis=1)


def _barbell(rng, n) -> Tuple[List[np.ndarray], Tuple[int, ...]]:
    bell = rng.uniform(0.25, 0.4)
    length = rng.uniform(1.2, 2.0)
    bar = rng.uniform(0.04, 0.08)
    half = length / 2
    x0, x1 = -half + 0.9 * bell, half - 0.9 * bell
    counts = _allocate(n, [4 * np.pi * bell ** 2, 2 * np.pi * bar * (x1 - x0), 4 * np.pi * bell ** 2])
    theta = rng.uniform(0.0, 2 * np.pi, counts[1])
    bar_pts = np.stack([rng.uniform(x0, x1, counts[1]), bar * np.cos(theta), bar * np.sin(theta)], axis=1)
    parts = [_sphere(rng, (-half, 0, 0), bell, counts[0]), bar_pts, _sphere(rng, (half, 0, 0), bell, counts[2])]
    return parts, SYNTHETIC_SCHEMAS["barbell"].part_ids


def _table(rng, n):
    a, b = rng.uniform(0.6, 1.0), rng.uniform(0.4, 0.8)
    height = rng.uniform(0.6, 1.0)
    leg = rng.uniform(0.03, 0.06)
    thick = 0.05
    counts = _allocate(n, [4 * a * b, 4 * 2 * np.pi * leg * height])
    top = np.stack([rng.uniform(-a, a, counts[0]), rng.uniform(-b, b, counts[0]),
                    rng.uniform(height, height + thick, counts[0])], axis=1)
    corners = np.array([[sx * (a - 0.1), sy * (b - 0.1)] for sx in (-1, 1) for sy in (-1, 1)])
    which = rng.integers(0, 4, counts[1])
    legs = _cylinder_z(rng, 0.0, 0.0, leg, 0.0, height, counts[1])
    legs[:, :2] += corners[which]
    return [top, legs], SYNTHETIC_SCHEMAS["table"].part_ids


def _lamp(rng, n):
    base_r = rng.uniform(0.3, 0.5)
    pole_r = rng.uniform(0.02, 0.04)
    height = rng.uniform(1.0, 1.6)
    shade_low, shade_high = rng.uniform(0.35, 0.55), rng.uniform(0.12, 0.2)
    shade_h = rng.uniform(0.3, 0.5)
    counts = _allocate(n, [np.pi * base_r ** 2, 2 * np.pi * pole_r * height,
                           np.pi * (shade_low + shade_high) * shade_h])
    base = _disk_z(rng, base_r, 0.0, 0.05, counts[0])
    pole = _cylinder_z(rng, 0.0, 0.0, pole_r, 0.05, height, counts[1])
    t = rng.uniform(0.0, 1.0, counts[2])
    radius = shade_low + (shade_high - shade_low) * t
    theta = rng.uniform(0.0, 2 * np.pi, counts[2])
    shade = np.stack([radius * np.cos(theta), radius * np.sin(theta),
                      height - 0.5 * shade_h + shade_h * t], axis=1)
    return [base, pole, shade], SYNTHETIC_SCHEMAS["lamp"].part_ids


def _mug(rng, n):
    radius = rng.uniform(0.35, 0.5)
    height = rng.uniform(0.7, 1.1)
    loop = rng.uniform(0.2, 0.3) * height
    tube = 0.04
    side, bottom = 2 * np.pi * radius * height, np.pi * radius ** 2
    counts = _allocate(n, [side + bottom, np.pi * loop * 2 * np.pi * tube])
    n_bottom = int(round(counts[0] * bottom / (side + bottom)))
    body = np.concatenate([_cylinder_z(rng, 0.0, 0.0, radius, 0.0, height, counts[0] - n_bottom),
                           _disk_z(rng, radius, 0.0, 0.0, n_bottom)])
    phi = rng.uniform(-np.pi / 2, np.pi / 2, counts[1])
    psi = rng.uniform(0.0, 2 * np.pi, counts[1])
    ring = np.stack([np.cos(phi), np.zeros_like(phi), np.sin(phi)], axis=1)
    centers = np.array([radius, 0.0, height / 2]) + loop * ring
    offsets = tube * (np.cos(psi)[:, None] * ring + np.sin(psi)[:, None] * np.array([0.0, 1.0, 0.0]))
    return [body, centers + offsets], SYNTHETIC_SCHEMAS["mug"].part_ids


GENERATORS: Dict[str, Callable] = {
    "barbell": _barbell,
    "table": _table,
    "lamp": _lamp,
    "mug": _mug,
}


def generate_synthetic(category_kind: str, seed, n_points: int = DEFAULT_POINTS,
                       name: Optional[str] = None) -> PointCloud:
    """
    Sample one synthetic shape of the given kind.

    Args:
        category_kind: One of barbell, table, lamp, mug
        seed: Anything numpy accepts as a seed; equal seeds give equal clouds
        n_points: Number of surface points
        name: Optional shape name

    Raises:
        ValidationError: For an unknown kind
    """
    if category_kind not in GENERATORS:
        raise ValidationError(f"Unknown synthetic category '{category_kind}'; "
                              f"choose from {sorted(GENERATORS)}", "categories")
    rng = np.random.default_rng(seed)
    parts, part_ids = GENERATORS[category_kind](rng, n_points)
    points = np.concatenate(parts)
    labels = np.concatenate([np.full(len(p), pid) for p, pid in zip(parts, part_ids)])
    order = rng.permutation(len(points))
    return PointCloud(points[order], labels[order], category_kind, name=name or category_kind)


def shape_seed(seed: int, category_kind: str, index: int) -> int:
    kind_index = sorted(GENERATORS).index(category_kind)
    return int(np.random.SeedSequence([seed, kind_index, index]).generate_state(1)[0])


def write_corpus(out_dir: str, categories: Sequence[str], shapes_per_category: int,
                 n_points: int, seed: int, novel: Optional[Sequence[str]] = None,
                 test_fraction: float = 0.25) -> str:
    """
    Write a synthetic corpus and its manifest.

    The last ``test_fraction`` of each category's shapes (at least one)
    form the query pool. Returns the manifest path.
    """
    if shapes_per_category < 2:
        raise ValidationError("Each category needs at least 2 shapes (support and query)",
                              "shapes_per_category")
    categories = list(categories)
    novel = list(novel) if novel is not None else categories[-1:]
    unknown = [c for c in categories if c not in GENERATORS]
    if unknown:
        raise ValidationError(f"Unknown synthetic categories {unknown}", "categories")
    if set(novel) - set(categories):
        raise DataError(f"Novel categories {sorted(set(novel) - set(categories))} are not generated")

    n_test = max(1, int(round(shapes_per_category * test_fraction)))
    entries = []
    for category in categories:
        for i in range(shapes_per_category):
            name = f"{category}_{i:03d}"
            cloud = generate_synthetic(category, shape_seed(seed, category, i), n_points, name)
            rel = os.path.join(category, f"{name}.txt")
            save_shape(cloud, os.path.join(out_dir, rel))
            split = "test" if i >= shapes_per_category - n_test else "train"
            entries.append(ShapeEntry(rel.replace(os.sep, "/"), category, split))
        logger.info(f"Generated {shapes_per_category} '{category}' shapes in {out_dir}")

    manifest = DatasetManifest("synthetic", {c: SYNTHETIC_SCHEMAS[c] for c in categories},
                               entries, tuple(novel), root=os.path.abspath(out_dir))
    path = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest, path)
    return path
