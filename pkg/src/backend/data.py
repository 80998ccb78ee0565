#!/usr/bin/env python3
"""
Point clouds, category schemas, dataset manifests and the episode sampler.

Shape files are UTF-8 text with one point per line, "x y z label";
lines starting with '#' are comments. Manifests are JSON.
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .validation import DataError, validate_counts, validate_part_ids

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
SIGNIFICANT_DIGITS = 12


@dataclass
class PointCloud:
    """N points with per-point global part labels."""
    points: np.ndarray
    labels: np.ndarray
    category: str
    name: str = ""
    is_query: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise DataError(f"Point cloud '{self.name}' needs N >= 1 rows of 3 coordinates, "
                            f"got shape {self.points.shape}")
        if self.labels.shape != (self.points.shape[0],):
            raise DataError(f"Point cloud '{self.name}' has {self.labels.shape} labels "
                            f"for {self.points.shape[0]} points")

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])

    def as_query(self) -> "PointCloud":
        return replace(self, is_query=True)


@dataclass(frozen=True)
class CategorySchema:
    """Global part ids (and names) of one object category."""
    name: str
    part_ids: Tuple[int, ...]
    part_names: Tuple[str, ...] = ()

    def __post_init__(self):
        validate_part_ids(self.part_ids, self.name)
        if self.part_names and len(self.part_names) != len(self.part_ids):
            raise DataError(f"Category '{self.name}' has {len(self.part_names)} names "
                            f"for {len(self.part_ids)} parts")


@dataclass(frozen=True)
class ShapeEntry:
    path: str
    category: str
    split: str


@dataclass
class Episode:
    """Support and query clouds of one task plus its dense label map."""
    support: List[PointCloud]
    query: List[PointCloud]
    label_map: Dict[int, int]
    categories: List[str]

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    def local_labels(self, cloud: PointCloud) -> np.ndarray:
        """Map a cloud's global part ids to episode labels in [0, c)."""
        try:
            return np.array([self.label_map[int(l)] for l in cloud.labels], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"Label {e.args[0]} of '{cloud.name}' is not covered by the episode")

    def global_labels(self, local: np.ndarray) -> np.ndarray:
        inverse = np.empty(self.num_classes, dtype=np.int64)
        for gid, idx in self.label_map.items():
            inverse[idx] = gid
        return inverse[np.asarray(local, dtype=np.int64)]


def load_shape(path: str, schema: Optional[CategorySchema] = None,
               category: Optional[str] = None) -> PointCloud:
    """
    Parse a shape file. Coordinates are returned as stored, not normalized.

    Args:
        path: Shape file path
        schema: If given, every label must belong to this category's parts
        category: Category name to attach (defaults to the schema's)

    Raises:
        DataError: On unreadable files, malformed lines, empty files or
            labels outside the schema
    """
    points, labels = [], []
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise DataError(f"Cannot read shape file: {e}", path)

    allowed = set(schema.part_ids) if schema is not None else None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 4:
            raise DataError(f"Expected 4 fields 'x y z label', got {len(fields)}", path, lineno)
        try:
            xyz = [float(v) for v in fields[:3]]
            label = int(fields[3])
        except ValueError:
            raise DataError(f"Non-numeric token in '{line}'", path, lineno)
        if not all(np.isfinite(xyz)):
            raise DataError("Non-finite coordinate", path, lineno)
        if label < 0 or (allowed is not None and label not in allowed):
            raise DataError(f"Label {label} is not a part of '{schema.name if schema else '?'}'",
                            path, lineno)
        points.append(xyz)
        labels.append(label)

    if not points:
        raise DataError("Shape file holds no points", path)
    name = os.path.splitext(os.path.basename(path))[0]
    category = category or (schema.name if schema is not None else "")
    return PointCloud(np.array(points), np.array(labels), category, name=name)


def save_shape(cloud: PointCloud, path: str) -> None:
    """Write a cloud with coordinates at 12 significant digits."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fmt = f"{{:.{SIGNIFICANT_DIGITS}g}}"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# {cloud.category} {cloud.name}\n")
        for (x, y, z), label in zip(cloud.points, cloud.labels):
            f.write(f"{fmt.format(x)} {fmt.format(y)} {fmt.format(z)} {int(label)}\n")


def normalize(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale to unit max norm; identical points map to zeros."""
    if np.all(cloud.points == cloud.points[0]):
        return replace(cloud, points=np.zeros_like(cloud.points))
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    return replace(cloud, points=centered / radius)


def sample_points(cloud: PointCloud, n: int, seed) -> PointCloud:
    """
    Draw ``n`` points uniformly, without replacement when n <= N.
    Labels travel with their points.
    """
    if n < 1:
        raise DataError(f"Cannot sample {n} points from '{cloud.name}'")
    rng = np.random.default_rng(seed)
    total = cloud.num_points
    if n <= total:
        idx = rng.choice(total, size=n, replace=False)
    else:
        idx = rng.integers(0, total, size=n)
    return replace(cloud, points=cloud.points[idx], labels=cloud.labels[idx])


@dataclass
class DatasetManifest:
    """
    Shape files by category and split, plus the base/novel partition.

    Support shapes are drawn from the "train" split and query shapes from
    the fixed "test" pool of the same category.
    """
    name: str
    schemas: Dict[str, CategorySchema]
    entries: List[ShapeEntry]
    novel: Tuple[str, ...] = ()
    root: str = "."
    _cache: Dict[str, PointCloud] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        unknown = set(self.novel) - set(self.schemas)
        if unknown:
            raise DataError(f"Novel categories {sorted(unknown)} are not declared in '{self.name}'")

    @property
    def categories(self) -> List[str]:
        return list(self.schemas)

    @property
    def base_categories(self) -> List[str]:
        return [c for c in self.schemas if c not in self.novel]

    @property
    def novel_categories(self) -> List[str]:
        return [c for c in self.schemas if c in self.novel]

    def shapes(self, category: str, split: str) -> List[ShapeEntry]:
        return [e for e in self.entries if e.category == category and e.split == split]

    def resolve(self, entry: ShapeEntry) -> str:
        return entry.path if os.path.isabs(entry.path) else os.path.join(self.root, entry.path)

    def load(self, entry: ShapeEntry) -> PointCloud:
        """Load and normalize a shape, caching the result."""
        key = self.resolve(entry)
        cloud = self._cache.get(key)
        if cloud is None:
            cloud = normalize(load_shape(key, self.schemas[entry.category], entry.category))
            self._cache[key] = cloud
        return cloud

    def with_partition(self, categories: Optional[Sequence[str]] = None,
                       novel: Optional[Sequence[str]] = None) -> "DatasetManifest":
        """Restrict to ``categories`` (base plus novel) and/or redeclare the novel set."""
        novel = tuple(novel) if novel is not None else self.novel
        keep = set(categories or self.schemas) | set(novel)
        missing = keep - set(self.schemas)
        if missing:
            raise DataError(f"Categories {sorted(missing)} are absent from manifest '{self.name}'")
        return DatasetManifest(
            name=self.name,
            schemas={c: s for c, s in self.schemas.items() if c in keep},
            entries=[e for e in self.entries if e.category in keep],
            novel=tuple(c for c in novel if c in keep),
            root=self.root,
            _cache=self._cache,
        )


def load_manifest(path: str) -> DatasetManifest:
    """
    Read a JSON manifest; shape paths are relative to the manifest's directory.

    Raises:
        DataError: If the manifest is malformed or a shape path does not resolve
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise DataError(f"Cannot read manifest: {e}", path)
    except json.JSONDecodeError as e:
        raise DataError(f"Manifest is not valid JSON: {e}", path)

    try:
        schemas = {
            name: CategorySchema(name, tuple(declared["parts"]), tuple(declared.get("part_names", ())))
            for name, declared in raw["categories"].items()
        }
        novel = tuple(name for name, declared in raw["categories"].items() if declared.get("novel", False))
        entries = [ShapeEntry(e["path"], e["category"], e.get("split", "train")) for e in raw["shapes"]]
    except (KeyError, TypeError, AttributeError) as e:
        raise DataError(f"Manifest is missing a required key: {e}", path)

    manifest = DatasetManifest(raw.get("name", os.path.basename(path)), schemas, entries,
                               novel, root=os.path.dirname(os.path.abspath(path)))
    for entry in entries:
        if entry.category not in schemas:
            raise DataError(f"Shape {entry.path} names undeclared category '{entry.category}'", path)
        if entry.split not in SPLITS:
            raise DataError(f"Shape {entry.path} has unknown split '{entry.split}'", path)
        if not os.path.isfile(manifest.resolve(entry)):
            raise DataError(f"Shape file {entry.path} does not exist", path)
    return manifest


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    raw = {
        "name": manifest.name,
        "categories": {
            name: {
                "parts": list(schema.part_ids),
                "part_names": list(schema.part_names),
                "novel": name in manifest.novel,
            }
            for name, schema in manifest.schemas.items()
        },
        "shapes": [{"path": e.path, "category": e.category, "split": e.split}
                   for e in manifest.entries],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(raw, f, indent=2, sort_keys=True)
        f.write("\n")


def build_label_map(schemas: Sequence[CategorySchema]) -> Dict[int, int]:
    """Dense map of the union of the categories' global part ids onto [0, c)."""
    union = sorted({pid for schema in schemas for pid in schema.part_ids})
    return {gid: idx for idx, gid in enumerate(union)}


def build_episode(manifest: DatasetManifest, n_way: int, k_shot: int, rng: np.random.Generator,
                  categories: Optional[Sequence[str]] = None, n_query: int = 0,
                  n_points: Optional[int] = None) -> Episode:
    """
    Sample an N-way-K-shot episode.

    Args:
        manifest: Dataset to draw from
        n_way: Number of categories
        k_shot: Support shapes per category
        rng: Source of randomness; the episode is a pure function of its state
        categories: Category pool (defaults to the manifest's base categories)
        n_query: Query shapes per category; 0 takes the whole test pool
        n_points: If set, subsample every cloud to this many points

    Raises:
        ValidationError: If n_way or k_shot is below one
        DataError: If there are too few categories or shapes
    """
    validate_counts(n_way=n_way, k_shot=k_shot)
    pool = sorted(categories if categories is not None else manifest.base_categories)
    if len(pool) < n_way:
        raise DataError(f"Need {n_way} categories for an episode, manifest '{manifest.name}' "
                        f"offers {len(pool)}")
    chosen = [str(c) for c in rng.choice(pool, size=n_way, replace=False)]

    support, query = [], []
    for category in chosen:
        train = manifest.shapes(category, "train")
        test = manifest.shapes(category, "test")
        if len(train) < k_shot:
            raise DataError(f"Category '{category}' has {len(train)} train shapes, "
                            f"{k_shot} needed for the support set")
        if not test:
            raise DataError(f"Category '{category}' has no test shapes for the query set")
        picked = rng.choice(len(train), size=k_shot, replace=False)
        if 0 < n_query < len(test):
            held_out = np.sort(rng.choice(len(test), size=n_query, replace=False))
        else:
            held_out = np.arange(len(test))
        for i in picked:
            support.append(_prepare(manifest, train[i], n_points, rng))
        for i in held_out:
            query.append(_prepare(manifest, test[i], n_points, rng).as_query())

    label_map = build_label_map([manifest.schemas[c] for c in chosen])
    episode = Episode(support, query, label_map, chosen)
    for cloud in support + query:
        episode.local_labels(cloud)
    return episode


def _prepare(manifest: DatasetManifest, entry: ShapeEntry, n_points: Optional[int],
             rng: np.random.Generator) -> PointCloud:
    cloud = manifest.load(entry)
    if n_points is None:
        return cloud
    return normalize(sample_points(cloud, n_points, int(rng.integers(0, 2 ** 32))))
