"""Dataset ingestion and K-shot split construction.

Supports ModelNet40-style and ScanObjectNN-style HDF5 archives, ShapeNet
part-annotation style per-object text point files, and a synthetic corpus
of parametric surface primitives for desk-scale experiments. Every loader
subsamples or pads clouds to a fixed point count with a seeded generator.

K-shot splits draw exactly K train indices per class without replacement
(classes smaller than K contribute all members, with a warning) and keep
the full test set; (dataset, k, seed) fully determines the split.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from .errors import LoadError, ValidationError
from .geometry import PointCloud

DEFAULT_N_POINTS = 1024
MIN_POINTS = 128

DATASET_KINDS = ("modelnet40", "scanobjectnn_pb_t50_rs", "shapenet16", "synthetic")

SCANOBJECTNN_CLASSES = [
    "bag", "bin", "box", "cabinet", "chair", "desk", "display", "door",
    "shelf", "table", "bed", "pillow", "sink", "sofa", "toilet",
]


@dataclass
class Dataset:
    """Labeled point clouds with train/test tags."""

    clouds: List[PointCloud]
    class_names: List[str]
    split: np.ndarray  # array of "train"/"test" tags, one per cloud

    def __post_init__(self):
        self.split = np.asarray(self.split)
        if len(self.clouds) != self.split.size:
            raise ValidationError(
                f"{len(self.clouds)} clouds but {self.split.size} split tags"
            )
        bad_tags = set(np.unique(self.split)) - {"train", "test"}
        if bad_tags:
            raise ValidationError(f"unknown split tags: {sorted(bad_tags)}")
        n_classes = len(self.class_names)
        for i, cloud in enumerate(self.clouds):
            if cloud.label is None or not 0 <= cloud.label < n_classes:
                raise ValidationError(f"cloud {i} has label {cloud.label}, outside class range")
            if cloud.n_points < MIN_POINTS:
                raise ValidationError(
                    f"cloud {i} has {cloud.n_points} points, below the minimum {MIN_POINTS}"
                )

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)

    def indices(self, tag: str) -> np.ndarray:
        return np.nonzero(self.split == tag)[0]

    def __len__(self) -> int:
        return len(self.clouds)


@dataclass
class FewShotSplit:
    """Per-class K-shot train indices plus the full test index set."""

    k: int
    per_class: Dict[int, np.ndarray]
    test_indices: np.ndarray
    seed: int

    @property
    def train_indices(self) -> np.ndarray:
        if not self.per_class:
            return np.array([], dtype=np.int64)
        return np.concatenate([self.per_class[c] for c in sorted(self.per_class)])


def resample_points(coords: np.ndarray, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Subsample without replacement, or pad by resampling with replacement."""
    n = coords.shape[0]
    if n >= n_points:
        keep = rng.choice(n, size=n_points, replace=False)
        return coords[keep]
    extra = rng.choice(n, size=n_points - n, replace=True)
    return np.concatenate([coords, coords[extra]], axis=0)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def _sphere(n: int, rng) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v


def _ellipsoid(n: int, rng) -> np.ndarray:
    return _sphere(n, rng) * np.array([1.0, 0.55, 0.35])


def _cube(n: int, rng) -> np.ndarray:
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    for i in range(n):
        others = [a for a in range(3) if a != axis[i]]
        pts[i, axis[i]] = sign[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return pts * 0.7


def _cylinder(n: int, rng) -> np.ndarray:
    # side plus caps, axis +y
    n_side = int(n * 0.7)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    y = rng.uniform(-1.0, 1.0, size=n)
    r = np.full(n, 0.5)
    r_cap = 0.5 * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    r[n_side:] = r_cap[n_side:]
    y[n_side:] = np.where(rng.uniform(size=n - n_side) < 0.5, -1.0, 1.0)
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def _cone(n: int, rng) -> np.ndarray:
    # lateral surface plus base disc, apex at +y
    n_side = int(n * 0.75)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    t = np.sqrt(rng.uniform(0.0, 1.0, size=n))  # uniform over lateral area
    radius = 0.7 * t
    y = 1.0 - 2.0 * t
    r_base = 0.7 * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    radius[n_side:] = r_base[n_side:]
    y[n_side:] = -1.0
    return np.stack([radius * np.cos(theta), y, radius * np.sin(theta)], axis=1)


def _torus(n: int, rng) -> np.ndarray:
    u = rng.uniform(0.0, 2.0 * np.pi, size=n)
    v = rng.uniform(0.0, 2.0 * np.pi, size=n)
    major, minor = 0.7, 0.25
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), minor * np.sin(v), ring * np.sin(u)], axis=1)


def _pyramid(n: int, rng) -> np.ndarray:
    # square base at y=-0.6, apex at (0, 0.9, 0)
    n_base = n // 5
    apex = np.array([0.0, 0.9, 0.0])
    base_corners = np.array(
        [[-0.8, -0.6, -0.8], [0.8, -0.6, -0.8], [0.8, -0.6, 0.8], [-0.8, -0.6, 0.8]]
    )
    pts = np.empty((n, 3))
    pts[:n_base] = np.stack(
        [
            rng.uniform(-0.8, 0.8, size=n_base),
            np.full(n_base, -0.6),
            rng.uniform(-0.8, 0.8, size=n_base),
        ],
        axis=1,
    )
    face = rng.integers(0, 4, size=n - n_base)
    u = rng.uniform(0.0, 1.0, size=n - n_base)
    v = rng.uniform(0.0, 1.0, size=n - n_base)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a = base_corners[face]
    b = base_corners[(face + 1) % 4]
    pts[n_base:] = a + u[:, None] * (b - a) + v[:, None] * (apex - a)
    return pts


def _plane_cross(n: int, rng) -> np.ndarray:
    # two perpendicular unit squares crossing along the y axis
    which = rng.uniform(size=n) < 0.5
    u = rng.uniform(-1.0, 1.0, size=n)
    y = rng.uniform(-1.0, 1.0, size=n)
    pts = np.zeros((n, 3))
    pts[:, 1] = y
    pts[which, 0] = u[which]
    pts[~which, 2] = u[~which]
    return pts


PRIMITIVES: Dict[str, Callable] = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "pyramid": _pyramid,
    "ellipsoid": _ellipsoid,
    "plane-cross": _plane_cross,
}


def sample_primitive(name: str, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Raw surface sample of one primitive, before any instance transform."""
    if name not in PRIMITIVES:
        raise ValidationError(f"unknown primitive {name!r}; available: {sorted(PRIMITIVES)}")
    return PRIMITIVES[name](n_points, rng)


def make_synthetic(
    n_classes: int = 8,
    per_class: int = 40,
    n_points: int = DEFAULT_N_POINTS,
    seed: int = 0,
    train_fraction: float = 0.75,
) -> Dataset:
    """Seeded corpus of parametric primitives with instance scale/rotation/jitter.

    Per class, the first ceil(train_fraction * per_class) instances are
    tagged train and the rest test.
    """
    if n_classes < 2:
        raise ValidationError(f"n_classes must be >= 2, got {n_classes}")
    if n_classes > len(PRIMITIVES):
        raise ValidationError(
            f"n_classes={n_classes} exceeds the {len(PRIMITIVES)} available primitives"
        )
    if n_points < MIN_POINTS:
        raise ValidationError(f"n_points must be >= {MIN_POINTS}, got {n_points}")
    rng = np.random.default_rng(seed)
    names = list(PRIMITIVES)[:n_classes]
    n_train = int(np.ceil(train_fraction * per_class))
    clouds, tags = [], []
    for label, name in enumerate(names):
        for i in range(per_class):
            pts = sample_primitive(name, n_points, rng)
            scale = rng.uniform(0.8, 1.2)
            azimuth = rng.uniform(0.0, 2.0 * np.pi)
            tilt = rng.uniform(-0.2, 0.2)
            ca, sa = np.cos(azimuth), np.sin(azimuth)
            ct, st = np.cos(tilt), np.sin(tilt)
            rot_y = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
            rot_x = np.array([[1.0, 0.0, 0.0], [0.0, ct, -st], [0.0, st, ct]])
            pts = (pts * scale) @ (rot_y @ rot_x).T
            pts = pts + rng.normal(scale=0.01, size=pts.shape)
            clouds.append(PointCloud(pts, label))
            tags.append("train" if i < n_train else "test")
    return Dataset(clouds, names, np.array(tags))


# ---------------------------------------------------------------------------
# on-disk loaders
# ---------------------------------------------------------------------------

def _read_h5_pairs(files: list[Path], n_points: int, rng, tag: str, clouds, tags):
    import h5py

    for path in files:
        try:
            with h5py.File(path, "r") as f:
                data = np.asarray(f["data"], dtype=np.float64)
                labels = np.asarray(f["label"]).reshape(-1).astype(np.int64)
        except (OSError, KeyError) as exc:
            raise LoadError(f"cannot read HDF5 archive {path}: {exc}") from exc
        if data.ndim != 3 or data.shape[2] < 3 or data.shape[0] != labels.size:
            raise LoadError(f"archive {path} has unexpected shapes {data.shape}/{labels.shape}")
        for coords, label in zip(data[..., :3], labels):
            clouds.append(PointCloud(resample_points(coords, n_points, rng), int(label)))
            tags.append(tag)


def _load_hdf5_dataset(
    root: Path,
    train_glob: str,
    test_glob: str,
    class_names: list[str] | None,
    n_points: int,
    seed: int,
) -> Dataset:
    train_files = sorted(root.glob(train_glob))
    test_files = sorted(root.glob(test_glob))
    if not train_files or not test_files:
        raise LoadError(
            f"no archives matching {train_glob!r}/{test_glob!r} under {root}"
        )
    rng = np.random.default_rng(seed)
    clouds, tags = [], []
    _read_h5_pairs(train_files, n_points, rng, "train", clouds, tags)
    _read_h5_pairs(test_files, n_points, rng, "test", clouds, tags)
    if class_names is None:
        n_classes = int(max(c.label for c in clouds)) + 1
        class_names = [f"class_{i:02d}" for i in range(n_classes)]
    return Dataset(clouds, class_names, np.array(tags))


def _load_modelnet40(root: Path, n_points: int, seed: int) -> Dataset:
    names_file = root / "shape_names.txt"
    class_names = None
    if names_file.exists():
        class_names = [line.strip() for line in names_file.read_text().splitlines() if line.strip()]
    return _load_hdf5_dataset(root, "**/*train*.h5", "**/*test*.h5", class_names, n_points, seed)


def _load_scanobjectnn(root: Path, n_points: int, seed: int) -> Dataset:
    return _load_hdf5_dataset(
        root, "**/*training*.h5", "**/*test*.h5", SCANOBJECTNN_CLASSES, n_points, seed
    )


def _load_shapenet16(root: Path, n_points: int, seed: int) -> Dataset:
    mapping_file = root / "synsetoffset2category.txt"
    if not mapping_file.exists():
        raise LoadError(f"category mapping not found: {mapping_file}")
    synset_to_name = {}
    for line in mapping_file.read_text().splitlines():
        parts = line.split()
        if len(parts) == 2:
            synset_to_name[parts[1]] = parts[0]
    if not synset_to_name:
        raise LoadError(f"category mapping {mapping_file} is empty")
    class_names = sorted(synset_to_name.values())
    name_to_label = {n: i for i, n in enumerate(class_names)}

    split_dir = root / "train_test_split"
    split_of: dict[str, str] = {}
    for tag, fname in (("train", "shuffled_train_file_list.json"),
                       ("test", "shuffled_test_file_list.json")):
        split_file = split_dir / fname
        if split_file.exists():
            try:
                entries = json.loads(split_file.read_text())
            except json.JSONDecodeError as exc:
                raise LoadError(f"cannot parse split file {split_file}: {exc}") from exc
            for entry in entries:
                synset, obj_id = entry.split("/")[-2:]
                split_of[f"{synset}/{obj_id}"] = tag

    rng = np.random.default_rng(seed)
    clouds, tags = [], []
    for synset, name in sorted(synset_to_name.items()):
        points_dir = root / synset / "points"
        if not points_dir.is_dir():
            points_dir = root / synset
        files = sorted(points_dir.glob("*.pts")) + sorted(points_dir.glob("*.txt"))
        if not files:
            raise LoadError(f"no point files under {points_dir}")
        for idx, path in enumerate(files):
            try:
                coords = np.loadtxt(path, dtype=np.float64)
            except (OSError, ValueError) as exc:
                raise LoadError(f"cannot read point file {path}: {exc}") from exc
            if coords.ndim == 1:
                coords = coords.reshape(1, -1)
            key = f"{synset}/{path.stem}"
            if split_of:
                tag = split_of.get(key)
                if tag is None:
                    continue
            else:
                tag = "train" if idx % 5 != 4 else "test"  # deterministic 80/20 fallback
            clouds.append(
                PointCloud(resample_points(coords[:, :3], n_points, rng), name_to_label[name])
            )
            tags.append(tag)
    if not clouds:
        raise LoadError(f"no point clouds found under {root}")
    return Dataset(clouds, class_names, np.array(tags))


def load_dataset(
    kind: str,
    root=None,
    n_points: int = DEFAULT_N_POINTS,
    seed: int = 0,
    synthetic_classes: int = 8,
    synthetic_per_class: int = 40,
) -> Dataset:
    """Load one of the supported dataset kinds.

    ``synthetic`` ignores ``root`` and generates the corpus from the seed;
    the other kinds read from disk and raise LoadError naming any missing
    or corrupt file.
    """
    if kind not in DATASET_KINDS:
        raise ValidationError(f"unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")
    if n_points < MIN_POINTS:
        raise ValidationError(f"n_points must be >= {MIN_POINTS}, got {n_points}")
    if kind == "synthetic":
        return make_synthetic(synthetic_classes, synthetic_per_class, n_points, seed)
    if root is None:
        raise ValidationError(f"dataset kind {kind!r} requires a root directory")
    root = Path(root)
    if not root.is_dir():
        raise LoadError(f"dataset root not found: {root}")
    if kind == "modelnet40":
        return _load_modelnet40(root, n_points, seed)
    if kind == "scanobjectnn_pb_t50_rs":
        return _load_scanobjectnn(root, n_points, seed)
    return _load_shapenet16(root, n_points, seed)


def kshot_split(ds: Dataset, k: int, seed: int) -> FewShotSplit:
    """Draw K train examples per class without replacement, seed-deterministic."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    labels = ds.labels
    train_pool = ds.indices("train")
    per_class: Dict[int, np.ndarray] = {}
    for cls in range(len(ds.class_names)):
        members = train_pool[labels[train_pool] == cls]
        if members.size < k:
            warnings.warn(
                f"class {cls} has only {members.size} train members for k={k}; taking all"
            )
            chosen = members.copy()
        else:
            chosen = rng.choice(members, size=k, replace=False)
        per_class[cls] = np.sort(chosen)
    return FewShotSplit(k, per_class, ds.indices("test"), seed)
