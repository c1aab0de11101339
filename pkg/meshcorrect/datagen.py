"""Synthetic paired-mesh datasets: procedural scenes, a corruption model for the
low-quality mesh, viewpoint sampling along a trajectory and dataset assembly.

World frame is right-handed with z up. Every random draw flows from an explicit seed.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from tqdm import tqdm

from .camera_geometry import Intrinsics, RigidTransform, look_pose
from .errors import DataError
from .imageio import read_image, read_stack, write_image, write_stack
from .mesh import TriangleMesh, save_obj
from .rasterizer import NEAR_PLANE, MeshFeatureStack, Viewpoint, ViewLabel, rasterize, render_label

logger = logging.getLogger(__name__)

UP = np.array([0.0, 0.0, 1.0])
RIGHT_BASELINE = 2.0
TOP_HEIGHT = 25.0
SPLIT_NAMES = ("train", "val", "test")
SPLIT_MODES = ("sequential", "scene")
MANIFEST_NAME = "manifest.tsv"
MANIFEST_COLUMNS = (
    "scene",
    "location",
    "viewpoint",
    "group",
    "split",
    "lq_stack",
    "hq_stack",
    "label",
    "valid",
    "pose",
)
_MERGE_QUANTUM = 1e-6


def default_camera() -> Intrinsics:
    return Intrinsics(fx=160.0, fy=160.0, cx=144.0, cy=48.0, width=288, height=96)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    extent: float = 24.0
    resolution: float = 0.2
    boxes: int = 6
    box_size: tuple[float, float] = (2.0, 6.0)
    box_height: tuple[float, float] = (2.0, 8.0)
    panels: int = 4
    panel_length: tuple[float, float] = (2.0, 8.0)
    panel_height: tuple[float, float] = (1.5, 3.0)
    clearance: float = 4.0
    trajectory_length: float = 12.0
    camera_height: float = 1.6

    def __post_init__(self) -> None:
        if self.extent <= 0 or self.resolution <= 0:
            raise ValueError("SceneSpec extent and resolution must be positive")
        if self.boxes < 0 or self.panels < 0:
            raise ValueError("SceneSpec object counts must be non-negative")
        for name in ("box_size", "box_height", "panel_length", "panel_height"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"SceneSpec {name} must satisfy 0 < min <= max, got {(lo, hi)}")
        if self.trajectory_length <= 0 or self.trajectory_length > self.extent:
            raise ValueError("trajectory_length must be positive and fit inside the scene extent")


@dataclass(frozen=True)
class CorruptionSpec:
    noise_sigma: float = 0.05
    hole_rate: float = 0.05
    bulge_rate: float = 0.001
    bulge_amplitude: float = 0.3
    bulge_radius: float = 1.0
    spurious_rate: float = 0.0005
    spurious_size: float = 0.6

    def __post_init__(self) -> None:
        if self.noise_sigma < 0 or self.bulge_amplitude < 0:
            raise ValueError("noise_sigma and bulge_amplitude must be non-negative")
        for name in ("hole_rate", "bulge_rate", "spurious_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.bulge_radius <= 0 or self.spurious_size <= 0:
            raise ValueError("bulge_radius and spurious_size must be positive")

    @property
    def is_identity(self) -> bool:
        return (
            self.noise_sigma == 0
            and self.hole_rate == 0
            and (self.bulge_rate == 0 or self.bulge_amplitude == 0)
            and self.spurious_rate == 0
        )


@dataclass(eq=False)
class Scene:
    mesh: TriangleMesh
    low_texture: np.ndarray
    trajectory: np.ndarray


def _grid_face(origin: np.ndarray, a: np.ndarray, b: np.ndarray, na: int, nb: int):
    """Grid of ``na x nb`` cells split into two triangles each; normals along ``a x b``."""
    i, j = np.meshgrid(np.arange(na + 1), np.arange(nb + 1), indexing="ij")
    verts = origin + (i[..., None] / na) * a + (j[..., None] / nb) * b
    idx = np.arange((na + 1) * (nb + 1)).reshape(na + 1, nb + 1)
    v00, v10 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    v01, v11 = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
    tris = np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])
    return verts.reshape(-1, 3), tris


def _cells(length: float, resolution: float) -> int:
    return max(1, int(round(length / resolution)))


def _merge_vertices(vertices: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keys = np.round(vertices / _MERGE_QUANTUM).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    return vertices[first], inverse.reshape(-1)[triangles]


def box_mesh(size: Sequence[float], resolution: float) -> tuple[np.ndarray, np.ndarray]:
    """Watertight axis-aligned box with a corner at the origin and outward normals."""
    sx, sy, sz = (float(s) for s in size)
    nx, ny, nz = _cells(sx, resolution), _cells(sy, resolution), _cells(sz, resolution)
    x, y, z = np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), np.array([0, 0, sz])
    o = np.zeros(3)
    faces = [
        _grid_face(o, y, x, ny, nx),
        _grid_face(z, x, y, nx, ny),
        _grid_face(o, x, z, nx, nz),
        _grid_face(y, z, x, nz, nx),
        _grid_face(o, z, y, nz, ny),
        _grid_face(x, y, z, ny, nz),
    ]
    vertices, triangles, offset = [], [], 0
    for v, t in faces:
        vertices.append(v)
        triangles.append(t + offset)
        offset += len(v)
    return _merge_vertices(np.concatenate(vertices), np.concatenate(triangles))


def _yaw(points: np.ndarray, angle: float, pivot: np.ndarray) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return (points - pivot) @ rot.T + pivot


def _side_offset(rng: np.random.Generator, spec: SceneSpec, depth: float) -> float:
    half = spec.extent / 2
    lo = spec.clearance + depth / 2
    hi = max(half - depth / 2, lo)
    return float(rng.uniform(lo, hi) * rng.choice([-1.0, 1.0]))


def build_scene(spec: SceneSpec) -> Scene:
    """Ground plane with boxes and vertical panels kept clear of a straight trajectory along +x."""
    rng = np.random.default_rng(spec.seed)
    half = spec.extent / 2
    parts: list[tuple[np.ndarray, np.ndarray, bool]] = []
    n = _cells(spec.extent, spec.resolution)
    gv, gt = _grid_face(
        np.array([-half, -half, 0.0]), np.array([spec.extent, 0, 0]), np.array([0, spec.extent, 0]), n, n
    )
    parts.append((gv, gt, True))
    for _ in range(spec.boxes):
        sx, sy = rng.uniform(*spec.box_size, size=2)
        sz = rng.uniform(*spec.box_height)
        cx = rng.uniform(-half + sx / 2, half - sx / 2) if half > sx / 2 else 0.0
        cy = _side_offset(rng, spec, max(sx, sy))
        angle = rng.uniform(0, math.pi / 2)
        v, t = box_mesh((sx, sy, sz), spec.resolution)
        v = v + np.array([cx - sx / 2, cy - sy / 2, 0.0])
        parts.append((_yaw(v, angle, np.array([cx, cy, 0.0])), t, False))
    for _ in range(spec.panels):
        length = rng.uniform(*spec.panel_length)
        height = rng.uniform(*spec.panel_height)
        cx = rng.uniform(-half, half)
        cy = _side_offset(rng, spec, length)
        angle = rng.uniform(0, math.pi)
        v, t = _grid_face(
            np.array([cx - length / 2, cy, 0.0]),
            np.array([length, 0, 0.0]),
            np.array([0, 0, height]),
            _cells(length, spec.resolution),
            _cells(height, spec.resolution),
        )
        parts.append((_yaw(v, angle, np.array([cx, cy, 0.0])), t, True))
    vertices, triangles, flags, offset = [], [], [], 0
    for v, t, low_texture in parts:
        vertices.append(v)
        triangles.append(t + offset)
        flags.append(np.full(len(t), low_texture))
        offset += len(v)
    mesh = TriangleMesh(np.concatenate(vertices), np.concatenate(triangles))
    x = spec.trajectory_length / 2
    trajectory = np.array([[-x, 0.0, spec.camera_height], [x, 0.0, spec.camera_height]])
    return Scene(mesh, np.concatenate(flags), trajectory)


def generate_scene(spec: SceneSpec) -> TriangleMesh:
    return build_scene(spec).mesh


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def corrupt_mesh(
    hq: TriangleMesh,
    spec: CorruptionSpec,
    seed: int,
    low_texture: np.ndarray | None = None,
) -> TriangleMesh:
    """Low-quality counterpart of ``hq``: normal noise, bulges, holes and spurious patches.

    Holes are punched only in ``low_texture`` triangles when a mask is given.
    """
    if spec.is_identity:
        return TriangleMesh(hq.vertices, hq.triangles)
    noise_rng, bulge_rng, hole_rng, spur_rng = _streams(seed, 4)
    vertices = np.array(hq.vertices, copy=True)
    normals = hq.vertex_normals()
    if spec.noise_sigma > 0:
        vertices += normals * noise_rng.normal(0.0, spec.noise_sigma, size=(len(vertices), 1))
    if spec.bulge_rate > 0 and spec.bulge_amplitude > 0 and len(vertices):
        centres = np.flatnonzero(bulge_rng.random(len(vertices)) < spec.bulge_rate)
        signs = bulge_rng.choice([-1.0, 1.0], size=len(centres))
        for centre, sign in zip(centres, signs):
            d2 = np.sum((hq.vertices - hq.vertices[centre]) ** 2, axis=1)
            falloff = np.exp(-d2 / (2.0 * spec.bulge_radius**2))
            vertices += normals * (sign * spec.bulge_amplitude * falloff)[:, None]
    keep = np.ones(len(hq), dtype=bool)
    if spec.hole_rate > 0:
        eligible = np.ones(len(hq), dtype=bool) if low_texture is None else np.asarray(low_texture, dtype=bool)
        keep &= ~(eligible & (hole_rng.random(len(hq)) < spec.hole_rate))
    triangles = hq.triangles[keep]
    if spec.spurious_rate > 0 and len(hq):
        anchors = np.flatnonzero(spur_rng.random(len(hq)) < spec.spurious_rate)
        extra_v, extra_t = [], []
        base = len(vertices)
        for k, anchor in enumerate(anchors):
            centre = hq.corners[anchor].mean(axis=0) + hq.face_normals[anchor] * spur_rng.uniform(0.2, 1.0)
            a, b = np.linalg.qr(spur_rng.normal(size=(3, 2)))[0].T
            h = spec.spurious_size / 2
            quad = centre + np.array([-a - b, a - b, a + b, -a + b]) * h
            extra_v.append(quad)
            o = base + 4 * k
            extra_t.append([[o, o + 1, o + 2], [o, o + 2, o + 3]])
        if anchors.size:
            vertices = np.concatenate([vertices] + extra_v)
            triangles = np.concatenate([triangles, np.asarray(extra_t, dtype=np.int64).reshape(-1, 3)])
    return TriangleMesh.from_arrays(vertices, triangles)


@dataclass(frozen=True)
class Location:
    index: int
    position: np.ndarray = field(compare=False)
    heading: np.ndarray = field(compare=False)
    viewpoints: tuple[Viewpoint, ...] = field(compare=False)


def location_viewpoints(position: np.ndarray, heading: np.ndarray) -> tuple[Viewpoint, ...]:
    """The four views taken at one location, in FrontLeft, FrontRight, Back, Top order."""
    right = np.cross(heading, UP)
    right /= np.linalg.norm(right)
    return (
        Viewpoint(look_pose(position, heading, -UP), ViewLabel.FRONT_LEFT),
        Viewpoint(look_pose(position + RIGHT_BASELINE * right, heading, -UP), ViewLabel.FRONT_RIGHT),
        Viewpoint(look_pose(position, -heading, -UP), ViewLabel.BACK),
        Viewpoint(look_pose(position + TOP_HEIGHT * UP, -UP, -heading), ViewLabel.TOP),
    )


def sample_viewpoints(trajectory: np.ndarray, spacing: float = 0.3) -> list[Location]:
    """Locations every ``spacing`` metres of arc length along a polyline of 3-D points."""
    trajectory = np.asarray(trajectory, dtype=np.float64).reshape(-1, 3)
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    seg = np.diff(trajectory, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = float(seg_len.sum())
    if len(trajectory) < 2 or total <= 0:
        raise ValueError("trajectory has zero length")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    count = int(math.floor(total / spacing + 1e-9)) + 1
    locations = []
    for i in range(count):
        s = min(i * spacing, total)
        k = int(np.searchsorted(cum, s, side="right") - 1)
        k = min(max(k, 0), len(seg) - 1)
        while seg_len[k] == 0 and k + 1 < len(seg):
            k += 1
        heading = seg[k] / seg_len[k]
        horizontal = heading - UP * float(heading @ UP)
        heading = horizontal / np.linalg.norm(horizontal)
        position = trajectory[k] + seg[k] * ((s - cum[k]) / seg_len[k])
        locations.append(Location(i, position, heading, location_viewpoints(position, heading)))
    return locations


@dataclass(frozen=True)
class SampleRecord:
    scene: int
    location: int
    viewpoint: str
    group: str
    split: str
    lq_stack: str
    hq_stack: str
    label: str
    valid: str
    pose: RigidTransform = field(compare=False)

    def to_row(self) -> list[str]:
        return [
            str(self.scene),
            str(self.location),
            self.viewpoint,
            self.group,
            self.split,
            self.lq_stack,
            self.hq_stack,
            self.label,
            self.valid,
            ",".join(repr(x) for x in self.pose.to_list()),
        ]

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "SampleRecord":
        if len(row) != len(MANIFEST_COLUMNS):
            raise DataError(f"manifest row has {len(row)} columns, expected {len(MANIFEST_COLUMNS)}")
        try:
            pose = RigidTransform.from_list([float(x) for x in row[9].split(",")])
            return cls(int(row[0]), int(row[1]), row[2], row[3], row[4], *row[5:9], pose=pose)
        except ValueError as exc:
            raise DataError(f"bad manifest row {row[:4]}: {exc}") from exc


@dataclass
class DatasetManifest:
    camera: Intrinsics
    records: list[SampleRecord]
    root: Path = Path(".")

    def groups(self, split: str | None = None) -> dict[str, list[SampleRecord]]:
        out: dict[str, list[SampleRecord]] = {}
        for rec in self.records:
            if split is None or rec.split == split:
                out.setdefault(rec.group, []).append(rec)
        return out

    def find(self, key: str) -> SampleRecord:
        """Look up a sample by ``group/viewpoint``."""
        for rec in self.records:
            if f"{rec.group}/{rec.viewpoint}" == key:
                return rec
        raise DataError(f"no sample '{key}' in manifest")

    def split_counts(self) -> dict[str, int]:
        counts = Counter(rec.split for rec in self.records)
        return {name: counts.get(name, 0) for name in SPLIT_NAMES}

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        c = self.camera
        with path.open("w", encoding="utf-8", newline="") as handle:
            handle.write(f"# camera\t{c.fx!r}\t{c.fy!r}\t{c.cx!r}\t{c.cy!r}\t{c.width}\t{c.height}\n")
            writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
            writer.writerow(MANIFEST_COLUMNS)
            writer.writerows(rec.to_row() for rec in self.records)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        if len(lines) < 2 or not lines[0].startswith("# camera\t"):
            raise DataError(f"{path}: missing camera header")
        fields_ = lines[0].split("\t")[1:]
        try:
            camera = Intrinsics(*(float(x) for x in fields_[:4]), int(fields_[4]), int(fields_[5]))
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: bad camera header: {exc}") from exc
        rows = list(csv.reader(lines[1:], delimiter="\t"))
        if tuple(rows[0]) != MANIFEST_COLUMNS:
            raise DataError(f"{path}: unexpected manifest columns {rows[0]}")
        return cls(camera, [SampleRecord.from_row(r) for r in rows[1:] if r], path.parent)

    def summary_lines(self) -> list[str]:
        counts = self.split_counts()
        scenes = len({rec.scene for rec in self.records})
        return [
            f"Dataset | {self.root}",
            f"Scenes  | {scenes} samples: {len(self.records)} view groups: {len(self.groups())}",
            "Split   | " + " ".join(f"{name}: {len(self.groups(name))} groups" for name in SPLIT_NAMES),
            "Samples | " + " ".join(f"{name}: {counts[name]}" for name in SPLIT_NAMES),
        ]


def split_locations(n: int, scene: int, mode: str = "sequential", holdout: Iterable[int] = ()) -> list[str]:
    """Split name per location index of one scene.

    ``sequential``: first 80% train, next 10% val, rest test (counts floored).
    ``scene``: held-out scenes go entirely to test, others 90/10 train/val.
    """
    if mode not in SPLIT_MODES:
        raise ValueError(f"Unknown split mode '{mode}' (expected one of {SPLIT_MODES})")
    if mode == "scene":
        if scene in set(holdout):
            return ["test"] * n
        n_train = int(math.floor(0.9 * n))
        return ["train"] * n_train + ["val"] * (n - n_train)
    n_train = int(math.floor(0.8 * n))
    n_val = int(math.floor(0.1 * n))
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def derive_seed(seed: int, *salt: int) -> int:
    """Independent 32-bit seed for a sub-task of a seeded run."""
    return int(np.random.SeedSequence([seed, *salt]).generate_state(1)[0])


def build_dataset(
    scenes: Sequence[SceneSpec],
    camera: Intrinsics,
    out_dir: str | Path,
    corruption: CorruptionSpec = CorruptionSpec(),
    spacing: float = 0.3,
    split_mode: str = "sequential",
    holdout_scenes: Iterable[int] = (),
    near: float = NEAR_PLANE,
    progress: bool = True,
) -> DatasetManifest:
    """Render aligned lq/hq views of every scene and write files plus the manifest."""
    root = Path(out_dir)
    holdout = tuple(holdout_scenes)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc}") from exc
    records: list[SampleRecord] = []
    try:
        for s, spec in enumerate(scenes):
            scene = build_scene(spec)
            lq_mesh = corrupt_mesh(scene.mesh, corruption, derive_seed(spec.seed, 1), scene.low_texture)
            scene_dir = f"scene_{s:03d}"
            save_obj(scene.mesh, root / scene_dir / "hq.obj")
            save_obj(lq_mesh, root / scene_dir / "lq.obj")
            locations = sample_viewpoints(scene.trajectory, spacing)
            splits = split_locations(len(locations), s, split_mode, holdout)
            for loc in tqdm(locations, desc=scene_dir, disable=not progress):
                group = f"{scene_dir}/loc_{loc.index:04d}"
                for vp in loc.viewpoints:
                    stem = f"{group}_{vp.label.value}"
                    hq = rasterize(scene.mesh, camera, vp.pose, near)
                    lq = rasterize(lq_mesh, camera, vp.pose, near)
                    g, valid = render_label(hq, lq)
                    rec = SampleRecord(
                        scene=s,
                        location=loc.index,
                        viewpoint=vp.label.value,
                        group=group,
                        split=splits[loc.index],
                        lq_stack=f"{stem}.lq.stack",
                        hq_stack=f"{stem}.hq.stack",
                        label=f"{stem}.label",
                        valid=f"{stem}.valid",
                        pose=vp.pose,
                    )
                    write_stack(root / rec.lq_stack, lq)
                    write_stack(root / rec.hq_stack, hq)
                    write_image(root / rec.label, g)
                    write_image(root / rec.valid, valid)
                    records.append(rec)
        manifest = DatasetManifest(camera, records, root)
        manifest.save()
    except OSError as exc:
        raise DataError(f"cannot write dataset under {root}: {exc}") from exc
    logger.info("Wrote %d samples to %s", len(records), root)
    return manifest


@dataclass(eq=False)
class LoadedSample:
    record: SampleRecord
    lq: MeshFeatureStack
    hq: MeshFeatureStack
    label: np.ndarray
    valid: np.ndarray


def load_sample(manifest: DatasetManifest, record: SampleRecord) -> LoadedSample:
    root = manifest.root
    paths = [root / p for p in (record.lq_stack, record.hq_stack, record.label, record.valid)]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise DataError(f"sample {record.group}/{record.viewpoint} is missing {', '.join(missing)}")
    lq = read_stack(paths[0], manifest.camera, record.pose)
    hq = read_stack(paths[1], manifest.camera, record.pose)
    return LoadedSample(record, lq, hq, read_image(paths[2]), read_image(paths[3]) > 0.5)
