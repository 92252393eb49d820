"""Synthetic "colored shapes" scenes: sampling, rasterization, and a blob detector.

The detector is deliberately model-free (color quantization, 4-connected
components, fill-ratio shape bands) so it can judge generated images without
sharing anything with the denoiser.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff.serialize import load_array, save_array
from .diffusion.vocab import COLORS, PAD, PROMPT_LEN, SHAPES, WORD_TO_ID, PromptSpec

SIZE = 32
RADIUS_RANGE = (0.12, 0.2)
# palette in [0, 1] RGB; images live in [-1, 1]
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
BACKGROUND = -1.0
# minimum gap between object bounding boxes, so distinct objects never touch
GAP = 1.0 / SIZE

MIN_BLOB = 8
COLOR_THRESHOLD = 0.5
CIRCLE_FILL, CIRCLE_TOL = math.pi / 4, 0.12
TRIANGLE_FILL, TRIANGLE_TOL = 0.5, 0.12
SQUARE_MIN_FILL = 0.9


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    center: tuple
    radius: float

    def extent(self) -> tuple:
        cx, cy = self.center
        r = self.radius
        return cx - r, cy - r, cx + r, cy + r

    @property
    def centroid(self) -> tuple:
        """Area centroid; for the upward triangle it sits a third of the radius below the center."""
        cx, cy = self.center
        if self.shape == "triangle":
            return cx, cy + self.radius / 3.0
        return cx, cy


@dataclass(frozen=True)
class Scene:
    objects: tuple = ()

    def to_dict(self) -> dict:
        return {"objects": [asdict(o) | {"center": list(o.center)} for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(tuple(SceneObject(o["shape"], o["color"], tuple(o["center"]), float(o["radius"]))
                         for o in d["objects"]))


def _separated(a: SceneObject, b: SceneObject) -> bool:
    ax0, ay0, ax1, ay1 = a.extent()
    bx0, by0, bx1, by1 = b.extent()
    apart_x = ax1 + GAP < bx0 or bx1 + GAP < ax0
    apart_y = ay1 + GAP < by0 or by1 + GAP < ay0
    dist = math.dist(a.center, b.center)
    return (apart_x or apart_y) and dist > a.radius + b.radius


def caption(scene: Scene) -> PromptSpec:
    ids, subjects, bindings = [], [], {}
    for k, obj in enumerate(scene.objects):
        if k:
            ids.append(WORD_TO_ID["and"])
        bindings[len(ids) + 1] = len(ids)
        ids.append(WORD_TO_ID[obj.color])
        subjects.append(len(ids))
        ids.append(WORD_TO_ID[obj.shape])
    ids += [PAD] * (PROMPT_LEN - len(ids))
    return PromptSpec(tuple(ids), tuple(subjects), bindings)


def sample_object(rng: np.random.Generator, shape=None, color=None) -> SceneObject:
    shape = shape or SHAPES[rng.integers(len(SHAPES))]
    color = color or COLORS[rng.integers(len(COLORS))]
    r = float(rng.uniform(*RADIUS_RANGE))
    cx, cy = (float(v) for v in rng.uniform(r, 1.0 - r, size=2))
    if shape == "triangle":
        # a lattice-aligned base row keeps the rasterized fill ratio inside the triangle band
        cy = round(cy * SIZE) / SIZE
        if cy - r < 0:
            cy += 1.0 / SIZE
        elif cy + r > 1:
            cy -= 1.0 / SIZE
    return SceneObject(shape, color, (cx, cy), r)


def generate_scene(rng: np.random.Generator, n_objects=None, max_tries: int = 1000) -> tuple[Scene, PromptSpec]:
    """Sample one or two non-overlapping objects and their caption."""
    n = int(n_objects) if n_objects is not None else int(rng.integers(1, 3))
    first = sample_object(rng)
    if n == 1:
        scene = Scene((first,))
        return scene, caption(scene)
    for _ in range(max_tries):
        second = sample_object(rng)
        if _separated(first, second):
            scene = Scene((first, second))
            return scene, caption(scene)
    raise RuntimeError(f"could not place a second object after {max_tries} tries")


def place_objects(rng: np.random.Generator, specs, max_tries: int = 1000) -> Scene:
    """Scene with the given (shape, color) pairs at random non-overlapping positions."""
    for _ in range(max_tries):
        objs = [sample_object(rng, s, c) for s, c in specs]
        if all(_separated(a, b) for i, a in enumerate(objs) for b in objs[i + 1:]):
            return Scene(tuple(objs))
    raise RuntimeError(f"could not place {len(specs)} objects after {max_tries} tries")


_centers = (np.arange(SIZE) + 0.5) / SIZE
_PX, _PY = np.meshgrid(_centers, _centers)  # [row, col] -> x, y


def object_mask(obj: SceneObject) -> np.ndarray:
    cx, cy = obj.center
    r = obj.radius
    dx, dy = _PX - cx, _PY - cy
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if obj.shape == "triangle":
        # apex (cx, cy - r), base from (cx - r, cy + r) to (cx + r, cy + r)
        return (dy <= r) & (2.0 * np.abs(dx) <= dy + r)
    raise ValueError(f"unknown shape {obj.shape!r}")


def render(scene: Scene, dtype=np.float32) -> np.ndarray:
    img = np.full((SIZE, SIZE, 3), BACKGROUND, dtype=dtype)
    for obj in scene.objects:
        img[object_mask(obj)] = np.array(PALETTE[obj.color], dtype=dtype) * 2 - 1
    return img


# ---------------------------------------------------------------- detection

@dataclass(frozen=True)
class Blob:
    color: str
    shape: str
    centroid: tuple
    bbox: tuple
    pixel_count: int

    def to_dict(self) -> dict:
        return {"color": self.color, "shape": self.shape, "centroid": list(self.centroid),
                "bbox": list(self.bbox), "pixel_count": self.pixel_count}


@dataclass(frozen=True)
class Detection:
    blobs: tuple = field(default_factory=tuple)

    def find(self, shape=None, color=None) -> list[Blob]:
        return [b for b in self.blobs if (shape is None or b.shape == shape) and (color is None or b.color == color)]

    def to_dict(self) -> dict:
        return {"blobs": [b.to_dict() for b in self.blobs]}


_PALETTE_ARR = np.array([(0.0, 0.0, 0.0)] + [PALETTE[c] for c in COLORS])
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def quantize(image: np.ndarray) -> np.ndarray:
    """Per-pixel label: 0 background, k >= 1 for COLORS[k - 1]."""
    rgb = (np.asarray(image, dtype=np.float64) + 1.0) / 2.0
    d = np.linalg.norm(rgb[:, :, None, :] - _PALETTE_ARR[None, None], axis=-1)
    labels = d.argmin(axis=-1)
    labels[d.min(axis=-1) > COLOR_THRESHOLD] = 0
    return labels


def classify_fill(fill: float) -> str:
    if fill >= SQUARE_MIN_FILL:
        return "square"
    if abs(fill - CIRCLE_FILL) <= CIRCLE_TOL:
        return "circle"
    if abs(fill - TRIANGLE_FILL) <= TRIANGLE_TOL:
        return "triangle"
    return "unknown"


def detect(image: np.ndarray) -> Detection:
    labels = quantize(image)
    blobs = []
    for k, color in enumerate(COLORS, start=1):
        comp, n = ndimage.label(labels == k, structure=_FOUR_CONNECTED)
        for idx in range(1, n + 1):
            rows, cols = np.nonzero(comp == idx)
            count = rows.size
            if count < MIN_BLOB:
                continue
            r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
            fill = count / float((r1 - r0 + 1) * (c1 - c0 + 1))
            centroid = ((cols.mean() + 0.5) / SIZE, (rows.mean() + 0.5) / SIZE)
            bbox = (c0 / SIZE, r0 / SIZE, (c1 + 1) / SIZE, (r1 + 1) / SIZE)
            blobs.append(Blob(color, classify_fill(fill), tuple(float(v) for v in centroid),
                              tuple(float(v) for v in bbox), int(count)))
    return Detection(tuple(blobs))


def match_objects(scene: Scene, det: Detection, tol_px: float = 1.5) -> list[bool]:
    """For each scene object: was a blob of the same color and shape found within ``tol_px`` of its centroid?"""
    out = []
    for obj in scene.objects:
        cx, cy = obj.centroid
        ok = any(math.dist((cx * SIZE, cy * SIZE), (b.centroid[0] * SIZE, b.centroid[1] * SIZE)) <= tol_px
                 for b in det.find(obj.shape, obj.color))
        out.append(ok)
    return out


# ---------------------------------------------------------------- dataset export

def make_dataset(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Images (n, 32, 32, 3), token ids (n, 8) and per-item scene/prompt records."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, SIZE, SIZE, 3), dtype=np.float32)
    ids = np.empty((n, PROMPT_LEN), dtype=np.int64)
    records = []
    for i in range(n):
        scene, prompt = generate_scene(rng)
        images[i] = render(scene)
        ids[i] = prompt.ids
        records.append({"scene": scene.to_dict(), "prompt": prompt.to_dict()})
    return images, ids, records


def export_dataset(path, n: int, seed: int, shard_size: int = 4096) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images, ids, records = make_dataset(n, seed)
    shards = []
    for s, start in enumerate(range(0, n, shard_size)):
        name = f"shard_{s:03d}"
        save_array(path / name, images[start:start + shard_size])
        shards.append({"file": name, "start": start, "count": int(min(shard_size, n - start))})
    index = {"n": n, "seed": seed, "shards": shards, "records": records}
    (path / "index.json").write_text(json.dumps(index))
    return path


def load_dataset(path) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    path = Path(path)
    index = json.loads((path / "index.json").read_text())
    images = np.concatenate([load_array(path / sh["file"]) for sh in index["shards"]], axis=0)
    records = index["records"]
    ids = np.array([r["prompt"]["token_ids"] for r in records], dtype=np.int64)
    return images, ids, records


def write_detections(path, detections) -> None:
    with open(path, "w") as fh:
        for det in detections:
            fh.write(json.dumps(det.to_dict()) + "\n")
