"""Dataset I/O and the synthetic RGB-D glass-scene generator.

On-disk layout (one directory per sample):

    root/{train,val,test,difficult}/<id>/rgb.png    8-bit RGB
    root/{train,val,test,difficult}/<id>/depth.png  16-bit grayscale, millimeters, 0 = missing
    root/{train,val,test,difficult}/<id>/mask.png   8-bit, values exactly {0, 255}
    root/tags.json                                  optional id -> [tags]
    root/splits/<name>.txt                          optional derived splits (one id per line)

Synthetic corpora are written in the same layout plus a recipe.json per
sample.  Generation is a pure function of the recipe: the same recipe
always produces byte-identical images.

The generated scenes carry the signal that makes depth worth fusing:
glass panes are regions where the depth readings break down (missing
values, wild readings, or background bleed-through), while their RGB
appearance ranges from clearly framed to nearly invisible."""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "DatasetError",
    "RgbdSample",
    "SceneRecipe",
    "DatasetManifest",
    "DIFFICULTIES",
    "DEPTH_MIN_MM",
    "DEPTH_MAX_MM",
    "normalize_depth",
    "denormalize_depth",
    "load_sample",
    "save_sample",
    "random_recipe",
    "synth_scene",
    "synth_scene_with_info",
    "build_manifest",
    "make_corpus",
    "atomic_write_bytes",
]

DIFFICULTIES = ("easy", "bright", "dark", "transparent", "cluttered")
SPLIT_DIRS = ("train", "val", "test", "difficult")

DEPTH_MIN_MM = 250
DEPTH_MAX_MM = 2500
_DEPTH_SPAN = float(DEPTH_MAX_MM - DEPTH_MIN_MM)
_DEPTH_EPS = 1e-4  # value assigned to readings at exactly the near limit
_MIN_SCENE_SIDE = 16


class DatasetError(ValueError):
    """Raised for unreadable, inconsistent, or incomplete dataset files."""


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write a file via temp + rename so failures leave no partial output."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------


@dataclass
class RgbdSample:
    """One aligned RGB/depth/mask triple, normalized to training ranges."""

    rgb: np.ndarray  # [3,H,W] float32 in [0,1]
    depth: np.ndarray  # [1,H,W] float32 in [0,1], 0 = missing reading
    mask: np.ndarray  # [H,W] uint8, 1 = glass
    id: str = ""
    tags: set[str] = field(default_factory=set)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


def normalize_depth(raw_mm):
    """Map raw millimeter readings to [0,1]; 0 stays 0 as the missing sentinel.

    Readings are clamped to the sensor working range [250, 2500] mm and
    scaled linearly; a reading at exactly the near limit maps to a small
    positive value so it stays distinguishable from missing.
    """
    arr = np.asarray(raw_mm, dtype=np.float64)
    if (arr < 0).any():
        raise ValueError("depth readings must be non-negative")
    out = (np.clip(arr, DEPTH_MIN_MM, DEPTH_MAX_MM) - DEPTH_MIN_MM) / _DEPTH_SPAN
    out = np.where(out == 0.0, _DEPTH_EPS, out)
    out = np.where(arr == 0, 0.0, out).astype(np.float32)
    return float(out) if np.isscalar(raw_mm) else out


def denormalize_depth(normalized) -> np.ndarray:
    """Inverse of normalize_depth back to integer millimeters."""
    d = np.asarray(normalized, dtype=np.float64)
    mm = np.rint(d * _DEPTH_SPAN + DEPTH_MIN_MM)
    return np.where(d == 0.0, 0, mm).astype(np.uint16)


def _open_image(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except FileNotFoundError:
        raise DatasetError(f"{path}: file not found")
    except Exception as exc:  # PIL raises a zoo of types for corrupt files
        raise DatasetError(f"{path}: unreadable image ({exc})")


def load_sample(rgb_path, depth_path, mask_path, sample_id: str = "", tags=()) -> RgbdSample:
    """Load and validate one sample triple from disk."""
    rgb_path, depth_path, mask_path = Path(rgb_path), Path(depth_path), Path(mask_path)

    rgb_img = _open_image(rgb_path)
    if rgb_img.mode != "RGB":
        raise DatasetError(f"{rgb_path}: expected 8-bit 3-channel RGB, got mode {rgb_img.mode!r}")
    rgb_u8 = np.asarray(rgb_img, dtype=np.uint8)

    depth_img = _open_image(depth_path)
    if depth_img.mode not in ("I", "I;16"):
        raise DatasetError(f"{depth_path}: expected 16-bit grayscale, got mode {depth_img.mode!r}")
    depth_raw = np.asarray(depth_img, dtype=np.int64)
    if depth_raw.ndim != 2 or depth_raw.min() < 0 or depth_raw.max() > 0xFFFF:
        raise DatasetError(f"{depth_path}: depth values outside the 16-bit range")

    mask_img = _open_image(mask_path)
    if mask_img.mode != "L":
        raise DatasetError(f"{mask_path}: expected 8-bit grayscale mask, got mode {mask_img.mode!r}")
    mask_u8 = np.asarray(mask_img, dtype=np.uint8)
    bad = np.unique(mask_u8[(mask_u8 != 0) & (mask_u8 != 255)])
    if bad.size:
        raise DatasetError(f"{mask_path}: mask must contain only {{0,255}}, found {bad[:8].tolist()}")

    shapes = {rgb_u8.shape[:2], depth_raw.shape, mask_u8.shape}
    if len(shapes) != 1:
        raise DatasetError(
            f"dimension mismatch across {rgb_path.name}/{depth_path.name}/{mask_path.name}: "
            f"rgb {rgb_u8.shape[:2]}, depth {depth_raw.shape}, mask {mask_u8.shape}"
        )

    return RgbdSample(
        rgb=(rgb_u8.astype(np.float32) / 255.0).transpose(2, 0, 1),
        depth=normalize_depth(depth_raw)[None, :, :],
        mask=(mask_u8 >= 128).astype(np.uint8),
        id=sample_id,
        tags=set(tags),
    )


def load_rgb(path) -> np.ndarray:
    """Load a standalone RGB image to [3,H,W] float32 in [0,1]."""
    path = Path(path)
    img = _open_image(path)
    if img.mode != "RGB":
        raise DatasetError(f"{path}: expected 8-bit 3-channel RGB, got mode {img.mode!r}")
    return (np.asarray(img, dtype=np.uint8).astype(np.float32) / 255.0).transpose(2, 0, 1)


def load_depth(path) -> np.ndarray:
    """Load a standalone 16-bit depth image to normalized [1,H,W] float32."""
    path = Path(path)
    img = _open_image(path)
    if img.mode not in ("I", "I;16"):
        raise DatasetError(f"{path}: expected 16-bit grayscale depth, got mode {img.mode!r}")
    raw = np.asarray(img, dtype=np.int64)
    if raw.ndim != 2 or raw.min() < 0 or raw.max() > 0xFFFF:
        raise DatasetError(f"{path}: depth values outside the 16-bit range")
    return normalize_depth(raw)[None, :, :]


def save_sample(sample: RgbdSample, directory, recipe: "SceneRecipe | None" = None) -> None:
    """Write a sample back to one directory in the on-disk layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgb_u8 = np.rint(sample.rgb.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    depth_u16 = denormalize_depth(sample.depth[0])
    mask_u8 = (sample.mask.astype(np.uint8) * 255).astype(np.uint8)
    atomic_write_bytes(directory / "rgb.png", _encode_png(Image.fromarray(rgb_u8, mode="RGB")))
    atomic_write_bytes(directory / "depth.png", _encode_png(Image.fromarray(depth_u16, mode="I;16")))
    atomic_write_bytes(directory / "mask.png", _encode_png(Image.fromarray(mask_u8, mode="L")))
    if recipe is not None:
        atomic_write_bytes(
            directory / "recipe.json",
            json.dumps(asdict(recipe), sort_keys=True, indent=1).encode(),
        )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneRecipe:
    """Everything that determines a synthetic scene, byte for byte."""

    seed: int
    size: tuple[int, int] = (64, 64)
    pane_count: int = 1
    difficulty: str = "easy"
    depth_dropout_rate: float = 0.4
    glare_intensity: float = 0.2

    def __post_init__(self):
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"difficulty must be one of {DIFFICULTIES}, got {self.difficulty!r}")
        if not 1 <= self.pane_count <= 4:
            raise ValueError(f"pane_count must be in 1..4, got {self.pane_count}")
        if not 0.0 <= self.depth_dropout_rate <= 1.0 or not 0.0 <= self.glare_intensity <= 1.0:
            raise ValueError("depth_dropout_rate and glare_intensity must be in [0,1]")


# per-difficulty draw ranges: (dropout lo/hi, glare lo/hi)
_DIFFICULTY_RANGES = {
    "easy": ((0.30, 0.50), (0.05, 0.30)),
    "bright": ((0.75, 0.90), (0.60, 0.90)),
    "dark": ((0.30, 0.50), (0.00, 0.15)),
    "transparent": ((0.40, 0.70), (0.05, 0.25)),
    "cluttered": ((0.30, 0.60), (0.10, 0.40)),
}


def random_recipe(rng: np.random.Generator, size=(64, 64), difficulty: str | None = None) -> SceneRecipe:
    """Draw a recipe whose knobs respect the difficulty presets."""
    if difficulty is None:
        difficulty = DIFFICULTIES[rng.integers(len(DIFFICULTIES))]
    (d_lo, d_hi), (g_lo, g_hi) = _DIFFICULTY_RANGES[difficulty]
    return SceneRecipe(
        seed=int(rng.integers(2**63)),
        size=(int(size[0]), int(size[1])),
        pane_count=int(rng.integers(1, 5)),
        difficulty=difficulty,
        depth_dropout_rate=float(rng.uniform(d_lo, d_hi)),
        glare_intensity=float(rng.uniform(g_lo, g_hi)),
    )


def _pane_polygon_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Rasterize one axis-aligned or slightly rotated rectangular pane."""
    ph = rng.uniform(0.25, 0.45) * h
    pw = rng.uniform(0.25, 0.45) * w
    angle = 0.0 if rng.random() < 0.5 else rng.uniform(-0.17, 0.17)  # up to ~10 degrees
    # keep the rotated rectangle fully inside the image
    half_diag = 0.5 * np.hypot(ph, pw)
    if 2 * half_diag + 2 >= min(h, w):
        raise DatasetError(f"pane larger than image: pane diagonal {2 * half_diag:.0f} in {h}x{w}")
    cy = rng.uniform(half_diag + 1, h - half_diag - 1)
    cx = rng.uniform(half_diag + 1, w - half_diag - 1)
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    corners = []
    for sy, sx in ((-1, -1), (-1, 1), (1, 1), (1, -1)):
        dy, dx = sy * ph / 2, sx * pw / 2
        corners.append((cy + dy * cos_a - dx * sin_a, cx + dy * sin_a + dx * cos_a))
    ys, xs = np.mgrid[0:h, 0:w]
    inside = np.ones((h, w), dtype=bool)
    for (y1, x1), (y2, x2) in zip(corners, corners[1:] + corners[:1]):
        inside &= (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1) >= 0
    return inside


def _pane_frame(pane: np.ndarray) -> np.ndarray:
    """One-pixel outline just inside the pane."""
    interior = pane.copy()
    interior[1:, :] &= pane[:-1, :]
    interior[:-1, :] &= pane[1:, :]
    interior[:, 1:] &= pane[:, :-1]
    interior[:, :-1] &= pane[:, 1:]
    return pane & ~interior


def synth_scene_with_info(recipe: SceneRecipe) -> tuple[RgbdSample, dict]:
    """Generate one scene; also return generator-side ground truth for tests.

    The info dict records which depth pixels were made anomalous
    (missing or wild readings), which only the generator knows exactly.
    """
    h, w = recipe.size
    if h < _MIN_SCENE_SIDE or w < _MIN_SCENE_SIDE:
        raise DatasetError(f"scene size {h}x{w} too small: panes larger than image below {_MIN_SCENE_SIDE}px")
    rng = np.random.Generator(np.random.PCG64(recipe.seed))
    diff = recipe.difficulty

    # background appearance: two-color gradient
    c0 = rng.uniform(0.15, 0.85, size=3)
    c1 = rng.uniform(0.15, 0.85, size=3)
    ys, xs = np.mgrid[0:h, 0:w]
    t = (ys / max(h - 1, 1) + xs / max(w - 1, 1)) / 2.0
    rgb = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    # background depth: far plane receding top to bottom, in millimeters
    far_top = rng.uniform(2100, DEPTH_MAX_MM)
    far_bottom = rng.uniform(1500, far_top)
    depth_mm = far_top + (far_bottom - far_top) * (ys / max(h - 1, 1))

    # textured rectangles: clutter in front of the far plane
    rect_count = int(rng.integers(6, 10)) if diff == "cluttered" else int(rng.integers(1, 5))
    for _ in range(rect_count):
        rh = int(rng.uniform(0.10, 0.30) * h)
        rw = int(rng.uniform(0.10, 0.30) * w)
        ry = int(rng.integers(0, max(h - rh, 1)))
        rx = int(rng.integers(0, max(w - rw, 1)))
        color = rng.uniform(0.05, 0.95, size=3)
        texture = rng.normal(0.0, rng.uniform(0.02, 0.08), size=(rh, rw))
        rgb[:, ry : ry + rh, rx : rx + rw] = color[:, None, None] + texture
        depth_mm[ry : ry + rh, rx : rx + rw] = rng.uniform(1000, 2400)

    # glass panes: union capped so scenes keep visible background
    mask = np.zeros((h, w), dtype=bool)
    panes: list[np.ndarray] = []
    for _ in range(recipe.pane_count):
        pane = _pane_polygon_mask(rng, h, w)
        if panes and (mask | pane).mean() > 0.55:
            continue
        panes.append(pane)
        mask |= pane

    transparent = diff == "transparent"
    glare_color = np.array([1.0, 1.0, 0.97])
    for pane in panes:
        # appearance: attenuate the background toward a glass tint
        atten = rng.uniform(0.96, 1.0) if transparent else rng.uniform(0.72, 0.90)
        tint = rng.uniform(0.45, 0.75, size=3)
        idx = np.where(pane)
        rgb[:, idx[0], idx[1]] = rgb[:, idx[0], idx[1]] * atten + (1 - atten) * tint[:, None]
        # glare streaks: thin additive reflections
        streaks = int(rng.integers(1, 4))
        for _ in range(streaks):
            theta = rng.uniform(0, np.pi)
            oy, ox = idx[0].mean(), idx[1].mean()
            offset = rng.uniform(-0.2, 0.2) * min(h, w)
            dist = np.abs((xs - ox) * np.sin(theta) - (ys - oy) * np.cos(theta) + offset)
            profile = np.exp(-(dist**2) / (2 * rng.uniform(1.0, 3.0) ** 2))
            rgb += recipe.glare_intensity * 0.8 * pane * profile * glare_color[:, None, None]
        # faint frame outline, suppressed on highly transparent panes
        if not transparent:
            frame = _pane_frame(pane)
            frame_color = rng.uniform(0.05, 0.25)
            alpha = rng.uniform(0.5, 0.8)
            rgb[:, frame] = rgb[:, frame] * (1 - alpha) + alpha * frame_color

    # depth inside panes: missing, wild readings, or background bleed-through
    u = rng.random((h, w))
    wild = rng.random((h, w))
    wild_values = rng.uniform(DEPTH_MIN_MM, DEPTH_MAX_MM, size=(h, w))
    noise_frac = rng.uniform(0.25, 0.5)
    missing = mask & (u < recipe.depth_dropout_rate)
    noisy = mask & ~missing & (wild < noise_frac)
    depth_mm = np.where(noisy, wild_values, depth_mm)

    # sensor imperfections outside the panes; occasional degraded-depth scenes
    degraded = rng.random() < 0.15
    outside_dropout = rng.uniform(0.04, 0.10) if degraded else rng.uniform(0.003, 0.02)
    outside_sigma = rng.uniform(20, 45) if degraded else rng.uniform(4, 12)
    missing |= ~mask & (rng.random((h, w)) < outside_dropout)
    depth_mm = depth_mm + rng.normal(0.0, outside_sigma, size=(h, w))
    depth_mm = np.clip(depth_mm, DEPTH_MIN_MM, DEPTH_MAX_MM)
    depth_mm = np.where(missing, 0, np.rint(depth_mm)).astype(np.uint16)

    # global lighting and camera noise
    if diff == "dark":
        rgb *= 0.25
    rgb += rng.normal(0.0, 0.015, size=rgb.shape)
    rgb_u8 = np.rint(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)

    sample = RgbdSample(
        rgb=rgb_u8.astype(np.float32) / 255.0,
        depth=normalize_depth(depth_mm)[None, :, :],
        mask=mask.astype(np.uint8),
        id=f"synth-{recipe.seed:016x}",
        tags={"synthetic", diff},
    )
    info = {
        "missing": missing,
        "anomaly": missing | noisy,
        "degraded_background_depth": degraded,
        "pane_count_placed": len(panes),
    }
    return sample, info


def synth_scene(recipe: SceneRecipe) -> RgbdSample:
    """Generate one synthetic scene; a pure function of the recipe."""
    return synth_scene_with_info(recipe)[0]


# ---------------------------------------------------------------------------
# manifests and corpora
# ---------------------------------------------------------------------------


@dataclass
class SampleEntry:
    id: str
    split: str
    directory: Path
    tags: set[str] = field(default_factory=set)

    def load(self) -> RgbdSample:
        return load_sample(
            self.directory / "rgb.png",
            self.directory / "depth.png",
            self.directory / "mask.png",
            sample_id=self.id,
            tags=self.tags,
        )


@dataclass
class DatasetManifest:
    root: Path
    entries: dict[str, SampleEntry]
    splits: dict[str, list[str]]

    def split_ids(self, split: str) -> list[str]:
        if split not in self.splits:
            raise DatasetError(
                f"{self.root}: split {split!r} not present (have {sorted(self.splits)})"
            )
        return self.splits[split]

    def load_split(self, split: str) -> list[RgbdSample]:
        return [self.entries[i].load() for i in self.split_ids(split)]


def build_manifest(root) -> DatasetManifest:
    """Scan a dataset root; orphaned or incomplete samples are an error.

    Sample ordering is lexicographic by id within each split.  Derived
    splits come only from explicit files under root/splits/, never from
    recomputation.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset root is not a directory")
    tags_file = root / "tags.json"
    tag_map: dict[str, list[str]] = {}
    if tags_file.exists():
        tag_map = json.loads(tags_file.read_text())

    entries: dict[str, SampleEntry] = {}
    splits: dict[str, list[str]] = {}
    orphans: list[str] = []
    for split in SPLIT_DIRS:
        split_dir = root / split
        if not split_dir.is_dir():
            continue
        ids = []
        for sample_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            present = {f for f in ("rgb.png", "depth.png", "mask.png") if (sample_dir / f).exists()}
            if len(present) < 3:
                missing = sorted({"rgb.png", "depth.png", "mask.png"} - present)
                orphans.append(f"{split}/{sample_dir.name} (missing {', '.join(missing)})")
                continue
            sid = sample_dir.name
            entries[sid] = SampleEntry(
                id=sid, split=split, directory=sample_dir, tags=set(tag_map.get(sid, ()))
            )
            ids.append(sid)
        splits[split] = ids
    if orphans:
        raise DatasetError(f"{root}: incomplete samples: " + "; ".join(orphans))

    splits_dir = root / "splits"
    if splits_dir.is_dir():
        for split_file in sorted(splits_dir.glob("*.txt")):
            ids = [line.strip() for line in split_file.read_text().splitlines() if line.strip()]
            unknown = [i for i in ids if i not in entries]
            if unknown:
                raise DatasetError(f"{split_file}: unknown sample ids: {unknown[:8]}")
            splits[split_file.stem] = ids
    return DatasetManifest(root=root, entries=entries, splits=splits)


def parse_mix(spec: str) -> dict[str, float]:
    """Parse 'easy:0.5,bright:0.2,...' into a proportion map."""
    mix: dict[str, float] = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ValueError(f"malformed difficulty mix entry {part!r}, expected name:fraction")
        name, _, frac = part.partition(":")
        name = name.strip()
        if name not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {name!r}, expected one of {DIFFICULTIES}")
        try:
            mix[name] = float(frac)
        except ValueError:
            raise ValueError(f"malformed fraction {frac!r} in difficulty mix")
    if not mix or any(v < 0 for v in mix.values()) or sum(mix.values()) <= 0:
        raise ValueError(f"difficulty mix {spec!r} must contain positive fractions")
    total = sum(mix.values())
    return {k: v / total for k, v in mix.items()}


def _apportion(total: int, fractions: dict[str, float]) -> dict[str, int]:
    """Largest-remainder rounding of fractions to integer counts."""
    raw = {k: total * v for k, v in fractions.items()}
    counts = {k: int(np.floor(v)) for k, v in raw.items()}
    leftover = total - sum(counts.values())
    order = sorted(fractions, key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[:leftover]:
        counts[k] += 1
    return counts

DEFAULT_MIX = "easy:0.35,bright:0.2,dark:0.15,transparent:0.2,cluttered:0.1"
DEFAULT_SPLITS = "train:0.7,val:0.15,test:0.15"


def parse_split_spec(spec: str) -> dict[str, float]:
    """Parse 'train:0.8,test:0.2' into split proportions."""
    out: dict[str, float] = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, frac = part.partition(":")
        name = name.strip()
        if name not in SPLIT_DIRS:
            raise ValueError(f"unknown split {name!r}, expected one of {SPLIT_DIRS}")
        try:
            out[name] = float(frac)
        except ValueError:
            raise ValueError(f"malformed fraction {frac!r} in split spec")
    if not out or any(v < 0 for v in out.values()) or sum(out.values()) <= 0:
        raise ValueError(f"split spec {spec!r} must contain positive fractions")
    total = sum(out.values())
    return {k: v / total for k, v in out.items()}


def make_corpus(
    root,
    count: int,
    seed: int,
    size=(64, 64),
    mix: str = DEFAULT_MIX,
    split_spec: str = DEFAULT_SPLITS,
) -> DatasetManifest:
    """Generate a synthetic corpus in the on-disk layout, deterministically."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    mix_fracs = parse_mix(mix)
    split_fracs = parse_split_spec(split_spec)
    difficulty_counts = _apportion(count, mix_fracs)
    split_counts = _apportion(count, split_fracs)

    difficulties: list[str] = []
    for name in DIFFICULTIES:
        difficulties.extend([name] * difficulty_counts.get(name, 0))
    shuffle_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xD1F])))
    difficulties = [difficulties[i] for i in shuffle_rng.permutation(len(difficulties))]

    split_of: list[str] = []
    for name in SPLIT_DIRS:
        split_of.extend([name] * split_counts.get(name, 0))

    tag_map: dict[str, list[str]] = {}
    for i in range(count):
        rng_i = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i])))
        recipe = random_recipe(rng_i, size=size, difficulty=difficulties[i])
        sample, _ = synth_scene_with_info(recipe)
        sample_id = f"{i:05d}"
        save_sample(sample, root / split_of[i] / sample_id, recipe=recipe)
        tag_map[sample_id] = sorted(sample.tags)
    atomic_write_bytes(root / "tags.json", json.dumps(tag_map, sort_keys=True, indent=1).encode())
    return build_manifest(root)
