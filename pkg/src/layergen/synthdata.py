"""Procedural layered-scene generator and prompt vocabulary.

Each scene is a background (gradient / checker / noise / horizon) plus 1-3
foreground shapes (circle / square / triangle / star) from an 8-color palette
at three scales. Every foreground layer bakes in a soft drop shadow, offset by
0.6x the shape radius along a scene-wide light direction; the light token
appears only in the global prompt, so a layer branch can learn its shadow
direction only through the global stream. Shapes are rasterized with 4x
supersampling so alpha edges are soft rather than binary.

Token layout (sequence length 16, PAD-filled):

* global:     [BG, (COLOR, SHAPE) per layer bottom-up, LIGHT]
* per layer:  [COLOR, SHAPE, SCALE]          (no position, no light)
* background: [BG]

The subject token of a layer is its SHAPE token; its position in both the
global and the layer sequence is recorded in the prompt.

Scene attribute sampling is stratified: the first shape's (shape, color,
scale) and the light direction are drawn by stepping a fixed pseudorandom
permutation of all 384 attribute cells with the scene seed, so any 384
consecutive seeds cover every cell while individual scenes still look random.
Everything else derives from a PCG64 stream keyed by the seed alone.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .archive import load_archive, read_manifest, save_archive
from .compositing import AlphaMap, LayeredImage, RgbaLayer, RgbImage

SEQ_LEN = 16

BACKGROUND_CLASSES = ("gradient", "checker", "noise", "horizon")
SHAPE_CLASSES = ("circle", "square", "triangle", "star")
SCALE_NAMES = ("small", "medium", "large")
SCALE_RADII = {"small": 0.08, "medium": 0.14, "large": 0.22}
LIGHT_NAMES = ("NE", "NW", "SE", "SW")

# Unit offset vectors in image coordinates (x right, y down).
_S2 = 1.0 / math.sqrt(2.0)
LIGHT_VECTORS = {
    "NE": (_S2, -_S2),
    "NW": (-_S2, -_S2),
    "SE": (_S2, _S2),
    "SW": (-_S2, _S2),
}

PALETTE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.10, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "cyan": (0.10, 0.80, 0.80),
    "magenta": (0.85, 0.10, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
}
COLOR_NAMES = tuple(PALETTE)

SHADOW_ALPHA = 0.45
SHADOW_OFFSET_FACTOR = 0.6
POSITION_RANGE = (0.15, 0.85)

PAD = "PAD"
VOCAB: tuple[str, ...] = (
    (PAD,)
    + tuple(f"BG:{b}" for b in BACKGROUND_CLASSES)
    + tuple(f"COLOR:{c}" for c in COLOR_NAMES)
    + tuple(f"SHAPE:{s}" for s in SHAPE_CLASSES)
    + tuple(f"SCALE:{s}" for s in SCALE_NAMES)
    + tuple(f"LIGHT:{d}" for d in LIGHT_NAMES)
)
TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID = TOKEN_TO_ID[PAD]
VOCAB_SIZE = len(VOCAB)


class VocabularyError(ValueError):
    """Unknown scene/prompt word; carries close-match suggestions."""

    def __init__(self, word: str, field_name: str, choices):
        self.suggestions = difflib.get_close_matches(word, list(choices), n=3, cutoff=0.4)
        hint = f"; did you mean {', '.join(self.suggestions)}?" if self.suggestions else ""
        super().__init__(
            f"unknown {field_name} {word!r} (choices: {', '.join(choices)}){hint}"
        )


def light_angle(light: str) -> float:
    """Compass token -> degrees, y-down convention (NE=45, SE=315)."""
    dx, dy = LIGHT_VECTORS[light]
    return math.degrees(math.atan2(-dy, dx)) % 360.0


@dataclass(frozen=True)
class ShapeSpec:
    shape: str
    color: str
    scale: str
    center: tuple[float, float]  # fractions of canvas, (cx, cy)

    @property
    def radius(self) -> float:
        return SCALE_RADII[self.scale]


@dataclass(frozen=True)
class SceneSpec:
    background: str
    light: str
    shapes: tuple[ShapeSpec, ...]  # bottom-most first
    image_size: int = 32
    seed: int | None = None

    @property
    def k(self) -> int:
        return len(self.shapes)

    def record(self) -> dict:
        """Human-readable prompt record (the prompt-file schema)."""
        return {
            "background": self.background,
            "light": self.light,
            "layers": [
                {"color": s.color, "shape": s.shape, "scale": s.scale} for s in self.shapes
            ],
        }


@dataclass(frozen=True)
class PromptSpec:
    """Token ids plus subject-token positions for one scene."""

    global_ids: np.ndarray       # (SEQ_LEN,)
    background_ids: np.ndarray   # (SEQ_LEN,)
    layer_ids: np.ndarray        # (K, SEQ_LEN)
    subject_global: np.ndarray   # (K,) position of each SHAPE token in global_ids
    subject_layer: np.ndarray    # (K,) position of the SHAPE token in its layer_ids row

    def __post_init__(self):
        for name in ("global_ids", "background_ids", "layer_ids", "subject_global", "subject_layer"):
            arr = np.array(getattr(self, name), dtype=np.int64, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.global_ids.shape != (SEQ_LEN,) or self.background_ids.shape != (SEQ_LEN,):
            raise ValueError("token sequences must have length SEQ_LEN")
        if self.layer_ids.ndim != 2 or self.layer_ids.shape[1] != SEQ_LEN:
            raise ValueError("layer_ids must be (K, SEQ_LEN)")
        if self.subject_global.shape != (self.k,) or self.subject_layer.shape != (self.k,):
            raise ValueError("subject index arrays must have length K")
        all_ids = np.concatenate([self.global_ids, self.background_ids, self.layer_ids.ravel()])
        if all_ids.min(initial=0) < 0 or all_ids.max(initial=0) >= VOCAB_SIZE:
            raise ValueError("token id outside vocabulary")

    @property
    def k(self) -> int:
        return self.layer_ids.shape[0]


def _pad_to_seq(tokens: list[int]) -> np.ndarray:
    if len(tokens) > SEQ_LEN:
        raise ValueError(f"token sequence of length {len(tokens)} exceeds {SEQ_LEN} slots")
    return np.array(tokens + [PAD_ID] * (SEQ_LEN - len(tokens)), dtype=np.int64)


def tokenize(scene: SceneSpec) -> PromptSpec:
    """Deterministic token layout; invertible up to PAD via ``detokenize``."""
    if scene.background not in BACKGROUND_CLASSES:
        raise VocabularyError(scene.background, "background", BACKGROUND_CLASSES)
    if scene.light not in LIGHT_NAMES:
        raise VocabularyError(scene.light, "light", LIGHT_NAMES)
    globe = [TOKEN_TO_ID[f"BG:{scene.background}"]]
    layers, subject_global = [], []
    for shape in scene.shapes:
        if shape.color not in PALETTE:
            raise VocabularyError(shape.color, "color", COLOR_NAMES)
        if shape.shape not in SHAPE_CLASSES:
            raise VocabularyError(shape.shape, "shape", SHAPE_CLASSES)
        if shape.scale not in SCALE_RADII:
            raise VocabularyError(shape.scale, "scale", SCALE_NAMES)
        globe.append(TOKEN_TO_ID[f"COLOR:{shape.color}"])
        subject_global.append(len(globe))
        globe.append(TOKEN_TO_ID[f"SHAPE:{shape.shape}"])
        layers.append(
            _pad_to_seq(
                [
                    TOKEN_TO_ID[f"COLOR:{shape.color}"],
                    TOKEN_TO_ID[f"SHAPE:{shape.shape}"],
                    TOKEN_TO_ID[f"SCALE:{shape.scale}"],
                ]
            )
        )
    globe.append(TOKEN_TO_ID[f"LIGHT:{scene.light}"])
    layer_ids = np.stack(layers) if layers else np.zeros((0, SEQ_LEN), dtype=np.int64)
    return PromptSpec(
        global_ids=_pad_to_seq(globe),
        background_ids=_pad_to_seq([TOKEN_TO_ID[f"BG:{scene.background}"]]),
        layer_ids=layer_ids,
        subject_global=np.array(subject_global, dtype=np.int64),
        subject_layer=np.full(len(layers), 1, dtype=np.int64),
    )


def detokenize(prompt: PromptSpec) -> dict:
    """Recover the prompt record covered by tokens (positions are not tokenized)."""

    def name(token_id: int, prefix: str) -> str:
        tok = VOCAB[token_id]
        if not tok.startswith(prefix):
            raise ValueError(f"expected {prefix}* token, found {tok!r}")
        return tok[len(prefix):]

    background = name(int(prompt.global_ids[0]), "BG:")
    light = name(int(prompt.global_ids[1 + 2 * prompt.k]), "LIGHT:")
    layers = []
    for row in prompt.layer_ids:
        layers.append(
            {
                "color": name(int(row[0]), "COLOR:"),
                "shape": name(int(row[1]), "SHAPE:"),
                "scale": name(int(row[2]), "SCALE:"),
            }
        )
    return {"background": background, "light": light, "layers": layers}


def record_to_scene(record: dict, image_size: int = 32, seed: int = 0) -> SceneSpec:
    """Prompt record -> SceneSpec; shape positions are drawn from ``seed``.

    Used for prompt files, where the user specifies content but not layout.
    """
    unknown = set(record) - {"background", "light", "layers"}
    if unknown:
        raise VocabularyError(sorted(unknown)[0], "prompt key", ("background", "light", "layers"))
    layers = record.get("layers", [])
    rng = np.random.Generator(np.random.PCG64(seed))
    shapes = []
    occupied: list[tuple[int, int]] = []
    for entry in layers:
        bad = set(entry) - {"color", "shape", "scale"}
        if bad:
            raise VocabularyError(sorted(bad)[0], "layer key", ("color", "shape", "scale"))
        spec = _place_shape(
            rng,
            shape=entry.get("shape", "circle"),
            color=entry.get("color", "red"),
            scale=entry.get("scale", "medium"),
            image_size=image_size,
            occupied=occupied,
        )
        shapes.append(spec)
    scene = SceneSpec(
        background=record.get("background", "gradient"),
        light=record.get("light", "NE"),
        shapes=tuple(shapes),
        image_size=image_size,
        seed=seed,
    )
    tokenize(scene)  # validates vocabulary before the caller renders anything
    return scene


# ---------------------------------------------------------------------------
# rasterization


def _supersampled_grid(image_size: int, supersample: int):
    n = image_size * supersample
    coords = (np.arange(n) + 0.5) / n
    return np.meshgrid(coords, coords)  # xx, yy in [0,1]


def _inside(shape: str, xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        half = 0.85 * r
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape == "triangle":
        # Equilateral, apex up, circumradius r.
        top = (cx, cy - r)
        left = (cx - r * math.cos(math.pi / 6), cy + r / 2)
        right = (cx + r * math.cos(math.pi / 6), cy + r / 2)
        return (
            _half_plane(xx, yy, top, right)
            & _half_plane(xx, yy, right, left)
            & _half_plane(xx, yy, left, top)
        )
    if shape == "star":
        # 5-point star as a radial profile: outer radius at the points,
        # 0.45 r at the notches, linear in angle between them.
        ang = np.arctan2(dy, dx) + math.pi / 2  # 0 at the up direction
        phase = np.mod(ang, 2 * math.pi / 5) / (2 * math.pi / 5)
        tri = 1.0 - 2.0 * np.abs(phase - 0.5)  # 1 at points, 0 at notches
        boundary = r * (0.45 + 0.55 * tri)
        return dx * dx + dy * dy <= boundary * boundary
    raise VocabularyError(shape, "shape", SHAPE_CLASSES)


def _half_plane(xx, yy, a, b):
    return (b[0] - a[0]) * (yy - a[1]) - (b[1] - a[1]) * (xx - a[0]) >= 0


def _downsample(mask: np.ndarray, supersample: int) -> np.ndarray:
    n = mask.shape[0] // supersample
    return mask.astype(np.float64).reshape(n, supersample, n, supersample).mean(axis=(1, 3))


def _shadow_sigma_px(radius_frac: float, image_size: int) -> float:
    return max(0.5, 0.1 * radius_frac * image_size)


def render_foreground(
    shape: ShapeSpec, light: str, image_size: int = 32, supersample: int = 4
) -> RgbaLayer:
    """Rasterize one shape plus its baked-in drop shadow as a straight-alpha layer.

    The shadow is the shape silhouette shifted 0.6 radii along the light
    vector, gaussian-blurred, capped at alpha 0.45, composited under the body.
    """
    xx, yy = _supersampled_grid(image_size, supersample)
    cx, cy = shape.center
    r = shape.radius
    body = _downsample(_inside(shape.shape, xx, yy, cx, cy, r), supersample)

    ox, oy = LIGHT_VECTORS[light]
    off = SHADOW_OFFSET_FACTOR * r
    silhouette = _downsample(
        _inside(shape.shape, xx, yy, cx + off * ox, cy + off * oy, r), supersample
    )
    sigma = _shadow_sigma_px(r, image_size)
    shadow = SHADOW_ALPHA * gaussian_filter(silhouette, sigma=sigma, mode="reflect", truncate=3.0)

    alpha = body + (1.0 - body) * shadow
    base = np.array(PALETTE[shape.color], dtype=np.float64)
    weighted = body[:, :, None] * base  # shadow color is black, contributes nothing
    safe = np.where(alpha > 0, alpha, 1.0)
    color = np.where(alpha[:, :, None] > 0, weighted / safe[:, :, None], 0.0)
    return RgbaLayer(RgbImage(np.clip(color, 0, 1)), AlphaMap(np.clip(alpha, 0, 1)))


def _render_background(kind: str, rng: np.random.Generator, image_size: int) -> RgbImage:
    coords = (np.arange(image_size) + 0.5) / image_size
    xx, yy = np.meshgrid(coords, coords)
    names = list(COLOR_NAMES)
    c0 = np.array(PALETTE[names[rng.integers(len(names))]]) * 0.5 + 0.25
    c1 = np.array(PALETTE[names[rng.integers(len(names))]]) * 0.5 + 0.25
    if kind == "gradient":
        axis = rng.integers(3)
        t = (xx, yy, (xx + yy) / 2)[axis]
        img = c0 + (c1 - c0) * t[:, :, None]
    elif kind == "checker":
        cell = max(2, image_size // 4)
        parity = ((xx * image_size) // cell + (yy * image_size) // cell) % 2
        img = np.where(parity[:, :, None] < 1, c0, c1)
    elif kind == "noise":
        low = rng.random((4, 4, 3))
        img = np.stack(
            [_bilinear_upsample(low[:, :, c], image_size) for c in range(3)], axis=2
        )
        img = 0.25 + 0.5 * img
    elif kind == "horizon":
        split = 0.3 + 0.4 * rng.random()
        softness = 2.0 / image_size
        t = 1.0 / (1.0 + np.exp(-(yy - split) / softness))
        img = c0 + (c1 - c0) * t[:, :, None]
    else:
        raise VocabularyError(kind, "background", BACKGROUND_CLASSES)
    return RgbImage(np.clip(img, 0, 1))


def _bilinear_upsample(low: np.ndarray, size: int) -> np.ndarray:
    n = low.shape[0]
    pos = (np.arange(size) + 0.5) / size * n - 0.5
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 1)
    i1 = np.clip(i0 + 1, 0, n - 1)
    frac = np.clip(pos - i0, 0, 1)
    a = low[np.ix_(i0, i0)]
    b = low[np.ix_(i0, i1)]
    c = low[np.ix_(i1, i0)]
    d = low[np.ix_(i1, i1)]
    fy = frac[:, None]
    fx = frac[None, :]
    rows = a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx
    return rows


# ---------------------------------------------------------------------------
# scene assembly


@dataclass(frozen=True)
class SceneConstraints:
    image_size: int = 32
    k_choices: tuple[int, ...] = (1, 2, 3)
    supersample: int = 4
    max_placement_attempts: int = 100


_CELL_GRID = 3  # placement cells per axis; at most one shape per cell


def _feasible_margin(radius_frac: float, image_size: int) -> float:
    sigma_frac = _shadow_sigma_px(radius_frac, image_size) / image_size
    return (1.0 + SHADOW_OFFSET_FACTOR) * radius_frac + 3.0 * sigma_frac + 1.0 / image_size


def _place_shape(rng, shape, color, scale, image_size, occupied, attempts=100) -> ShapeSpec:
    # At most one shape per (scale, position-cell), keeping total occlusion bounded.
    if scale not in SCALE_RADII:
        raise VocabularyError(scale, "scale", SCALE_NAMES)
    margin = _feasible_margin(SCALE_RADII[scale], image_size)
    lo = max(POSITION_RANGE[0], margin)
    hi = min(POSITION_RANGE[1], 1.0 - margin)
    if lo >= hi:
        raise ValueError(f"scale {scale!r} cannot fit inside the canvas with its shadow")
    for _ in range(attempts):
        cx = lo + (hi - lo) * rng.random()
        cy = lo + (hi - lo) * rng.random()
        cell = (scale, int(cx * _CELL_GRID), int(cy * _CELL_GRID))
        if cell not in occupied:
            occupied.append(cell)
            return ShapeSpec(shape=shape, color=color, scale=scale, center=(cx, cy))
    raise ValueError(f"could not place shape after {attempts} attempts")


_STRATA_SEED = 0xC0FFEE
_N_CELLS = len(SHAPE_CLASSES) * len(COLOR_NAMES) * len(SCALE_NAMES) * len(LIGHT_NAMES)
_CELL_PERMUTATION = np.random.Generator(np.random.PCG64(_STRATA_SEED)).permutation(_N_CELLS)


def _stratified_cell(seed: int) -> tuple[str, str, str, str]:
    cell = int(_CELL_PERMUTATION[seed % _N_CELLS])
    cell, shape_i = divmod(cell, len(SHAPE_CLASSES))
    cell, color_i = divmod(cell, len(COLOR_NAMES))
    light_i, scale_i = divmod(cell, len(SCALE_NAMES))
    return (
        SHAPE_CLASSES[shape_i],
        COLOR_NAMES[color_i],
        SCALE_NAMES[scale_i],
        LIGHT_NAMES[light_i],
    )


def generate_scene(
    seed: int, constraints: SceneConstraints | None = None
) -> tuple[LayeredImage, PromptSpec, SceneSpec]:
    """Deterministically generate one layered scene from its seed."""
    cons = constraints or SceneConstraints()
    rng = np.random.Generator(np.random.PCG64(seed))
    first_shape, first_color, first_scale, light = _stratified_cell(seed)

    k = int(rng.choice(cons.k_choices))
    background = BACKGROUND_CLASSES[rng.integers(len(BACKGROUND_CLASSES))]
    occupied: list[tuple[int, int]] = []
    shapes = [
        _place_shape(rng, first_shape, first_color, first_scale, cons.image_size, occupied)
    ]
    for _ in range(k - 1):
        # Redraw attributes if a (scale, cell) slot is exhausted; the first
        # (stratified) shape always places into an empty scene.
        for attempt in range(cons.max_placement_attempts):
            try:
                shapes.append(
                    _place_shape(
                        rng,
                        shape=SHAPE_CLASSES[rng.integers(len(SHAPE_CLASSES))],
                        color=COLOR_NAMES[rng.integers(len(COLOR_NAMES))],
                        scale=SCALE_NAMES[rng.integers(len(SCALE_NAMES))],
                        image_size=cons.image_size,
                        occupied=occupied,
                        attempts=10,
                    )
                )
                break
            except ValueError:
                if attempt == cons.max_placement_attempts - 1:
                    raise
    scene = SceneSpec(
        background=background,
        light=light,
        shapes=tuple(shapes),
        image_size=cons.image_size,
        seed=seed,
    )
    return render_scene(scene, supersample=cons.supersample), tokenize(scene), scene


def render_scene(scene: SceneSpec, supersample: int = 4) -> LayeredImage:
    """Rasterize a SceneSpec into a LayeredImage (background rng keyed by seed)."""
    rng = np.random.Generator(np.random.PCG64((scene.seed or 0) ^ 0x5CE11E))
    background = _render_background(scene.background, rng, scene.image_size)
    layers = tuple(
        render_foreground(s, scene.light, scene.image_size, supersample) for s in scene.shapes
    )
    return LayeredImage(background, layers)


# ---------------------------------------------------------------------------
# dataset builder


def _entries_checksum(entries: list[dict]) -> str:
    return hashlib.sha256(json.dumps(entries, sort_keys=True).encode("utf-8")).hexdigest()


def build_dataset(
    n: int,
    seed: int,
    out_dir,
    constraints: SceneConstraints | None = None,
) -> Path:
    """Write ``n`` scene archives plus a checksummed manifest; idempotent per seed.

    Scene ``i`` uses seed ``seed + i`` and every byte written is a pure
    function of the seeds, so reruns (including after a partial write)
    reproduce the identical dataset and manifest checksum.
    """
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        scene_seed = seed + i
        img, _, scene = generate_scene(scene_seed, constraints)
        name = f"scene_{i:05d}.zip"
        path = out_dir / name
        save_archive(img, path, prompt=scene.record(), seed=scene_seed)
        entries.append({"file": name, "seed": scene_seed, "prompt": scene.record()})
    manifest = {
        "version": 1,
        "n": n,
        "seed": seed,
        "image_size": (constraints or SceneConstraints()).image_size,
        "entries": entries,
        "checksum": _entries_checksum(entries),
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


@dataclass(frozen=True)
class DatasetEntry:
    path: Path
    seed: int
    record: dict


def load_dataset(dataset_dir) -> list[DatasetEntry]:
    """Validate the manifest checksum and per-entry files; return the entry list."""
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {dataset_dir}")
    manifest = json.loads(manifest_path.read_text())
    entries = manifest.get("entries", [])
    if manifest.get("checksum") != _entries_checksum(entries):
        raise ValueError(f"manifest checksum mismatch in {manifest_path} (partial write?)")
    out = []
    for entry in entries:
        path = dataset_dir / entry["file"]
        if not path.exists():
            raise FileNotFoundError(f"dataset entry missing: {path}")
        out.append(DatasetEntry(path=path, seed=entry["seed"], record=entry["prompt"]))
    return out


def load_sample(entry: DatasetEntry) -> tuple[LayeredImage, PromptSpec]:
    img = load_archive(entry.path)
    scene_record = entry.record
    prompt = tokenize(
        SceneSpec(
            background=scene_record["background"],
            light=scene_record["light"],
            shapes=tuple(
                ShapeSpec(
                    shape=layer["shape"],
                    color=layer["color"],
                    scale=layer["scale"],
                    center=(0.5, 0.5),  # positions are not tokenized
                )
                for layer in scene_record["layers"]
            ),
        )
    )
    return img, prompt
