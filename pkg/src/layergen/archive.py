"""Zip-based layered-image archive.

Container layout::

    manifest.json     UTF-8 JSON: version, width, height, background file
                      name, ordered foreground file names, prompt record, seed
    background.png    RGB, 8-bit
    fg_01.png ...     RGBA, 8-bit, straight alpha, bottom-most first

All zip entries are written with a fixed timestamp so identical content
produces identical bytes; re-saving a loaded archive is a fixed point of the
8-bit quantization (max one-shot error 1/510 per channel, see
``layergen.compositing``).
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image

from .compositing import AlphaMap, LayeredImage, RgbaLayer, RgbImage, from_uint8, to_uint8

ARCHIVE_VERSION = 1
MANIFEST_NAME = "manifest.json"

# Fixed DOS timestamp keeps archive bytes a pure function of their content.
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class ArchiveError(ValueError):
    """Corrupt manifest, missing layer file, or count/shape mismatch."""


def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode).save(buf, format="PNG")
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_archive(img: LayeredImage, path, prompt: dict | None = None, seed: int | None = None) -> Path:
    """Write a layered image to ``path``; foregrounds must be straight alpha."""
    for i, layer in enumerate(img.foregrounds, start=1):
        if layer.premultiplied:
            raise ArchiveError(f"archive stores straight alpha; foreground {i} is premultiplied")
    path = Path(path)
    h, w = img.shape
    fg_names = [f"fg_{i:02d}.png" for i in range(1, img.k + 1)]
    manifest = {
        "version": ARCHIVE_VERSION,
        "width": w,
        "height": h,
        "background": "background.png",
        "foregrounds": fg_names,
        "prompt": prompt,
        "seed": seed,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, MANIFEST_NAME, json.dumps(manifest, sort_keys=True).encode("utf-8"))
        _write_entry(zf, "background.png", _png_bytes(to_uint8(img.background.values), "RGB"))
        for name, layer in zip(fg_names, img.foregrounds):
            rgba = np.concatenate(
                [to_uint8(layer.color.values), to_uint8(layer.alpha.values)[:, :, None]],
                axis=2,
            )
            _write_entry(zf, name, _png_bytes(rgba, "RGBA"))
    tmp.replace(path)
    return path


def read_manifest(path) -> dict:
    """Return the parsed manifest of an archive without decoding pixels."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            raw = zf.read(MANIFEST_NAME)
    except (zipfile.BadZipFile, KeyError, OSError) as exc:
        raise ArchiveError(f"cannot read manifest from {path}: {exc}") from exc
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"corrupt manifest in {path}: {exc}") from exc
    for key in ("version", "width", "height", "background", "foregrounds"):
        if key not in manifest:
            raise ArchiveError(f"manifest in {path} missing key {key!r}")
    if manifest["version"] != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {manifest['version']!r}")
    return manifest


def load_archive(path) -> LayeredImage:
    """Load an archive; inverse of ``save_archive`` on the 8-bit lattice."""
    manifest = read_manifest(path)
    h, w = manifest["height"], manifest["width"]
    with zipfile.ZipFile(path, "r") as zf:
        names = set(zf.namelist())
        payload_count = sum(1 for n in names if n.startswith("fg_") and n.endswith(".png"))
        if payload_count != len(manifest["foregrounds"]):
            raise ArchiveError(
                f"manifest lists {len(manifest['foregrounds'])} foregrounds, "
                f"archive holds {payload_count}"
            )
        background = _load_png(zf, manifest["background"], "RGB", (h, w), path)
        layers = []
        for name in manifest["foregrounds"]:
            rgba = _load_png(zf, name, "RGBA", (h, w), path)
            layers.append(
                RgbaLayer(
                    RgbImage(from_uint8(rgba[:, :, :3])),
                    AlphaMap(from_uint8(rgba[:, :, 3])),
                )
            )
    return LayeredImage(RgbImage(from_uint8(background)), tuple(layers))


def _load_png(zf: zipfile.ZipFile, name: str, mode: str, shape: tuple[int, int], path) -> np.ndarray:
    try:
        raw = zf.read(name)
    except KeyError as exc:
        raise ArchiveError(f"archive {path} missing layer file {name!r}") from exc
    img = Image.open(io.BytesIO(raw))
    if img.mode != mode:
        raise ArchiveError(f"layer {name!r} has mode {img.mode}, expected {mode}")
    arr = np.asarray(img)
    if arr.shape[:2] != shape:
        raise ArchiveError(f"layer {name!r} shape {arr.shape[:2]} != manifest {shape}")
    return arr
