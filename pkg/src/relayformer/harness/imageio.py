"""Binary PGM (P5) and PPM (P6) images with 8-bit samples."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from relayformer.errors import ContractError

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a P5/P6 file as uint8 ``[H, W]`` or ``[H, W, 3]``."""
    buf = Path(path).read_bytes()
    m = _HEADER.match(buf)
    if not m:
        raise ContractError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ContractError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    body = buf[m.end():]
    if len(body) < h * w * channels:
        raise ContractError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8, count=h * w * channels)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def write_pnm(path: str | Path, image: np.ndarray) -> None:
    """Write ``[H, W]``/``[H, W, 1]`` as PGM or ``[H, W, 3]`` as PPM."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ContractError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ContractError(f"cannot store an image of shape {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def mask_to_pgm(mask: np.ndarray) -> np.ndarray:
    """Binary mask to 8-bit pixels: 255 marks manipulated pixels."""
    return np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)


def pgm_to_mask(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels) >= 128).astype(np.uint8)


def frame_paths(directory: str | Path) -> list[Path]:
    """Numbered frames in a directory, sorted by the number in their name."""
    files = [p for p in Path(directory).iterdir() if p.suffix.lower() in (".pgm", ".ppm")]

    def key(p: Path):
        digits = re.findall(r"\d+", p.stem)
        return (int(digits[-1]) if digits else -1, p.name)

    return sorted(files, key=key)


def read_clip(source: str | Path) -> np.ndarray:
    """A single image file or a directory of numbered frames as uint8 ``[T, H, W, C]``."""
    source = Path(source)
    paths = frame_paths(source) if source.is_dir() else [source]
    if not paths:
        raise ContractError(f"{source}: no PGM/PPM frames found")
    frames = [read_pnm(p) for p in paths]
    frames = [f[:, :, None] if f.ndim == 2 else f for f in frames]
    if len({f.shape for f in frames}) != 1:
        raise ContractError(f"{source}: frames differ in size or channel count")
    return np.stack(frames)


def write_clip(directory: str | Path, clip: np.ndarray, stem: str = "frame") -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(np.asarray(clip)):
        ext = ".ppm" if frame.ndim == 3 and frame.shape[2] == 3 else ".pgm"
        p = out / f"{stem}_{i:04d}{ext}"
        write_pnm(p, frame)
        paths.append(p)
    return paths
