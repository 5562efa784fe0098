"""Binary PPM (P6) / PGM (P5) codec, sample loading and atomic file writes."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IGNORE_LABEL = 255


class LoadError(ValueError):
    pass


def atomic_write(path: str | Path, payload: bytes | str) -> None:
    """Write to a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_header(buf: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval; return them and the data offset."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise LoadError(f"{path}: truncated header")
        tokens.append(buf[start:pos])
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise LoadError(f"{path}: missing whitespace after header")
    pos += 1
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise LoadError(f"{path}: non-numeric header field") from exc
    if width < 1 or height < 1:
        raise LoadError(f"{path}: invalid extents {width}x{height}")
    return magic, width, height, maxval, pos


def decode_netpbm(buf: bytes, expect: bytes, path="<bytes>") -> np.ndarray:
    magic, width, height, maxval, pos = _read_header(buf, path)
    if magic != expect:
        raise LoadError(f"{path}: expected {expect.decode()} file, found {magic!r}")
    if maxval != 255:
        raise LoadError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if expect == b"P6" else 1
    count = width * height * channels
    data = buf[pos:pos + count]
    if len(data) != count:
        raise LoadError(f"{path}: expected {count} data bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3).copy()
    return arr.reshape(height, width).copy()


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("PPM payload must be uint8 (H, W, 3)")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("PGM payload must be uint8 (H, W)")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes(), b"P6", path)


def read_pgm(path) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes(), b"P5", path)


def write_ppm(path, rgb: np.ndarray) -> None:
    atomic_write(path, encode_ppm(rgb))


def write_pgm(path, gray: np.ndarray) -> None:
    atomic_write(path, encode_pgm(gray))


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    labels: np.ndarray  # (H, W) uint8, 255 = ignore
    raw: np.ndarray | None = None  # (H, W, 3) uint8 as stored


def load_sample(image_path, label_path, num_classes: int | None = None,
                ignore_index: int | None = IGNORE_LABEL) -> Sample:
    """Load an image/label pair and validate it.

    ``ignore_index=None`` disables the ignore value, so 255 then counts as
    an ordinary (and usually out-of-range) label.
    """
    rgb = read_ppm(image_path)
    labels = read_pgm(label_path)
    if rgb.shape[:2] != labels.shape:
        raise LoadError(f"{image_path} is {rgb.shape[1]}x{rgb.shape[0]} but "
                        f"{label_path} is {labels.shape[1]}x{labels.shape[0]}")
    if num_classes is not None:
        bad = labels >= num_classes
        if ignore_index is not None:
            bad &= labels != ignore_index
        if bad.any():
            raise LoadError(f"{label_path}: label value {int(labels[bad].max())} >= num_classes={num_classes}")
    image = rgb.transpose(2, 0, 1).astype(np.float64) / 255.0
    return Sample(image, labels, rgb)


def list_samples(directory) -> list[tuple[Path, Path]]:
    """Pairs ``image_XXXX.ppm`` / ``label_XXXX.pgm`` in sorted order."""
    directory = Path(directory)
    pairs = []
    for img in sorted(directory.glob("image_*.ppm")):
        lab = directory / img.name.replace("image_", "label_").replace(".ppm", ".pgm")
        if not lab.exists():
            raise LoadError(f"missing label file {lab}")
        pairs.append((img, lab))
    if not pairs:
        raise LoadError(f"no image_*.ppm files in {directory}")
    return pairs


def load_dataset(directory, num_classes: int, ignore_index: int = IGNORE_LABEL) -> list[Sample]:
    return [load_sample(i, l, num_classes, ignore_index) for i, l in list_samples(directory)]


PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
    [250, 190, 212], [0, 128, 128], [220, 190, 255], [170, 110, 40], [255, 250, 200],
    [128, 0, 0], [170, 255, 195], [128, 128, 0], [255, 215, 180], [0, 0, 128],
], dtype=np.uint8)


def colorize(labels: np.ndarray) -> np.ndarray:
    """Fixed palette visualization; ignore pixels are white."""
    labels = np.asarray(labels)
    out = PALETTE[labels % len(PALETTE)]
    out[labels == IGNORE_LABEL] = 255
    return out
