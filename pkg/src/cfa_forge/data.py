"""Image decoding, patch extraction, and the patch dataset file format."""

from __future__ import annotations

import io
import logging
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, ImageFormatError, TruncatedImageError, UnsupportedFormatError
from .io import atomic_write_bytes

log = logging.getLogger(__name__)

DATASET_MAGIC = b"CFAD"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sIIQ")
IMAGE_SUFFIXES = (".ppm", ".pnm", ".png")
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass
class ImageRgb:
    pixels: np.ndarray  # h x w x 3, float32 in [0, 1]
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected h x w x 3 pixels, got {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_p6(buf, source_id):
    pos = 2
    fields = []
    for _ in range(3):
        m = _PNM_TOKEN.match(buf, pos)
        if m is None:
            raise ImageFormatError(f"{source_id}: malformed PPM header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise ImageFormatError(f"{source_id}: malformed PPM header") from None
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{source_id}: invalid PPM size {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"{source_id}: PPM maxval {maxval} (only 255 is supported)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise TruncatedImageError(f"{source_id}: missing pixel payload")
    pos += 1
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise TruncatedImageError(f"{source_id}: expected {need} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)


def _decode_png(buf, source_id):
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - depends on environment
        raise UnsupportedFormatError(f"{source_id}: PNG input needs Pillow installed") from None
    try:
        im = Image.open(io.BytesIO(buf))
        im.load()
    except (OSError, SyntaxError) as exc:
        raise TruncatedImageError(f"{source_id}: unreadable PNG ({exc})") from None
    if im.mode != "RGB":
        raise UnsupportedFormatError(f"{source_id}: PNG mode {im.mode} (only 8-bit RGB without alpha)")
    return np.asarray(im, dtype=np.uint8)


def decode_image(buf: bytes, source_id="") -> ImageRgb:
    """Decode binary PPM (P6, maxval 255) or 8-bit RGB PNG into [0, 1] floats."""
    if buf[:2] == b"P6":
        raw = _parse_p6(buf, source_id)
    elif buf[:8] == PNG_SIGNATURE:
        raw = _decode_png(buf, source_id)
    else:
        raise UnsupportedFormatError(f"{source_id}: not a binary PPM (P6) or PNG file")
    return ImageRgb(raw.astype(np.float32) / np.float32(255.0), source_id)


def read_image(path) -> ImageRgb:
    path = Path(path)
    return decode_image(path.read_bytes(), path.name)


def encode_ppm(pixels) -> bytes:
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        px = np.round(np.clip(px, 0, 1) * 255).astype(np.uint8)
    h, w = px.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(px).tobytes()


def encode_png(pixels) -> bytes:
    """Minimal 8-bit RGB PNG writer (filter type 0 on every row)."""
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = px.shape[:2]
    raw = b"".join(b"\x00" + px[y].tobytes() for y in range(h))

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return PNG_SIGNATURE + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b"")


def extract_patches(img: ImageRgb, n) -> list:
    """Non-overlapping ``3n x 3n`` blocks in row-major order; remainders are dropped."""
    p = 3 * n
    if p > min(img.height, img.width):
        raise ValueError(f"patch size {p} exceeds image {img.height}x{img.width}")
    rows, cols = img.height // p, img.width // p
    return [img.pixels[r * p:(r + 1) * p, c * p:(c + 1) * p] for r in range(rows) for c in range(cols)]


@dataclass
class PatchDataset:
    n: int
    patches: np.ndarray  # count x 3n x 3n x 3, float32
    provenance: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float32)
        edge = 3 * self.n
        if self.patches.ndim != 4 or self.patches.shape[1:] != (edge, edge, 3):
            raise DatasetError(f"patches must be count x {edge} x {edge} x 3, got {self.patches.shape}")
        if self.patches.size and (self.patches.min() < 0 or self.patches.max() > 1):
            raise DatasetError("patch values must lie in [0, 1]")

    @property
    def edge(self):
        return 3 * self.n

    @property
    def count(self):
        return self.patches.shape[0]

    def __len__(self):
        return self.count

    def subset(self, index):
        prov = [self.provenance[i] for i in index] if self.provenance else []
        return PatchDataset(self.n, self.patches[index], prov)


def dataset_to_bytes(ds: PatchDataset) -> bytes:
    body = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.n, ds.count)
    body += np.ascontiguousarray(ds.patches, dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def dataset_from_bytes(buf: bytes) -> PatchDataset:
    if len(buf) < _DATASET_HEADER.size:
        raise DatasetError("dataset file truncated before end of header")
    magic, version, n, count = _DATASET_HEADER.unpack_from(buf)
    if magic != DATASET_MAGIC:
        raise DatasetError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    edge = 3 * n
    nbytes = count * edge * edge * 3 * 4
    end = _DATASET_HEADER.size + nbytes
    if len(buf) < end + 4:
        raise DatasetError("dataset file truncated")
    (crc,) = struct.unpack_from("<I", buf, end)
    if crc != zlib.crc32(buf[:end]) or len(buf) != end + 4:
        raise DatasetError("dataset checksum mismatch")
    patches = np.frombuffer(buf, dtype="<f4", count=count * edge * edge * 3, offset=_DATASET_HEADER.size)
    return PatchDataset(n, patches.reshape(count, edge, edge, 3).astype(np.float32))


def save_dataset(path, ds: PatchDataset):
    atomic_write_bytes(path, dataset_to_bytes(ds))


def load_dataset(path) -> PatchDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def list_images(image_dir):
    d = Path(image_dir)
    if not d.is_dir():
        raise DatasetError(f"image directory {image_dir} does not exist")
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def build_dataset(image_dir, n, seed=0, out=None) -> PatchDataset:
    """Cut every decodable image into patches, shuffle globally, optionally write to ``out``.

    Undecodable files are skipped with a warning and listed in ``skipped``.
    """
    patches, provenance, skipped = [], [], []
    for path in list_images(image_dir):
        try:
            img = read_image(path)
        except ImageFormatError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            skipped.append(path.name)
            continue
        if min(img.height, img.width) < 3 * n:
            log.warning("skipping %s: smaller than one %dx%d patch", path.name, 3 * n, 3 * n)
            skipped.append(path.name)
            continue
        tiles = extract_patches(img, n)
        patches.extend(tiles)
        provenance.extend(f"{img.source_id}#{i}" for i in range(len(tiles)))
    if not patches:
        raise DatasetError(f"no usable images in {image_dir}")
    order = np.random.default_rng(seed).permutation(len(patches))
    ds = PatchDataset(n, np.stack(patches)[order], [provenance[i] for i in order], skipped)
    if out is not None:
        save_dataset(out, ds)
    return ds


def split(ds: PatchDataset, fraction, seed=0):
    """Seeded disjoint split; ``fraction`` of the patches go to the holdout side."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n_hold = int(round(ds.count * fraction))
    if n_hold == 0 or n_hold == ds.count:
        raise DatasetError(f"split of {ds.count} patches at {fraction} leaves one side empty")
    order = np.random.default_rng(seed).permutation(ds.count)
    hold, train = np.sort(order[:n_hold]), np.sort(order[n_hold:])
    return ds.subset(train), ds.subset(hold)
