"""Image I/O, training augmentation and patch extraction.

Images are stored as binary PPM (P6, maxval 255) and handled in memory as
uint8 arrays of shape (H, W, 3). Patch extraction flattens non-overlapping
square patches into rows of a float matrix scaled to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PpmParseError(ValueError):
    """Malformed PPM input; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM (P6, maxval 255)."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def _read_ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # Skip whitespace and '#' comment lines between header tokens.
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PpmParseError("unexpected end of header", start)
    return data[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) file into an (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise PpmParseError("missing P6 magic", 0)
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_ppm_token(data, pos)
        if not tok.isdigit():
            raise PpmParseError(f"non-numeric header field {tok!r}", pos - len(tok))
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise PpmParseError(f"unsupported maxval {maxval}", pos - len(str(maxval)))
    pos += 1  # single whitespace byte after maxval
    expected = w * h * 3
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise PpmParseError(
            f"raster truncated: expected {expected} bytes, got {len(raster)}", pos + len(raster)
        )
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)


def load_image(path) -> np.ndarray:
    """Load a product image from disk (PPM P6 only)."""
    return read_ppm(path)


def resize_bilinear(image: np.ndarray, out_side: int) -> np.ndarray:
    """Bilinear resize of a square (or rectangular) uint8 image.

    Uses corner-aligned sampling, so resizing to the input size is an exact
    identity. Returns uint8.
    """
    h, w = image.shape[:2]
    if (h, w) == (out_side, out_side):
        return image.copy()
    ys = _sample_grid(h, out_side)
    xs = _sample_grid(w, out_side)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _sample_grid(in_size: int, out_size: int) -> np.ndarray:
    if out_size == 1:
        return np.zeros(1)
    return np.arange(out_size) * ((in_size - 1) / (out_size - 1))


def hflip(image: np.ndarray) -> np.ndarray:
    """Horizontal flip (an involution: hflip(hflip(x)) == x)."""
    return image[:, ::-1, :].copy()


CROP_SCALE_MIN = 0.6
CROP_SCALE_MAX = 1.0


def augment(image: np.ndarray, rng: np.random.Generator, train_mode: bool,
            image_side: int | None = None) -> np.ndarray:
    """Training augmentation: random resized crop plus horizontal flip.

    In train mode the crop area fraction is uniform in [0.6, 1.0] and the
    flip fires with p=0.5; in eval mode the image is only resized to
    ``image_side``. The rng is consumed in a fixed order (scale, y, x, flip)
    so seeded runs reproduce exactly.
    """
    side = image.shape[0] if image_side is None else image_side
    if not train_mode:
        return resize_bilinear(image, side)
    h, w = image.shape[:2]
    scale = rng.uniform(CROP_SCALE_MIN, CROP_SCALE_MAX)
    crop_h = max(1, int(round(h * np.sqrt(scale))))
    crop_w = max(1, int(round(w * np.sqrt(scale))))
    y0 = int(rng.integers(0, h - crop_h + 1))
    x0 = int(rng.integers(0, w - crop_w + 1))
    out = resize_bilinear(image[y0:y0 + crop_h, x0:x0 + crop_w], side)
    if rng.random() < 0.5:
        out = hflip(out)
    return out


@dataclass
class PatchSequence:
    """Flattened non-overlapping patches of one image.

    patches: (N_p, D_p) float32 in [0, 1] with D_p = patch_size^2 * 3;
    grid: (rows, cols) with N_p = rows * cols.
    """

    patches: np.ndarray
    grid: tuple[int, int]


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """Cut an (H, W, 3) uint8 image into row-major flattened patches.

    Each patch is flattened channel-last and scaled by 1/255.
    """
    h, w = image.shape[:2]
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    blocks = image.reshape(rows, patch_size, cols, patch_size, 3)
    flat = blocks.transpose(0, 2, 1, 3, 4).reshape(rows * cols, patch_size * patch_size * 3)
    return PatchSequence(patches=flat.astype(np.float32) / 255.0, grid=(rows, cols))


def unpatchify(seq: PatchSequence, patch_size: int) -> np.ndarray:
    """Inverse of patchify: reassemble the uint8 image from patch rows."""
    rows, cols = seq.grid
    blocks = seq.patches.reshape(rows, cols, patch_size, patch_size, 3)
    img = blocks.transpose(0, 2, 1, 3, 4).reshape(rows * patch_size, cols * patch_size, 3)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
