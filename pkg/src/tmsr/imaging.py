"""Image I/O, BT.601 color handling, bicubic resampling, augmentation,
and training-patch extraction.

An "image plane" throughout is a float32 (h, w) array of luma samples in
[0, 255]; every public op clips back into that range. RGB images are
uint8 (h, w, 3) arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

# BT.601 8-bit analog-to-digital conversion (rows: Y, Cb, Cr)
_RGB_TO_YCBCR = np.array(
    [[65.481, 128.553, 24.966],
     [-37.797, -74.203, 112.0],
     [112.0, -93.786, -18.214]], dtype=np.float64) / 255.0
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0], dtype=np.float64)
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)


class ImagingError(Exception):
    pass


class UnsupportedImageError(ImagingError):
    pass


@dataclass
class PatchPair:
    """Aligned training sample: hr is f_sub x f_sub, lr is (f_sub/scale)^2."""

    hr: np.ndarray
    lr: np.ndarray
    source_id: str
    origin: tuple  # (row, col) in the HR image


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def load_png(path) -> np.ndarray:
    """8-bit PNG as (h, w, 3) uint8; grayscale loads with R=G=B."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ImagingError(f"unreadable image {path}: {exc}") from exc
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        raise UnsupportedImageError(
            f"unsupported bit depth for {path} (mode {img.mode}); "
            "8-bit PNG required")
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.uint8)


def save_png(img: np.ndarray, path) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ImagingError(f"expected (h,w,3) uint8 image, got "
                           f"{img.shape} {img.dtype}")
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# color space
# ---------------------------------------------------------------------------

def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma: 16 + (65.481 R + 128.553 G + 24.966 B)/255, clipped."""
    rgb = img.astype(np.float64)
    y = rgb @ _RGB_TO_YCBCR[0] + _YCBCR_OFFSET[0]
    return np.clip(y, 0.0, 255.0).astype(np.float32)


def rgb_to_ycbcr(img: np.ndarray):
    """All three BT.601 planes as float32 [0,255] arrays (y, cb, cr)."""
    rgb = img.astype(np.float64)
    planes = rgb @ _RGB_TO_YCBCR.T + _YCBCR_OFFSET
    planes = np.clip(planes, 0.0, 255.0).astype(np.float32)
    return planes[..., 0], planes[..., 1], planes[..., 2]


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    ycc = np.stack([y, cb, cr], axis=-1).astype(np.float64) - _YCBCR_OFFSET
    rgb = ycc @ _YCBCR_TO_RGB.T
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

def _cubic(x: np.ndarray) -> np.ndarray:
    """Keys cubic kernel with a = -0.5; support [-2, 2], sums to 1."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    inner = 1.5 * ax3 - 2.5 * ax2 + 1.0
    outer = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _contributions(in_len: int, out_len: int, antialias: bool):
    """Sample indices and normalized weights for one resampled axis.

    Center-aligned mapping u = (j + 0.5)/scale - 0.5. When shrinking with
    antialias the kernel is stretched by 1/scale so it low-passes; indices
    are clamped to the valid range (border replication).
    """
    scale = out_len / in_len
    if antialias and scale < 1.0:
        kscale = scale
        width = 4.0 / scale
    else:
        kscale = 1.0
        width = 4.0
    u = (np.arange(out_len, dtype=np.float64) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2.0).astype(np.int64)
    count = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(count)
    weights = kscale * _cubic(kscale * (u[:, None] - idx))
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1)
    # drop all-zero columns (first/last taps are often outside the support)
    keep = ~np.all(weights == 0.0, axis=0)
    return idx[:, keep], weights[:, keep]


def bicubic_resize(plane: np.ndarray, out_w: int, out_h: int,
                   antialias: bool = False) -> np.ndarray:
    """Separable bicubic resample of a [0,255] plane to (out_h, out_w)."""
    if out_w < 1 or out_h < 1:
        raise ImagingError(f"requested zero-size output {out_h}x{out_w}")
    data = plane.astype(np.float64)
    if data.shape[0] != out_h:
        idx, w = _contributions(data.shape[0], out_h, antialias)
        data = np.einsum("opw,op->ow", data[idx, :], w)
    if data.shape[1] != out_w:
        idx, w = _contributions(data.shape[1], out_w, antialias)
        data = np.einsum("hop,op->ho", data[:, idx], w)
    return np.clip(data, 0.0, 255.0).astype(np.float32)


def synthesize_lr(hr: np.ndarray, scale: int) -> np.ndarray:
    """Antialiased downscale by 1/scale; dims must already be multiples."""
    h, w = hr.shape
    if h % scale or w % scale:
        raise ImagingError(f"dims {h}x{w} not divisible by scale {scale}; "
                           "modcrop first")
    return bicubic_resize(hr, out_w=w // scale, out_h=h // scale, antialias=True)


def bicubic_upscale(lr: np.ndarray, scale: int) -> np.ndarray:
    h, w = lr.shape
    return bicubic_resize(lr, out_w=w * scale, out_h=h * scale, antialias=False)


def modcrop(plane: np.ndarray, scale: int) -> np.ndarray:
    """Top-left anchored crop to dimensions divisible by scale."""
    h, w = plane.shape[:2]
    return plane[:h - h % scale, :w - w % scale]


# ---------------------------------------------------------------------------
# augmentation and patch extraction
# ---------------------------------------------------------------------------

AUGMENT_SCALES = (1.0, 0.9, 0.8, 0.7, 0.6)
AUGMENT_ROTATIONS = (0, 90, 180, 270)


def rotate90(plane: np.ndarray, degrees: int) -> np.ndarray:
    """Exact sample permutation; degrees must be a multiple of 90."""
    if degrees % 90:
        raise ImagingError(f"rotation {degrees} not a multiple of 90")
    return np.ascontiguousarray(np.rot90(plane, k=(degrees // 90) % 4))


def augment(planes, scales=AUGMENT_SCALES, rotations=AUGMENT_ROTATIONS):
    """Scale x rotation variants of each plane; |out| = |scales|*|rotations|*|in|.

    Scaled copies use antialiased bicubic with floor-rounded target dims.
    """
    out = []
    for plane in planes:
        h, w = plane.shape
        for s in scales:
            if s == 1.0:
                scaled = plane
            else:
                scaled = bicubic_resize(plane, out_w=int(w * s), out_h=int(h * s),
                                        antialias=True)
            for rot in rotations:
                out.append(rotate90(scaled, rot))
    return out


def extract_patches(hr: np.ndarray, scale: int = 2, f_sub: int = 32,
                    stride: int = 14, source_id: str = "") -> list:
    """Aligned LR/HR sub-image pairs on a fixed stride grid.

    HR origins are (i*stride, j*stride) while origin + f_sub fits; no
    partial boundary patches. The HR plane is cropped to a multiple of
    scale first and the LR plane synthesized once per image.
    """
    if f_sub % scale:
        raise ImagingError(f"f_sub {f_sub} not divisible by scale {scale}")
    if stride % scale:
        raise ImagingError(f"stride {stride} not divisible by scale {scale}")
    hr = modcrop(hr, scale)
    h, w = hr.shape
    if h < f_sub or w < f_sub:
        return []
    lr_full = synthesize_lr(hr, scale)
    lsub = f_sub // scale
    pairs = []
    for r in range(0, h - f_sub + 1, stride):
        for c in range(0, w - f_sub + 1, stride):
            lr_r, lr_c = r // scale, c // scale
            pairs.append(PatchPair(
                hr=np.ascontiguousarray(hr[r:r + f_sub, c:c + f_sub]),
                lr=np.ascontiguousarray(
                    lr_full[lr_r:lr_r + lsub, lr_c:lr_c + lsub]),
                source_id=source_id,
                origin=(r, c)))
    return pairs


def patch_grid_count(h: int, w: int, f_sub: int = 32, stride: int = 14) -> int:
    if h < f_sub or w < f_sub:
        return 0
    return ((h - f_sub) // stride + 1) * ((w - f_sub) // stride + 1)


# ---------------------------------------------------------------------------
# patch container file
# ---------------------------------------------------------------------------

PATCH_MAGIC = "TMSRP1"


@dataclass
class PatchDataset:
    lr: np.ndarray   # (n, 1, lr_size, lr_size) float32, [0,255]
    hr: np.ndarray   # (n, 1, hr_size, hr_size) float32, [0,255]
    scale: int

    @property
    def count(self) -> int:
        return self.lr.shape[0]


def save_patch_dataset(pairs, path, scale: int) -> None:
    """Text header (count, dims, scale) then per-sample LR,HR float32 LE."""
    if not pairs:
        raise ImagingError("refusing to write an empty patch dataset")
    hr_size = pairs[0].hr.shape[0]
    lr_size = pairs[0].lr.shape[0]
    with open(path, "wb") as fh:
        fh.write((f"{PATCH_MAGIC}\ncount {len(pairs)}\nhr_size {hr_size}\n"
                  f"lr_size {lr_size}\nscale {scale}\ndata\n").encode("ascii"))
        for p in pairs:
            fh.write(np.ascontiguousarray(p.lr, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(p.hr, dtype="<f4").tobytes())


def load_patch_dataset(path) -> PatchDataset:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", "replace").strip()
        if magic != PATCH_MAGIC:
            raise ImagingError(f"bad patch file magic {magic!r}")
        fields = {}
        while True:
            line = fh.readline().decode("ascii").strip()
            if line == "data":
                break
            if not line:
                raise ImagingError("truncated patch file header")
            key, val = line.split(" ")
            fields[key] = int(val)
        count = fields["count"]
        hr_size = fields["hr_size"]
        lr_size = fields["lr_size"]
        per = lr_size * lr_size + hr_size * hr_size
        raw = np.frombuffer(fh.read(), dtype="<f4")
        if raw.size != count * per:
            raise ImagingError(f"patch payload holds {raw.size} floats, "
                               f"expected {count * per}")
        raw = raw.reshape(count, per)
        lr = raw[:, :lr_size * lr_size].reshape(count, 1, lr_size, lr_size)
        hr = raw[:, lr_size * lr_size:].reshape(count, 1, hr_size, hr_size)
        return PatchDataset(lr=np.ascontiguousarray(lr).astype(np.float32),
                            hr=np.ascontiguousarray(hr).astype(np.float32),
                            scale=fields["scale"])
