"""Patch images and the physical patch-insertion model.

Images are float64 arrays shaped ``(3, H, W)`` with values in ``[0, 1]``.
A patch is an image of the patch texture resolution ``(3, h_p, w_p)``.

The insertion model composites a warped patch between a black-albedo and a
white-albedo render of the same viewpoint::

    I_P = warp(P, H) * (I1 - I0) + I0

Functions accepting a patch also accept an :class:`~vopatch.autodiff.Tensor`
and then return a Tensor recorded on the active tape.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import apply_homography


class SingularHomography(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class AlbedoPair:
    """Black/white albedo renders of one viewpoint plus patch coverage."""

    I0: np.ndarray
    I1: np.ndarray
    coverage_mask: np.ndarray

    def __post_init__(self):
        if self.I0.shape != self.I1.shape or self.coverage_mask.shape != self.I0.shape[1:]:
            raise DimensionMismatch(
                f"albedo shapes differ: {self.I0.shape}, {self.I1.shape}, mask {self.coverage_mask.shape}"
            )

    @property
    def contrast(self) -> np.ndarray:
        return self.I1 - self.I0


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionMismatch(f"{name} must be shaped (3, H, W), got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return img


def _check_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise DimensionMismatch(f"homography must be 3x3, got {h.shape}")
    if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) <= 1e-12:
        raise SingularHomography("homography is not invertible")
    return h


def patch_sampler(h: np.ndarray, out_dims: tuple[int, int], patch_dims: tuple[int, int]) -> ad.BilinearSampler:
    """Sampler pulling patch texels to every output pixel through ``h``.

    ``out_dims`` and ``patch_dims`` are ``(height, width)``.
    """
    h = _check_homography(h)
    out_h, out_w = out_dims
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    src = apply_homography(np.linalg.inv(h), np.stack([xs, ys], axis=-1))
    # Pixels whose preimage lies behind the patch plane must not sample it.
    hom_w = np.linalg.inv(h)[2] @ np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    src[hom_w.reshape(out_h, out_w) <= 0] = np.nan
    return ad.BilinearSampler(src[..., 0], src[..., 1], patch_dims, offset=0.5)


def warp_patch(P, h: np.ndarray, out_dims: tuple[int, int]):
    """Bilinear warp of patch ``P (3, h_p, w_p)`` into an ``out_dims`` image; zero outside."""
    sampler = patch_sampler(h, out_dims, P.shape[-2:])
    out = ad.bilinear_sample(P, sampler) if isinstance(P, ad.Tensor) else sampler.apply(P)
    if isinstance(out, ad.Tensor):
        return ad.reshape(out, (P.shape[0],) + tuple(out_dims))
    return out.reshape((P.shape[0],) + tuple(out_dims))


def insert_patch(frame: AlbedoPair, P, h: np.ndarray):
    """Composite ``P`` into the viewpoint described by ``frame``."""
    out_dims = frame.I0.shape[1:]
    if P.shape[0] != frame.I0.shape[0]:
        raise DimensionMismatch(f"patch has {P.shape[0]} channels, frame has {frame.I0.shape[0]}")
    warped = warp_patch(P, h, out_dims)
    if isinstance(warped, ad.Tensor):
        return ad.add(ad.mul(warped, frame.contrast), frame.I0)
    return warped * frame.contrast + frame.I0


def shrink_mask(patch_dims: tuple[int, int], fraction: float) -> np.ndarray:
    """``(h_p, w_p)`` 0/1 mask of the centered sub-rectangle kept by :func:`shrink_patch`."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"shrink fraction must be in (0, 1], got {fraction}")
    h_p, w_p = patch_dims
    mask = np.zeros((h_p, w_p))
    sh, sw = max(1, int(round(fraction * h_p))), max(1, int(round(fraction * w_p)))
    top, left = (h_p - sh) // 2, (w_p - sw) // 2
    mask[top : top + sh, left : left + sw] = 1.0
    return mask


def shrink_patch(P, fraction: float):
    """Zero the patch outside its centered ``fraction``-sided sub-rectangle.

    Zero texels contribute nothing to the warp, so the margins render as the
    black-albedo image ``I0``.
    """
    if fraction == 1.0:
        return P
    mask = shrink_mask(P.shape[-2:], fraction)
    return ad.mul(P, mask) if isinstance(P, ad.Tensor) else P * mask


def random_patch(dims: tuple[int, int], seed) -> np.ndarray:
    """I.i.d. uniform ``[0, 1]`` patch of ``(h_p, w_p)`` texels."""
    rng = np.random.default_rng(seed)
    return rng.random((3,) + tuple(dims))


def permute_patch(P: np.ndarray, seed) -> np.ndarray:
    """Shuffle texel positions, moving RGB triplets together."""
    P = np.asarray(P, dtype=np.float64)
    c, h, w = P.shape
    perm = np.random.default_rng(seed).permutation(h * w)
    return P.reshape(c, h * w)[:, perm].reshape(c, h, w)


def luminance(img):
    """Rec. 601 luma of ``(..., 3, H, W)`` images."""
    weights = np.array([0.299, 0.587, 0.114])
    if isinstance(img, ad.Tensor):
        return ad.sum(ad.mul(img, weights[:, None, None]), axis=-3)
    return np.tensordot(weights, img, axes=([0], [-3])) if img.ndim == 3 else np.einsum(
        "c,...chw->...hw", weights, img
    )


def to_float32_precision(img: np.ndarray) -> np.ndarray:
    """Round to float32 so images survive a float32 file round trip bit-exactly."""
    return np.asarray(img, dtype=np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_MAGIC = b"VPFI"
_HEADER = struct.Struct("<4sIII")


def save_float_image(path, img: np.ndarray) -> None:
    """Write ``(C, H, W)`` data: header (magic, width, height, channels) then
    row-major, channel-interleaved little-endian float32 samples."""
    img = np.asarray(img)
    c, h, w = img.shape
    payload = np.ascontiguousarray(np.transpose(img, (1, 2, 0)), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, w, h, c))
        fh.write(payload.tobytes())


def load_float_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h, c = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a float image file")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=w * h * c)
    return data.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64)


def save_png(path, img: np.ndarray) -> None:
    """8-bit preview; lossy and never read back."""
    from PIL import Image as PILImage

    arr = np.clip(np.round(np.transpose(np.asarray(img), (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)
