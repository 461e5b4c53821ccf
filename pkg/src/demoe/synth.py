"""Synthetic blur: kernel construction, image degradation, and the toy dataset.

The formation model is y = x (*) k + n with reflect padding at the borders.
Five degradation families stand in for the real capture conditions:

    global_motion    straight streak over the whole frame (length + angle)
    local_motion     straight streak inside a feathered rectangle, sharp outside
    defocus          anti-aliased disk kernel over the whole frame
    lowlight_motion  parametric darkening (gain * x^gamma), then motion blur
                     and additive Gaussian noise
    mixed_motion     rasterized random-walk trajectory kernel over the whole
                     frame (multi-directional smear, as camera plus object
                     motion produces)

Every kernel is non-negative and sums to one, so a degenerate spec (length 1,
radius 0) degrades to the identity. Clean images are procedural: gradient
backgrounds with rectangles, disks, lines and checker patches, which gives
the sharp edges a deblurring signal needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Manifest, ManifestRecord, image_mse, quantize, save_image

__all__ = [
    "FAMILIES",
    "BlurSpec",
    "make_kernel",
    "conv_reflect",
    "feathered_mask",
    "degrade",
    "synth_clean_image",
    "random_blur_spec",
    "generate_toy_dataset",
]

FAMILIES = ("global_motion", "local_motion", "defocus", "lowlight_motion", "mixed_motion")

MASK_FEATHER = 4


@dataclass
class BlurSpec:
    """Parameters of one degradation draw."""

    family: str
    length: float = 1.0  # linear motion, pixels
    angle: float = 0.0  # radians
    radius: float = 0.0  # defocus disk
    traj_seed: int = 0  # shake trajectory
    traj_steps: int = 12
    noise_sigma: float = 0.0
    mask: Optional[tuple] = None  # (top, left, height, width) for local_motion
    gain: float = 1.0  # low-light darkening
    gamma: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown blur family {self.family!r}")
        if self.length < 1:
            raise ValueError(f"motion length must be >= 1, got {self.length}")
        if self.radius < 0:
            raise ValueError(f"disk radius must be >= 0, got {self.radius}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if self.traj_steps < 1:
            raise ValueError(f"trajectory steps must be >= 1, got {self.traj_steps}")
        if not (self.gain > 0 and self.gamma > 0):
            raise ValueError("darkening gain and gamma must be positive")


# ---------------------------------------------------------------------------
# kernels


def _splat(k: np.ndarray, y: float, x: float, mass: float) -> None:
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    fy, fx = y - y0, x - x0
    k[y0, x0] += mass * (1 - fy) * (1 - fx)
    if fx > 0:
        k[y0, x0 + 1] += mass * (1 - fy) * fx
    if fy > 0:
        k[y0 + 1, x0] += mass * fy * (1 - fx)
    if fy > 0 and fx > 0:
        k[y0 + 1, x0 + 1] += mass * fy * fx


def line_kernel(length: float, angle: float) -> np.ndarray:
    """Uniform line of ~``length`` pixels at ``angle``; length 1 is a delta."""
    n = int(round(length))
    if n <= 1:
        return np.array([[1.0]])
    size = n if n % 2 else n + 1
    k = np.zeros((size, size))
    c = (size - 1) / 2.0
    dy, dx = math.sin(angle), math.cos(angle)
    for t in np.arange(n) - (n - 1) / 2.0:
        _splat(k, c + t * dy, c + t * dx, 1.0 / n)
    return k / k.sum()


def disk_kernel(radius: float) -> np.ndarray:
    """Anti-aliased disk; radius 0 is a delta."""
    size = 2 * math.ceil(radius) + 1
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.hypot(yy - c, xx - c)
    k = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    return k / k.sum()


def shake_kernel(traj_seed: int, steps: int) -> np.ndarray:
    """Camera-shake trajectory: a momentum random walk, rasterized and normalized."""
    rng = np.random.default_rng(np.random.SeedSequence([0x7A17, int(traj_seed)]))
    vel = np.zeros(2)
    pts = [np.zeros(2)]
    for _ in range(steps - 1):
        vel = 0.6 * vel + rng.normal(size=2)
        pts.append(pts[-1] + vel)
    pts = np.array(pts)
    pts -= pts.mean(axis=0)
    extent = np.abs(pts).max()
    if extent == 0.0:
        return np.array([[1.0]])
    target = rng.uniform(2.2, 4.2)
    pts *= target / extent
    size = 2 * math.ceil(target) + 1
    c = (size - 1) / 2.0
    k = np.zeros((size, size))
    substeps = 5
    for a, b in zip(pts[:-1], pts[1:]):
        for s in range(substeps):
            p = a + (b - a) * (s / substeps)
            _splat(k, c + p[0], c + p[1], 1.0)
    _splat(k, c + pts[-1][0], c + pts[-1][1], 1.0)
    return k / k.sum()


def make_kernel(spec: BlurSpec) -> np.ndarray:
    if spec.family == "defocus":
        return disk_kernel(spec.radius)
    if spec.family == "mixed_motion":
        return shake_kernel(spec.traj_seed, spec.traj_steps)
    return line_kernel(spec.length, spec.angle)


# ---------------------------------------------------------------------------
# degradation


def conv_reflect(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """True 2-D convolution with reflect padding; img is (..., H, W)."""
    kh, kw = kernel.shape
    if kh == 1 and kw == 1:
        return img * kernel[0, 0]
    py, px = kh // 2, kw // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(py, py), (px, px)]
    xp = np.pad(img, pad, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    kf = kernel[::-1, ::-1]
    return np.einsum("...ij,ij->...", windows, kf)


def feathered_mask(rect: Optional[tuple], h: int, w: int, feather: int = MASK_FEATHER) -> np.ndarray:
    """Rectangle mask ramping 0 -> 1 over ``feather`` pixels inside its edge."""
    if rect is None:
        return np.zeros((h, w))
    top, left, mh, mw = rect
    if mh < 1 or mw < 1 or top < 0 or left < 0 or top + mh > h or left + mw > w:
        raise ValueError(f"mask rectangle {rect} does not fit a {h}x{w} frame")
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    dr = np.minimum(rows - top, top + mh - 1 - rows)
    dc = np.minimum(cols - left, left + mw - 1 - cols)
    d = np.minimum(dr, dc)
    return np.clip((d + 1) / feather, 0.0, 1.0)


def degrade(x: np.ndarray, spec: BlurSpec, seed: int):
    """Apply the formation model to a clean image in [0, 1].

    Returns ``(degraded image, class label)``. ``seed`` drives only the noise
    draw; all other randomness lives in the spec itself.
    """
    x = np.asarray(x, dtype=np.float64)
    _, h, w = x.shape
    base = spec.gain * np.power(x, spec.gamma) if spec.family == "lowlight_motion" else x
    kernel = make_kernel(spec)
    blurred = conv_reflect(base, kernel)
    if spec.family == "local_motion":
        m = feathered_mask(spec.mask, h, w)
        y = m * blurred + (1.0 - m) * base
    else:
        y = blurred
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([0xD347, int(seed)]))
        y = y + rng.normal(0.0, spec.noise_sigma, size=y.shape)
    return np.clip(y, 0.0, 1.0), FAMILIES.index(spec.family)


# ---------------------------------------------------------------------------
# procedural clean images


def synth_clean_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Gradient background plus random rectangles, disks, lines and checkers."""
    theta = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ramp = (yy * math.sin(theta) + xx * math.cos(theta) + 1.0) / 2.0
    c0 = rng.uniform(0.2, 1.0, size=3)
    c1 = rng.uniform(0.2, 1.0, size=3)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.0, 1.0, size=3)
        kind = rng.choice(("rect", "disk", "line", "checker"))
        if kind == "rect":
            mh, mw = rng.integers(size // 8, size // 2, size=2)
            top = int(rng.integers(0, size - mh + 1))
            left = int(rng.integers(0, size - mw + 1))
            img[:, top : top + mh, left : left + mw] = color[:, None, None]
        elif kind == "disk":
            cy, cx = rng.uniform(0, size, size=2)
            r = rng.uniform(size / 10, size / 4)
            mask = (np.mgrid[0:size, 0:size][0] - cy) ** 2 + (
                np.mgrid[0:size, 0:size][1] - cx
            ) ** 2 <= r * r
            img[:, mask] = color[:, None]
        elif kind == "line":
            ang = rng.uniform(0, math.pi)
            cy, cx = rng.uniform(0, size, size=2)
            thick = rng.uniform(0.6, 1.6)
            yy2, xx2 = np.mgrid[0:size, 0:size]
            dist = np.abs((yy2 - cy) * math.cos(ang) - (xx2 - cx) * math.sin(ang))
            img[:, dist <= thick] = color[:, None]
        else:
            cell = int(rng.integers(2, 7))
            mh, mw = rng.integers(size // 6, size // 2, size=2)
            top = int(rng.integers(0, size - mh + 1))
            left = int(rng.integers(0, size - mw + 1))
            yy3, xx3 = np.mgrid[0:mh, 0:mw]
            board = ((yy3 // cell + xx3 // cell) % 2).astype(np.float64)
            other = rng.uniform(0.0, 1.0, size=3)
            patch = color[:, None, None] * board + other[:, None, None] * (1 - board)
            img[:, top : top + mh, left : left + mw] = patch
    return np.clip(img, 0.0, 1.0)


def random_blur_spec(family: str, rng: np.random.Generator, size: int) -> BlurSpec:
    """Draw degradation parameters for one image of the given family."""
    if family == "global_motion":
        return BlurSpec(family, length=round(rng.uniform(7, 13)), angle=rng.uniform(0, math.pi))
    if family == "local_motion":
        fh, fw = rng.uniform(0.32, 0.64, size=2)
        mh = max(MASK_FEATHER * 2, round(fh * size))
        mw = max(MASK_FEATHER * 2, round(fw * size))
        top = int(rng.integers(0, size - mh + 1))
        left = int(rng.integers(0, size - mw + 1))
        return BlurSpec(
            family,
            length=round(rng.uniform(5, 9)),
            angle=rng.uniform(0, math.pi),
            mask=(top, left, mh, mw),
        )
    if family == "defocus":
        return BlurSpec(family, radius=rng.uniform(1.8, 3.6))
    if family == "lowlight_motion":
        return BlurSpec(
            family,
            length=round(rng.uniform(5, 9)),
            angle=rng.uniform(0, math.pi),
            gain=rng.uniform(0.1, 0.4),
            gamma=rng.uniform(1.5, 3.0),
            noise_sigma=rng.uniform(0.01, 0.03),
        )
    if family == "mixed_motion":
        return BlurSpec(
            family,
            traj_seed=int(rng.integers(0, 2**31 - 1)),
            traj_steps=int(rng.integers(8, 25)),
        )
    raise ValueError(f"unknown blur family {family!r}")


def generate_toy_dataset(
    n_per_class: int,
    size: int,
    seed: int,
    out_dir,
    classes: int = len(FAMILIES),
    scale_multiple: int = 4,
) -> Manifest:
    """Write a synthetic degraded/clean paired dataset and its manifest.

    Per-image randomness derives from (seed, record index), so records are
    reproducible independently of generation order.
    """
    if not (1 <= classes <= len(FAMILIES)):
        raise ValueError(f"classes must be in [1, {len(FAMILIES)}], got {classes}")
    if size % scale_multiple:
        raise ValueError(f"size {size} must be divisible by {scale_multiple}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for label, family in enumerate(FAMILIES[:classes]):
        for j in range(n_per_class):
            index = label * n_per_class + j
            rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
            clean = synth_clean_image(rng, size)
            spec = random_blur_spec(family, rng, size)
            noise_seed = int(rng.integers(0, 2**31 - 1))
            degraded, lab = degrade(clean, spec, noise_seed)
            clean_rel = f"images/{family}_{j:04d}_clean.png"
            blur_rel = f"images/{family}_{j:04d}_blur.png"
            save_image(clean, out_dir / clean_rel)
            save_image(degraded, out_dir / blur_rel)
            mse = image_mse(quantize(degraded), quantize(clean))
            records.append(ManifestRecord(blur_rel, clean_rel, lab, mse))

    manifest = Manifest(
        records,
        [
            {
                "op": "generate_toy_dataset",
                "n_per_class": n_per_class,
                "size": size,
                "seed": seed,
                "classes": classes,
            }
        ],
    )
    manifest.save(out_dir / "manifest.json")
    return manifest
