"""Synthetic super-resolution data, bicubic resampling and PNG datasets.

Images are float64 arrays in [0, 1]. Single images are ``(3, H, W)``;
batches are ``(N, 3, H, W)``.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .tensor import ConfigurationError, ContractError

BICUBIC_A = -0.5


# -- bicubic resampling ------------------------------------------------------------

def cubic_kernel(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into [0, n) without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


@functools.lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int, a: float = BICUBIC_A) -> np.ndarray:
    """(n_out, n_in) bicubic interpolation matrix along one axis.

    Pixel centers are aligned (half-pixel convention). When shrinking, the
    kernel is widened by the scale factor so it also acts as an anti-alias
    filter. Out-of-range taps are reflected back into the image.
    """
    factor = n_out / n_in
    stretch = 1.0 / factor if factor < 1.0 else 1.0
    centers = (np.arange(n_out) + 0.5) / factor - 0.5
    radius = 2.0 * stretch
    first = np.floor(centers - radius).astype(int)
    taps = int(np.ceil(2 * radius)) + 2
    offsets = first[:, None] + np.arange(taps)[None, :]
    weights = cubic_kernel((offsets - centers[:, None]) / stretch, a)
    weights /= weights.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(mat, (rows, _reflect_index(offsets, n_in).ravel()), weights.ravel())
    mat.flags.writeable = False
    return mat


def bicubic_resize(image: np.ndarray, out_hw: Tuple[int, int], a: float = BICUBIC_A) -> np.ndarray:
    """Separable bicubic resize over the last two axes."""
    h, w = image.shape[-2:]
    rows = resize_matrix(h, out_hw[0], a)
    cols = resize_matrix(w, out_hw[1], a)
    return np.einsum("ih,...hw,jw->...ij", rows, image, cols)


def bicubic_downscale(image: np.ndarray, r: int) -> np.ndarray:
    h, w = image.shape[-2:]
    if r < 1 or h % r or w % r:
        raise ContractError(f"image {h}x{w} not divisible by scale {r}")
    if r == 1:
        return image.copy()
    return bicubic_resize(image, (h // r, w // r))


def bicubic_upscale(image: np.ndarray, r: int) -> np.ndarray:
    h, w = image.shape[-2:]
    if r == 1:
        return image.copy()
    return bicubic_resize(image, (h * r, w * r))


# -- synthetic textures ---------------------------------------------------------------

def _colors(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    return rng.uniform(0, 1, (3, 1, 1)), rng.uniform(0, 1, (3, 1, 1))


def _gradient(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    c0, c1 = _colors(rng)
    return c0 + (c1 - c0) * ramp[None]


def _band_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth colored noise (mostly below the low-resolution Nyquist limit)."""
    sigma = rng.uniform(2.0, 4.0)
    field = gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, sigma, sigma), mode="wrap")
    field /= max(field.std(), 1e-12)
    return rng.uniform(0.2, 0.8, (3, 1, 1)) + 0.1 * field


def _checker_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    period = int(rng.integers(4, 13))
    dy, dx = rng.integers(0, period, 2)
    yy, xx = np.mgrid[0:h, 0:w]
    return (((yy + dy) // period + (xx + dx) // period) % 2).astype(np.float64)


def _stripe_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(6.0, 16.0)
    phase = np.cos(theta) * xx + np.sin(theta) * yy + rng.uniform(0, period)
    return (np.mod(phase, period) < period / 2).astype(np.float64)


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Union of a few random rectangles and disks."""
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            hy, hx = rng.uniform(min(3, h / 2), h / 2), rng.uniform(min(3, w / 2), w / 2)
            mask |= (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        else:
            top = min(h, w) / 3
            rad = rng.uniform(min(3, top), top)
            mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
    return mask.astype(np.float64)


_BACKGROUNDS = (_gradient, _band_noise)
_MASKS = (_checker_mask, _stripe_mask, _shape_mask)


def synthetic_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Hard-edged checkerboards, stripes or shapes over a smooth background.

    The background is a color gradient or low-pass noise; one or two masked
    layers are composited on top with random opacity. The result is rounded
    to 8-bit levels so that in-memory images and their PNG files agree.
    """
    img = _BACKGROUNDS[int(rng.integers(len(_BACKGROUNDS)))](rng, h, w)
    for _ in range(int(rng.integers(1, 3))):
        mask = _MASKS[int(rng.integers(len(_MASKS)))](rng, h, w)
        opacity = rng.uniform(0.5, 1.0)
        color = rng.uniform(0, 1, (3, 1, 1))
        img = img + opacity * mask[None] * (color - img)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def synthetic_images(n: int, hw: Tuple[int, int], seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([synthetic_image(rng, hw[0], hw[1]) for _ in range(n)])


# -- paired data ----------------------------------------------------------------------

@dataclass
class SRPairs:
    """Aligned low/high resolution batches."""

    lr: np.ndarray
    hr: np.ndarray
    scale: int

    def __post_init__(self) -> None:
        if self.lr.shape[0] != self.hr.shape[0]:
            raise ContractError("lr and hr batch sizes differ")
        if self.lr.shape[-2] * self.scale != self.hr.shape[-2] or self.lr.shape[-1] * self.scale != self.hr.shape[-1]:
            raise ContractError(f"lr {self.lr.shape} and hr {self.hr.shape} disagree with scale {self.scale}")

    def __len__(self) -> int:
        return self.lr.shape[0]

    def subset(self, idx) -> "SRPairs":
        return SRPairs(self.lr[idx], self.hr[idx], self.scale)

    @classmethod
    def from_hr(cls, hr: np.ndarray, scale: int) -> "SRPairs":
        return cls(bicubic_downscale(hr, scale), hr, scale)


def extract_patches(images: np.ndarray, patch: int, stride: Optional[int] = None) -> np.ndarray:
    """All ``patch x patch`` crops on a regular grid, (N, 3, H, W) -> (M, 3, p, p)."""
    stride = stride or patch
    _, _, h, w = images.shape
    if patch > h or patch > w:
        raise ContractError(f"patch {patch} larger than image {h}x{w}")
    out = [
        images[:, :, i : i + patch, j : j + patch]
        for i in range(0, h - patch + 1, stride)
        for j in range(0, w - patch + 1, stride)
    ]
    return np.concatenate(out, axis=0)


def make_patch_pairs(hr_images: np.ndarray, scale: int, lr_patch: int, lr_stride: Optional[int] = None) -> SRPairs:
    """Downscale whole images, then cut aligned LR/HR patches."""
    lr_stride = lr_stride or lr_patch
    lr_images = bicubic_downscale(hr_images, scale)
    lr = extract_patches(lr_images, lr_patch, lr_stride)
    hr = extract_patches(hr_images, lr_patch * scale, lr_stride * scale)
    return SRPairs(lr, hr, scale)


@dataclass
class ToyTask:
    """Two disjoint patch splits for the search, plus whole images.

    ``train`` holds the whole training images behind both splits; retraining
    uses them so that the network sees the same border geometry as at test
    time.
    """

    alpha_split: SRPairs
    weight_split: SRPairs
    test: SRPairs
    train_images: Optional[SRPairs] = None

    @property
    def train(self) -> SRPairs:
        if self.train_images is not None:
            return self.train_images
        return SRPairs(
            np.concatenate([self.alpha_split.lr, self.weight_split.lr]),
            np.concatenate([self.alpha_split.hr, self.weight_split.hr]),
            self.alpha_split.scale,
        )


def toy_task(
    seed: int = 0,
    scale: int = 2,
    n_train_images: int = 8,
    n_test_images: int = 4,
    image_hw: Tuple[int, int] = (48, 48),
    lr_patch: int = 8,
    lr_stride: Optional[int] = None,
) -> ToyTask:
    """Synthetic SR task; training images are split in half by image, not patch."""
    ss = np.random.SeedSequence(seed)
    train_seed, test_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    train = synthetic_images(n_train_images, image_hw, train_seed)
    test = synthetic_images(n_test_images, image_hw, test_seed)
    half = n_train_images // 2
    return ToyTask(
        make_patch_pairs(train[:half], scale, lr_patch, lr_stride),
        make_patch_pairs(train[half:], scale, lr_patch, lr_stride),
        SRPairs.from_hr(test, scale),
        SRPairs.from_hr(train, scale),
    )


# -- PNG datasets ---------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_png_dir(path) -> List[np.ndarray]:
    """Every ``*.png`` in a directory, sorted by file name."""
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files in {path}")
    return [load_png(f) for f in files]


def write_dataset(
    out_dir, n_images: int = 8, image_hw: Tuple[int, int] = (48, 48), seed: int = 0, scale: int = 2
) -> dict:
    """Write HR/LR PNG pairs plus a manifest with file digests."""
    if image_hw[0] % scale or image_hw[1] % scale:
        raise ConfigurationError(f"image size {image_hw} not divisible by scale {scale}")
    out = Path(out_dir)
    (out / "hr").mkdir(parents=True, exist_ok=True)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    hr = synthetic_images(n_images, image_hw, seed)
    lr = bicubic_downscale(hr, scale)
    files = []
    for i in range(n_images):
        name = f"{i:04d}.png"
        save_png(hr[i], out / "hr" / name)
        save_png(lr[i], out / "lr" / name)
        for sub in ("hr", "lr"):
            digest = hashlib.sha256((out / sub / name).read_bytes()).hexdigest()
            files.append({"path": f"{sub}/{name}", "sha256": digest})
    manifest = {"seed": seed, "scale": scale, "n_images": n_images, "image_hw": list(image_hw), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(path, scale: Optional[int] = None) -> SRPairs:
    """Read a directory written by :func:`write_dataset`, or a bare PNG folder.

    A bare folder holds HR images only; LR images are produced by bicubic
    downscaling with ``scale`` (required in that case).
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    manifest = root / "manifest.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        hr = np.stack(load_png_dir(root / "hr"))
        lr = np.stack(load_png_dir(root / "lr"))
        return SRPairs(lr, hr, int(meta["scale"]))
    if scale is None:
        raise ConfigurationError("a bare PNG folder needs an explicit scale")
    hr_list = load_png_dir(root)
    h = min(im.shape[1] for im in hr_list) // scale * scale
    w = min(im.shape[2] for im in hr_list) // scale * scale
    hr = np.stack([im[:, :h, :w] for im in hr_list])
    return SRPairs.from_hr(hr, scale)


def split_pairs(pairs: SRPairs, rng: np.random.Generator, fraction: float = 0.5) -> Tuple[SRPairs, SRPairs]:
    """Shuffle and split into two disjoint parts."""
    idx = rng.permutation(len(pairs))
    cut = int(round(len(pairs) * fraction))
    if cut == 0 or cut == len(pairs):
        raise ConfigurationError("not enough samples to form two disjoint splits")
    return pairs.subset(np.sort(idx[:cut])), pairs.subset(np.sort(idx[cut:]))
