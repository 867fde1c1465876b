"""Datasets, perturbation specs, and lazily perturbed dataset views.

A perturbed dataset is never materialized whole: a :class:`PerturbedView`
stores only the base-dataset reference and the perturbation itself, so its
footprint is a single image regardless of dataset size.  Patch overlays are
implemented by inverse-mapped bilinear sampling and exposed both as a plain
array transform (for training-time views) and as a differentiable graph op
(for crafting patch gradients).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

CIFAR_SIDE = 32
CIFAR_CLASSES = 10
_CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W], values in [0, 1]
    labels: np.ndarray  # [N], ints in [0, num_classes)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError("images must be [N,C,H,W] with one label per image")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------

def load_cifar10(path, split: str = "train") -> Dataset:
    """Read CIFAR-10 binary records: 1 label byte + 3072 channel-major pixels."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % _CIFAR_RECORD != 0:
        raise ValueError(f"{path}: truncated record ({len(blob)} bytes is not a multiple of {_CIFAR_RECORD})")
    n = len(blob) // _CIFAR_RECORD
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, _CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() >= CIFAR_CLASSES:
        raise ValueError(f"{path}: label byte {labels.max()} out of range")
    images = raw[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE).astype(T.get_default_dtype()) / 255.0
    return Dataset(images, labels, CIFAR_CLASSES, split)


def cifar10_bytes(dataset: Dataset) -> bytes:
    """Inverse of :func:`load_cifar10` for datasets whose pixels came from bytes."""
    n = len(dataset)
    raw = np.empty((n, _CIFAR_RECORD), dtype=np.uint8)
    raw[:, 0] = dataset.labels
    raw[:, 1:] = np.round(dataset.images * 255.0).reshape(n, -1)
    return raw.tobytes()


# ---------------------------------------------------------------------------
# synthetic desk-scale data
# ---------------------------------------------------------------------------

def class_pattern(k: int, num_classes: int, side: int, channels: int = 3) -> np.ndarray:
    """Deterministic per-class texture: oriented gradient plus an oriented grating."""
    angle = np.pi * k / num_classes
    freq = 1.5 + (k % 3)
    phase = 2.0 * np.pi * ((5 * k) % 7) / 7.0
    ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    axis = (np.cos(angle) * xs + np.sin(angle) * ys) / side
    grating = np.sin(2.0 * np.pi * freq * axis + phase)
    gradient = axis - axis.mean()
    img = np.empty((channels, side, side))
    for c in range(channels):
        hue = 0.5 + 0.5 * np.cos(2.0 * np.pi * (k / num_classes) + 2.0 * np.pi * c / max(channels, 1))
        img[c] = 0.5 + 0.10 * hue * grating + 0.10 * gradient
    return img


def make_synthetic(
    classes: int,
    per_class: int,
    side: int,
    seed: int,
    channels: int = 3,
    noise: float = 0.06,
    split: str = "train",
) -> Dataset:
    """Balanced synthetic dataset of noisy class textures, pixels clipped to [0, 1]."""
    if classes < 2 or per_class < 2 or side < 8:
        raise ValueError("need classes >= 2, per_class >= 2, side >= 8")
    rng = np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    patterns = np.stack([class_pattern(k, classes, side, channels) for k in range(classes)])
    images = patterns[labels] + noise * rng.standard_normal((n, channels, side, side))
    images = np.clip(images, 0.0, 1.0).astype(dtype)
    return Dataset(images, labels, classes, split)


def synthetic_splits(classes: int, per_class: int, side: int, seed: int, channels: int = 3) -> dict[str, Dataset]:
    """Train/valid/test datasets drawn from the same class patterns, disjoint noise."""
    return {
        "train": make_synthetic(classes, per_class, side, seed, channels, split="train"),
        "valid": make_synthetic(classes, max(2, per_class // 4), side, seed + 1, channels, split="valid"),
        "test": make_synthetic(classes, max(2, per_class // 2), side, seed + 2, channels, split="test"),
    }


# ---------------------------------------------------------------------------
# perturbation specs
# ---------------------------------------------------------------------------

def disc_mask(side: int) -> np.ndarray:
    """Binary disc of diameter ``side`` over pixel centers."""
    ys, xs = np.meshgrid(np.arange(side) + 0.5, np.arange(side) + 0.5, indexing="ij")
    r = side / 2.0
    return ((ys - r) ** 2 + (xs - r) ** 2 <= r * r).astype(np.float64)


@dataclass
class PerturbationSpec:
    """Either a universal additive perturbation or a placeable patch.

    Universal: ``xi`` is image-shaped with max-norm at most ``epsilon``.
    Patch: ``xi`` is C x P x P with pixels in [0, 1]; ``mask`` is the disc of
    diameter P; ``chi`` is the overlay diameter as a fraction of the image
    side and ``theta_max`` the rotation bound in radians.
    """
    kind: str
    xi: np.ndarray
    epsilon: float | None = None
    mask: np.ndarray | None = None
    chi: float | None = None
    theta_max: float | None = None

    def __post_init__(self):
        self.xi = np.asarray(self.xi)
        if self.kind == "universal":
            if self.epsilon is None or self.epsilon <= 0:
                raise ValueError("universal perturbation needs epsilon > 0")
            if np.abs(self.xi).max(initial=0.0) > self.epsilon:
                raise ValueError("universal perturbation exceeds its epsilon budget")
        elif self.kind == "patch":
            if self.xi.ndim != 3 or self.xi.shape[1] != self.xi.shape[2]:
                raise ValueError("patch must be [C, P, P]")
            if self.xi.min(initial=0.0) < 0.0 or self.xi.max(initial=0.0) > 1.0:
                raise ValueError("patch pixels must lie in [0, 1]")
            if not (self.chi and 0.0 < self.chi <= 1.0):
                raise ValueError("patch needs 0 < chi <= 1")
            if self.theta_max is None or self.theta_max < 0:
                raise ValueError("patch needs theta_max >= 0")
            if self.mask is None:
                self.mask = disc_mask(self.xi.shape[1])
        else:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")

    @property
    def patch_side(self) -> int:
        return self.xi.shape[1]

    def storage_bytes(self) -> int:
        n = self.xi.nbytes
        if self.mask is not None:
            n += self.mask.nbytes
        return n


def zero_universal(image_shape: tuple[int, int, int], epsilon: float) -> PerturbationSpec:
    return PerturbationSpec("universal", np.zeros(image_shape, dtype=T.get_default_dtype()), epsilon=epsilon)


def gray_patch(channels: int, side: int, chi: float, theta_max: float) -> PerturbationSpec:
    xi = np.full((channels, side, side), 0.5, dtype=T.get_default_dtype())
    return PerturbationSpec("patch", xi, chi=chi, theta_max=theta_max)


# ---------------------------------------------------------------------------
# perturbation application
# ---------------------------------------------------------------------------

def apply_universal(x: np.ndarray, xi: np.ndarray, epsilon: float) -> np.ndarray:
    """Add the shared perturbation and clip back to valid pixel range."""
    if np.abs(xi).max(initial=0.0) > epsilon:
        raise ValueError("perturbation exceeds its epsilon budget")
    return np.clip(x + xi, 0.0, 1.0)


def sample_placements(rng: np.random.Generator, count: int, side: int, chi: float, theta_max: float) -> np.ndarray:
    """Draw (a, b, theta) rows; centers keep the scaled disc fully inside."""
    radius = chi * side / 2.0
    a = rng.uniform(radius, side - radius, count)
    b = rng.uniform(radius, side - radius, count)
    theta = rng.uniform(-theta_max, theta_max, count)
    return np.stack([a, b, theta], axis=1)


def _overlay_gather(images_shape, patch_side: int, chi: float, placements: np.ndarray):
    """Bilinear gather plan: for each pixel center inside a warped disc, the

    four patch neighbors and weights that reconstruct the sampled value."""
    B, C, H, W = images_shape
    if placements.shape != (B, 3):
        raise ValueError(f"need one (a, b, theta) row per image, got {placements.shape}")
    scaled = chi * H
    radius = scaled / 2.0
    if np.any(placements[:, 0] < radius - 1e-9) or np.any(placements[:, 0] > H - radius + 1e-9) or \
       np.any(placements[:, 1] < radius - 1e-9) or np.any(placements[:, 1] > W - radius + 1e-9):
        raise ValueError("patch placement out of bounds")
    P = patch_side
    ys, xs = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    a = placements[:, 0][:, None, None]
    b = placements[:, 1][:, None, None]
    theta = placements[:, 2][:, None, None]
    dy = ys[None] - a
    dx = xs[None] - b
    # rotate the sampling grid by -theta so the rendered patch appears rotated by +theta
    ry = np.cos(theta) * dy + np.sin(theta) * dx
    rx = -np.sin(theta) * dy + np.cos(theta) * dx
    qy = ry * (P / scaled) + P / 2.0
    qx = rx * (P / scaled) + P / 2.0
    inside = (qy - P / 2.0) ** 2 + (qx - P / 2.0) ** 2 <= (P / 2.0) ** 2
    bidx, ridx, cidx = np.nonzero(inside)
    u = qy[bidx, ridx, cidx] - 0.5
    v = qx[bidx, ridx, cidx] - 0.5
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = u - i0
    fv = v - j0
    i1 = np.clip(i0 + 1, 0, P - 1)
    j1 = np.clip(j0 + 1, 0, P - 1)
    i0 = np.clip(i0, 0, P - 1)
    j0 = np.clip(j0, 0, P - 1)
    weights = np.stack([(1 - fu) * (1 - fv), (1 - fu) * fv, fu * (1 - fv), fu * fv])
    return bidx, ridx, cidx, (i0, j0, i1, j1), weights


def _overlay_sample(patch: np.ndarray, corners, weights) -> np.ndarray:
    i0, j0, i1, j1 = corners
    w00, w01, w10, w11 = weights
    return (
        w00 * patch[:, i0, j0]
        + w01 * patch[:, i0, j1]
        + w10 * patch[:, i1, j0]
        + w11 * patch[:, i1, j1]
    )  # [C, K]


def apply_patch(x: np.ndarray, xi: np.ndarray, chi: float, placements: np.ndarray) -> np.ndarray:
    """Overlay the patch on a batch at the given (a, b, theta) placements.

    Pixels whose centers fall inside the warped disc are replaced by the
    bilinear patch sample; all others are returned untouched.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
        placements = np.asarray(placements).reshape(1, 3)
    bidx, ridx, cidx, corners, weights = _overlay_gather(x.shape, xi.shape[1], chi, placements)
    out = x.copy()
    out[bidx, :, ridx, cidx] = _overlay_sample(xi, corners, weights).T
    return out[0] if single else out


def overlay_patch_op(images: np.ndarray, patch: Tensor, chi: float, placements: np.ndarray) -> Tensor:
    """Differentiable overlay: gradients flow through the bilinear weights

    into the patch pixels (and pass through untouched image pixels)."""
    images = np.asarray(images)
    bidx, ridx, cidx, corners, weights = _overlay_gather(images.shape, patch.shape[1], chi, placements)
    i0, j0, i1, j1 = corners
    w00, w01, w10, w11 = weights
    out = images.copy()
    out[bidx, :, ridx, cidx] = _overlay_sample(patch.data, corners, weights).T

    def bwd(g):
        if patch.requires_grad:
            gp = np.zeros_like(patch.data)
            gsel = g[bidx, :, ridx, cidx].T  # [C, K]
            chan = np.arange(patch.shape[0])[:, None]
            np.add.at(gp, (chan, i0[None, :], j0[None, :]), w00[None, :] * gsel)
            np.add.at(gp, (chan, i0[None, :], j1[None, :]), w01[None, :] * gsel)
            np.add.at(gp, (chan, i1[None, :], j0[None, :]), w10[None, :] * gsel)
            np.add.at(gp, (chan, i1[None, :], j1[None, :]), w11[None, :] * gsel)
            T._accumulate(patch, gp)

    return T._node(out, (patch,), bwd)


# ---------------------------------------------------------------------------
# lazy perturbed views
# ---------------------------------------------------------------------------

@dataclass
class PerturbedView:
    """A perturbed dataset held as (base reference, perturbation, seed).

    ``spec=None`` is the clean view.  Own storage is the perturbation only,
    independent of the base dataset's size.  Placement randomness is a pure
    function of (seed, draw), so repeated materialization with the same seed
    and draw index is identical; callers vary ``draw`` to resample.
    """
    base: Dataset
    spec: PerturbationSpec | None
    seed: int = 0

    def __len__(self) -> int:
        return len(self.base)

    @property
    def labels(self) -> np.ndarray:
        return self.base.labels

    @property
    def num_classes(self) -> int:
        return self.base.num_classes

    def storage_bytes(self) -> int:
        return self.spec.storage_bytes() if self.spec is not None else 0

    def materialize(self, indices, draw: int = 0) -> np.ndarray:
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= len(self.base)):
            raise IndexError("index out of range")
        x = self.base.images[indices]
        if self.spec is None:
            return x.copy()
        if self.spec.kind == "universal":
            return apply_universal(x, self.spec.xi, self.spec.epsilon)
        rng = np.random.default_rng((self.seed, draw))
        placements = sample_placements(rng, len(indices), x.shape[2], self.spec.chi, self.spec.theta_max)
        return apply_patch(x, self.spec.xi, self.spec.chi, placements)


def clean_view(dataset: Dataset) -> PerturbedView:
    return PerturbedView(dataset, None)


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------

class BatchSampler:
    """Without-replacement batches; the permutation is reshuffled per epoch."""

    def __init__(self, num_items: int, rng: np.random.Generator):
        if num_items < 1:
            raise ValueError("empty dataset")
        self.num_items = num_items
        self.rng = rng
        self._perm = rng.permutation(num_items)
        self._pos = 0

    def next_indices(self, size: int) -> np.ndarray:
        if size < 1:
            raise ValueError("batch size must be >= 1")
        if size > self.num_items:
            raise ValueError(f"batch size {size} exceeds dataset size {self.num_items}")
        out = np.empty(size, dtype=np.int64)
        filled = 0
        while filled < size:
            if self._pos == self.num_items:
                self._perm = self.rng.permutation(self.num_items)
                self._pos = 0
            take = min(size - filled, self.num_items - self._pos)
            out[filled : filled + take] = self._perm[self._pos : self._pos + take]
            self._pos += take
            filled += take
        return out


def sample_batch(source, size: int, sampler: BatchSampler, draw: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Next batch of (images, labels) from a Dataset or PerturbedView."""
    indices = sampler.next_indices(size)
    if isinstance(source, PerturbedView):
        return source.materialize(indices, draw=draw), source.labels[indices]
    return source.images[indices], source.labels[indices]


# ---------------------------------------------------------------------------
# PPM export
# ---------------------------------------------------------------------------

def to_ppm_bytes(spec: PerturbationSpec) -> bytes:
    """Render a perturbation as binary PPM (P6, maxval 255).

    Universal perturbations are shifted from [-eps, eps] into display range;
    patches are in [0, 1] already and map directly.
    """
    if spec.kind == "universal":
        scaled = np.round((spec.xi + spec.epsilon) / (2.0 * spec.epsilon) * 255.0)
    else:
        scaled = np.round(spec.xi * 255.0)
    img = np.clip(scaled, 0, 255).astype(np.uint8)
    c, h, w = img.shape
    if c == 1:
        img = np.repeat(img, 3, axis=0)
    elif c != 3:
        raise ValueError(f"cannot export {c}-channel image as PPM")
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + img.transpose(1, 2, 0).tobytes()


def export_ppm(spec: PerturbationSpec, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_ppm_bytes(spec))
