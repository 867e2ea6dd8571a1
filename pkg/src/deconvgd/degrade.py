"""Image degradation model and dataset synthesis.

The forward model is y = k * x + n with replicate (edge-clamp) boundary
handling, additive Gaussian noise, and 8-bit quantization.  The adjoint
operator is the exact matrix transpose of the padded convolution, so
<Ax, z> == <x, At z> holds to floating-point accuracy; away from the
boundary it coincides with convolution by the 180-degree-rotated kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from scipy.signal import convolve2d

from .autodiff import Tensor, linear_map

KERNEL_SIDES = (11, 21, 31, 41)


@dataclass(frozen=True)
class Kernel:
    """2-D blur kernel: odd side, nonnegative taps summing to 1."""

    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        object.__setattr__(self, "taps", taps)
        if taps.ndim != 2 or taps.shape[0] != taps.shape[1]:
            raise ValueError(f"kernel must be square, got shape {taps.shape}")
        side = taps.shape[0]
        if side % 2 == 0 or not 3 <= side <= 41:
            raise ValueError(f"kernel side must be odd and in [3, 41], got {side}")
        if taps.min() < 0:
            raise ValueError("kernel taps must be nonnegative")
        if abs(taps.sum() - 1.0) > 1e-8:
            raise ValueError(f"kernel taps must sum to 1, got {taps.sum()}")

    @property
    def side(self) -> int:
        return self.taps.shape[0]

    def rotated(self) -> "Kernel":
        """The kernel rotated by 180 degrees (flipped on both axes)."""
        return Kernel(np.ascontiguousarray(self.taps[::-1, ::-1]))


def delta_kernel(side: int = 3) -> Kernel:
    taps = np.zeros((side, side))
    taps[side // 2, side // 2] = 1.0
    return Kernel(taps)


@dataclass
class Triplet:
    """One sample: ground truth, blur kernel, degraded observation."""

    truth: Tensor
    kernel: Kernel
    observed: Tensor
    noise_sigma: float
    seed: int | None = None


# ---------------------------------------------------------------------
# blur operator and its exact adjoint
# ---------------------------------------------------------------------


def _fold_pad_adjoint(gp: np.ndarray, r: int, h: int, w: int) -> np.ndarray:
    """Adjoint of replicate padding: collapse margins onto edge pixels."""
    g = gp[r : r + h, :].copy()
    if r:
        g[0, :] += gp[:r, :].sum(axis=0)
        g[-1, :] += gp[r + h :, :].sum(axis=0)
    out = g[:, r : r + w]
    if r:
        out[:, 0] += g[:, :r].sum(axis=1)
        out[:, -1] += g[:, r + w :].sum(axis=1)
    return np.ascontiguousarray(out)


def _blur_plane(plane: np.ndarray, taps: np.ndarray, adjoint: bool) -> np.ndarray:
    r = taps.shape[0] // 2
    if adjoint:
        full = convolve2d(plane, taps[::-1, ::-1], mode="full")
        return _fold_pad_adjoint(full, r, plane.shape[0], plane.shape[1])
    padded = np.pad(plane, r, mode="edge")
    return convolve2d(padded, taps, mode="valid")


def _blur_batch(x: np.ndarray, kernels: list[np.ndarray], adjoint: bool) -> np.ndarray:
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        for c in range(x.shape[1]):
            out[b, c] = _blur_plane(x[b, c], kernels[b], adjoint)
    return out


def _kernel_list(k, batch: int) -> list[np.ndarray]:
    if isinstance(k, Kernel):
        return [k.taps] * batch
    kernels = [kk.taps for kk in k]
    if len(kernels) != batch:
        raise ValueError(f"got {len(kernels)} kernels for batch of {batch}")
    return kernels


def _check_kernel_fits(x: Tensor, kernels: list[np.ndarray]) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"expected rank-4 image tensor, got shape {x.data.shape}")
    h, w = x.data.shape[2], x.data.shape[3]
    side = max(kk.shape[0] for kk in kernels)
    if side > h or side > w:
        raise ValueError(f"kernel side {side} exceeds image extent {h}x{w}")


def apply_A(x: Tensor, k) -> Tensor:
    """Blur: convolution with k under the replicate boundary rule.

    ``k`` is a Kernel shared by the whole batch, or one Kernel per batch
    element.  Differentiable in x; the backward pass is apply_At.
    """
    kernels = _kernel_list(k, x.data.shape[0])
    _check_kernel_fits(x, kernels)
    return linear_map(
        x,
        lambda a: _blur_batch(a, kernels, adjoint=False),
        lambda g: _blur_batch(g, kernels, adjoint=True),
    )


def apply_At(x: Tensor, k) -> Tensor:
    """Exact transpose of apply_A; flipped-kernel convolution with edge
    accumulation matching the replicate padding."""
    kernels = _kernel_list(k, x.data.shape[0])
    _check_kernel_fits(x, kernels)
    return linear_map(
        x,
        lambda a: _blur_batch(a, kernels, adjoint=True),
        lambda g: _blur_batch(g, kernels, adjoint=False),
    )


def fidelity_gradient(x: Tensor, y: Tensor, k) -> Tensor:
    """Gradient of the data-fit term 0.5 * ||y - Ax||^2, i.e. At(Ax - y)."""
    if x.data.shape != y.data.shape:
        raise ValueError(f"shapes {x.data.shape} and {y.data.shape} differ")
    return apply_At(apply_A(x, k) - y, k)


# ---------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------


def quantize8(v: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and round to the 8-bit grid i/255."""
    return np.round(np.clip(v, 0.0, 1.0) * 255.0) / 255.0


def degrade(x: Tensor, k: Kernel, sigma: float, rng_seed: int) -> Triplet:
    """Blur, add white Gaussian noise of std sigma, quantize to 8 bits.

    Noise is drawn independently per channel (including replicated-gray
    inputs) and deterministically from the seed.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    clean = _blur_batch(np.asarray(x.data, dtype=np.float64), _kernel_list(k, x.data.shape[0]), False)
    rng = np.random.default_rng(rng_seed)
    noisy = clean + rng.normal(0.0, sigma, size=clean.shape) if sigma > 0 else clean
    observed = quantize8(noisy)
    return Triplet(
        truth=Tensor(np.asarray(x.data, dtype=np.float64)),
        kernel=k,
        observed=Tensor(observed),
        noise_sigma=float(sigma),
        seed=int(rng_seed),
    )


# ---------------------------------------------------------------------
# kernel synthesis
# ---------------------------------------------------------------------


def gen_kernel(side: int, rng_seed: int) -> Kernel:
    """Random camera-shake-like kernel.

    A smooth random 2-D walk is resampled densely (sub-pixel steps),
    splatted with bilinear weights, blurred with a 0.5 px Gaussian, and
    normalized.  The support is 4-connected by construction: consecutive
    samples are closer than one pixel and the post-blur dilates the path.
    """
    if side % 2 == 0:
        raise ValueError(f"kernel side must be odd, got {side}")
    if not 3 <= side <= 41:
        raise ValueError(f"kernel side must be in [3, 41], got {side}")
    rng = np.random.default_rng(rng_seed)

    n = max(8, 6 * side)
    vel = np.empty((n, 2))
    vel[0] = rng.normal(size=2)
    noise = rng.normal(size=(n, 2))
    for i in range(1, n):
        vel[i] = 0.9 * vel[i - 1] + 0.35 * noise[i]
    pos = np.cumsum(vel, axis=0)

    # scale the walk into the kernel square, leaving room for the post-blur
    margin = min(1.5, (side - 1) / 2.0)
    lo_allowed, hi_allowed = margin, side - 1 - margin
    extent = float(np.max(pos.max(axis=0) - pos.min(axis=0)))
    box = hi_allowed - lo_allowed
    scale = (box / extent if extent > 0 else 0.0) * rng.uniform(0.5, 1.0)
    pts = (pos - pos.min(axis=0)) * scale
    pts += (lo_allowed + hi_allowed) / 2.0 - (pts.max(axis=0) + pts.min(axis=0)) / 2.0

    dense = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        dist = float(np.hypot(*(b - a)))
        steps = max(1, int(np.ceil(dist / 0.35)))
        for s in range(1, steps + 1):
            dense.append(a + (b - a) * (s / steps))
    dense = np.asarray(dense)

    canvas = np.zeros((side, side))
    ii = np.floor(dense[:, 0]).astype(int)
    jj = np.floor(dense[:, 1]).astype(int)
    fi = dense[:, 0] - ii
    fj = dense[:, 1] - jj
    for di in (0, 1):
        for dj in (0, 1):
            wgt = (fi if di else 1 - fi) * (fj if dj else 1 - fj)
            np.add.at(canvas, (np.clip(ii + di, 0, side - 1), np.clip(jj + dj, 0, side - 1)), wgt)

    canvas = gaussian_filter(canvas, sigma=0.5, mode="constant")
    canvas = np.maximum(canvas, 0.0)
    return Kernel(canvas / canvas.sum())


def synth_dataset(truth_images, kernels_per_image: int, sigma_range, sizes, rng_seed: int) -> list[Triplet]:
    """Degrade each truth image with several random kernels and noise draws.

    Kernel sides are uniform over ``sizes`` and noise levels uniform over
    ``sigma_range = (lo, hi)``.
    """
    truth_images = list(truth_images)
    if not truth_images:
        raise ValueError("empty truth image set")
    sizes = sorted(set(int(s) for s in sizes))
    if not sizes or not set(sizes) <= set(KERNEL_SIDES):
        raise ValueError(f"sizes must be a nonempty subset of {KERNEL_SIDES}, got {sizes}")
    lo, hi = float(sigma_range[0]), float(sigma_range[1])
    if lo > hi or lo < 0:
        raise ValueError(f"bad sigma range [{lo}, {hi}]")
    if kernels_per_image < 1:
        raise ValueError("kernels_per_image must be >= 1")

    master = np.random.default_rng(rng_seed)
    triplets = []
    for img in truth_images:
        for _ in range(kernels_per_image):
            side = int(master.choice(sizes))
            sigma = float(master.uniform(lo, hi))
            kseed, dseed = (int(v) for v in master.integers(0, 2**63 - 1, size=2))
            kernel = gen_kernel(side, kseed)
            triplets.append(degrade(img, kernel, sigma, dseed))
    return triplets


# ---------------------------------------------------------------------
# image and triplet-store I/O
# ---------------------------------------------------------------------


def read_image(path) -> Tensor:
    """Load PNG/PPM as a (1, 3, H, W) tensor in [0, 1].

    Gray images are replicated to three channels at this boundary; the
    rest of the system always sees C = 3.
    """
    img = Image.open(path)
    if img.mode not in ("RGB", "L"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return Tensor(arr[None])


def write_image(path, x: Tensor) -> None:
    """Write a (1, C, H, W) tensor as an 8-bit PNG, clipping to [0, 1]."""
    arr = np.asarray(x.data)
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ValueError(f"expected (1, C, H, W), got {arr.shape}")
    u8 = (quantize8(arr[0]) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    if u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    Image.fromarray(u8).save(path)


def write_kernel(path, kernel: Kernel) -> None:
    """Plain-text matrix: first line the side, then side rows of taps."""
    with open(path, "w") as f:
        f.write(f"{kernel.side}\n")
        for row in kernel.taps:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_kernel(path) -> Kernel:
    with open(path) as f:
        side = int(f.readline())
        taps = np.array([[float(v) for v in f.readline().split()] for _ in range(side)])
    if taps.shape != (side, side):
        raise ValueError(f"kernel file {path} malformed")
    # renormalize away text-roundtrip residue
    return Kernel(np.maximum(taps, 0) / np.maximum(taps, 0).sum())


def save_store(store_dir, triplets: list[Triplet]) -> None:
    """Write the on-disk triplet store: one subdirectory per triplet with
    truth/observed PNGs and the kernel as text, plus a manifest."""
    from pathlib import Path

    store = Path(store_dir)
    store.mkdir(parents=True, exist_ok=True)
    lines = ["id,sigma,kernel_side,seed"]
    for i, t in enumerate(triplets):
        tid = f"t{i:05d}"
        tdir = store / tid
        tdir.mkdir(exist_ok=True)
        write_image(tdir / "truth.png", t.truth)
        write_image(tdir / "observed.png", t.observed)
        write_kernel(tdir / "kernel.txt", t.kernel)
        lines.append(f"{tid},{t.noise_sigma!r},{t.kernel.side},{t.seed if t.seed is not None else ''}")
    (store / "manifest.csv").write_text("\n".join(lines) + "\n")


def load_store(store_dir) -> list[Triplet]:
    from pathlib import Path

    store = Path(store_dir)
    manifest = store / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv in {store_dir}")
    triplets = []
    for line in manifest.read_text().splitlines()[1:]:
        if not line.strip():
            continue
        tid, sigma, _side, seed = line.split(",")
        tdir = store / tid
        triplets.append(
            Triplet(
                truth=read_image(tdir / "truth.png"),
                kernel=read_kernel(tdir / "kernel.txt"),
                observed=read_image(tdir / "observed.png"),
                noise_sigma=float(sigma),
                seed=int(seed) if seed else None,
            )
        )
    return triplets
