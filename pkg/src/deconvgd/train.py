"""Training: losses, recursive supervision, Adam, and checkpoints.

Every intermediate estimate of the unrolled optimizer is supervised, not
just the last one; per-step weights kappa_t and the image-gradient weight
tau shape the objective.  The loss is normalized per element so tau keeps
the same meaning at any image size.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor, hdiff, vdiff
from .degrade import Triplet
from .unit import UnitParams, init_params, iter_parameters, topology_signature, unroll

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RGDN"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 5
    batch_size: int = 4
    learning_rate: float = 5e-5
    tau: float = 1.0
    kappa: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    iterations: int = 1000
    seed: int = 0
    crop: int | None = None  # random square training crops, None = full frames
    checkpoint_every: int = 0  # 0: only at exit

    def __post_init__(self):
        self.kappa = tuple(float(k) for k in self.kappa)
        if len(self.kappa) != self.steps:
            raise ValueError(
                f"kappa has {len(self.kappa)} entries but steps is {self.steps}"
            )
        if any(k < 0 for k in self.kappa) or self.tau < 0:
            raise ValueError("kappa and tau must be nonnegative")


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def loss_mse(x_gt: Tensor, x_hat: Tensor) -> Tensor:
    """Sum of squared differences (no normalization here)."""
    if x_gt.data.shape != x_hat.data.shape:
        raise ValueError(f"shapes {x_gt.data.shape} and {x_hat.data.shape} differ")
    d = x_gt - x_hat
    return (d * d).sum()


def loss_grad(x_gt: Tensor, x_hat: Tensor) -> Tensor:
    """L1 discrepancy of horizontal and vertical forward differences."""
    if x_gt.data.shape != x_hat.data.shape:
        raise ValueError(f"shapes {x_gt.data.shape} and {x_hat.data.shape} differ")
    if x_gt.data.shape[2] < 2 or x_gt.data.shape[3] < 2:
        raise ValueError("loss_grad needs spatial extent >= 2 in both directions")
    lh = (hdiff(x_gt) - hdiff(x_hat)).abs().sum()
    lv = (vdiff(x_gt) - vdiff(x_hat)).abs().sum()
    return lh + lv


def objective(x_gt: Tensor, estimates: list[Tensor], cfg: TrainConfig) -> Tensor:
    """Recursive-supervision objective over all unroll steps.

    sum_t kappa_t (MSE + tau * grad loss), averaged over steps, samples,
    and elements.
    """
    if len(estimates) != cfg.steps:
        raise ValueError(f"{len(estimates)} estimates but steps is {cfg.steps}")
    total: Tensor | None = None
    for kap, est in zip(cfg.kappa, estimates):
        if kap == 0.0:
            continue
        term = loss_mse(x_gt, est)
        if cfg.tau:
            term = term + loss_grad(x_gt, est) * cfg.tau
        term = term * kap
        total = term if total is None else total + term
    if total is None:  # every weight zero
        return Tensor(np.zeros((), dtype=x_gt.data.dtype))
    return total * (1.0 / (cfg.steps * x_gt.data.size))


def adam_update(params: list[Tensor], grads: list[np.ndarray], opt: AdamState, lr: float) -> bool:
    """Bias-corrected Adam step, in place.

    Returns False (and leaves parameters, moments, and the step counter
    untouched) when any gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.data.shape != g.shape:
            raise ValueError(f"param shape {p.data.shape} != grad shape {g.shape}")
    if any(not np.isfinite(g).all() for g in grads):
        log.warning("non-finite gradient: skipping update at step %d", opt.step)
        return False
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return True


@dataclass
class LogRow:
    iteration: int
    objective: float
    step_mse: tuple[float, ...]
    wallclock_s: float


def write_log(path, rows: list[LogRow], steps: int) -> None:
    header = "iter,objective," + ",".join(f"mse_step{t+1}" for t in range(steps)) + ",wallclock_s"
    lines = [header]
    for r in rows:
        mse = ",".join(f"{v:.8g}" for v in r.step_mse)
        lines.append(f"{r.iteration},{r.objective:.8g},{mse},{r.wallclock_s:.3f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _assemble_batch(triplets: list[Triplet], idx, crop: int | None, rng) -> tuple[Tensor, Tensor, list]:
    truths, observed, kernels = [], [], []
    for i in idx:
        t = triplets[i]
        gt = np.asarray(t.truth.data[0], dtype=np.float32)
        ob = np.asarray(t.observed.data[0], dtype=np.float32)
        if crop:
            h, w = gt.shape[1], gt.shape[2]
            if crop > h or crop > w:
                raise ValueError(f"crop {crop} exceeds image extent {h}x{w}")
            i0 = int(rng.integers(0, h - crop + 1))
            j0 = int(rng.integers(0, w - crop + 1))
            gt = gt[:, i0 : i0 + crop, j0 : j0 + crop]
            ob = ob[:, i0 : i0 + crop, j0 : j0 + crop]
        truths.append(gt)
        observed.append(ob)
        kernels.append(t.kernel)
    return Tensor(np.stack(truths)), Tensor(np.stack(observed)), kernels


def train_loop(
    dataset: list[Triplet],
    cfg: TrainConfig,
    params: UnitParams | None = None,
    checkpoint_path=None,
) -> tuple[UnitParams, list[LogRow]]:
    """Mini-batch training over a triplet set.

    Per batch: unroll ``cfg.steps`` updates in train mode, evaluate the
    recursive objective, backpropagate, and apply Adam.  Batches with a
    non-finite objective or gradients are skipped and logged; more than 10
    consecutive skips abort the run.
    """
    if not dataset:
        raise ValueError("empty dataset")
    shapes = {t.truth.data.shape for t in dataset}
    if cfg.crop is None and len(shapes) > 1:
        raise ValueError(f"mixed image sizes {shapes} need cfg.crop set")

    if params is None:
        params = init_params(cfg.seed)
    trainable = list(iter_parameters(params))
    opt = AdamState.create(trainable)
    rng = np.random.default_rng(cfg.seed)

    rows: list[LogRow] = []
    order: list[int] = []
    consecutive_skips = 0
    t_start = time.perf_counter()

    for it in range(1, cfg.iterations + 1):
        if len(order) < cfg.batch_size:
            refill = list(rng.permutation(len(dataset)))
            order.extend(refill)
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        gt, y, kernels = _assemble_batch(dataset, idx, cfg.crop, rng)

        estimates = unroll(params, y, y, kernels, cfg.steps, "train")
        obj = objective(gt, estimates, cfg)
        obj_val = float(obj.data)
        if not np.isfinite(obj_val):
            consecutive_skips += 1
            log.warning("non-finite objective at iteration %d: batch skipped", it)
            if consecutive_skips > 10:
                raise RuntimeError(f"aborting: {consecutive_skips} consecutive skipped batches")
            continue

        for p in trainable:
            p.zero_grad()
        obj.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in trainable]
        applied = adam_update(trainable, grads, opt, cfg.learning_rate)
        consecutive_skips = 0 if applied else consecutive_skips + 1
        if consecutive_skips > 10:
            raise RuntimeError(f"aborting: {consecutive_skips} consecutive skipped batches")

        step_mse = tuple(
            float(((e.data - gt.data) ** 2).mean()) for e in estimates
        )
        rows.append(LogRow(it, obj_val, step_mse, time.perf_counter() - t_start))
        if checkpoint_path and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params, cfg)

    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, cfg)
    return params, rows


# ---------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------


def topology_hash(channels: int) -> bytes:
    return hashlib.sha256(topology_signature(channels).encode()).digest()


def _write_array(f, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.astype("<f4", copy=False).tobytes())


def _read_array(f) -> np.ndarray:
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    n = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
    return data.astype(np.float32)


def save_checkpoint(path, params: UnitParams, cfg: TrainConfig | None = None) -> None:
    """Versioned binary checkpoint.

    Layout: magic, format version, channel count, topology hash; per
    sub-network each layer's weight and bias payloads; then every BN
    layer's gamma/beta/running stats; then a JSON echo of the training
    configuration and ablation flags.
    """
    bn0 = params.r.layers[1].bn
    echo = {
        "dropped": list(params.dropped),
        "bn_epsilon": bn0.epsilon if bn0 is not None else None,
        "bn_momentum": bn0.momentum if bn0 is not None else None,
        "config": asdict(cfg) if cfg is not None else None,
    }
    blob = json.dumps(echo).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, params.channels))
        f.write(topology_hash(params.channels))
        for name in ("r", "h", "d"):
            for layer in params.subnet(name).layers:
                _write_array(f, layer.weight.data)
                _write_array(f, layer.bias.data)
        for name in ("r", "h", "d"):
            for layer in params.subnet(name).layers:
                if layer.bn is not None:
                    _write_array(f, layer.bn.gamma.data)
                    _write_array(f, layer.bn.beta.data)
                    _write_array(f, layer.bn.running_mean)
                    _write_array(f, layer.bn.running_var)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_checkpoint(path) -> tuple[UnitParams, dict]:
    """Load and validate a checkpoint; refuses on topology mismatch."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version, channels = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        stored_hash = f.read(32)
        if stored_hash != topology_hash(channels):
            raise ValueError(
                "checkpoint topology hash does not match this build's network wiring"
            )
        params = init_params(0, channels=channels)
        for name in ("r", "h", "d"):
            for layer in params.subnet(name).layers:
                w = _read_array(f)
                b = _read_array(f)
                if w.shape != layer.weight.data.shape:
                    raise ValueError(f"weight shape {w.shape} != {layer.weight.data.shape}")
                layer.weight.data = w
                layer.bias.data = b
        for name in ("r", "h", "d"):
            for layer in params.subnet(name).layers:
                if layer.bn is not None:
                    layer.bn.gamma.data = _read_array(f)
                    layer.bn.beta.data = _read_array(f)
                    layer.bn.running_mean = _read_array(f)
                    layer.bn.running_var = _read_array(f)
        (blob_len,) = struct.unpack("<I", f.read(4))
        echo = json.loads(f.read(blob_len).decode())
    dropped = tuple(echo.get("dropped", ()))
    if dropped:
        from .unit import ablate

        params = ablate(params, dropped)
    return params, echo
