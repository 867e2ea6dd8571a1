"""The learned gradient-descent update unit.

One step refines the current estimate by a trainable residual built from
three sub-networks sharing a fixed six-layer topology but independent
parameters:

    x_{t+1} = x_t + D( R(x_t) + H( At(A x_t - y) ) )

R maps the current estimate (playing the role of a regularizer gradient),
H reshapes the raw data-fit gradient (absorbing the unknown noise level),
and D rescales the combined descent direction (absorbing the step length).
There is deliberately no scalar step-size or trade-off knob anywhere: the
sub-networks absorb them.  One parameter set serves every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import BatchNormState, ConvSpec, ShapeError, Tensor, batch_norm, conv2d, relu, tconv2d
from .degrade import fidelity_gradient

FEATURES = 64
KERNEL_SIZE = 5
SUBNET_NAMES = ("r", "h", "d")


def _layer_plan(channels: int):
    """(kind, layer_in, layer_out, has_bn, has_relu) for the fixed topology.

    Three convolutions then three transposed convolutions, 5x5, stride 1,
    64 features except at the image-channel ends; the first layer gets only
    a ReLU and the last is bare.
    """
    f = FEATURES
    return (
        ("conv", channels, f, False, True),
        ("conv", f, f, True, True),
        ("conv", f, f, True, True),
        ("tconv", f, f, True, True),
        ("tconv", f, f, True, True),
        ("tconv", f, channels, False, False),
    )


def topology_signature(channels: int) -> str:
    """Canonical description of the network wiring, used to fingerprint
    checkpoints against the code that tries to load them."""
    parts = []
    for kind, cin, cout, has_bn, has_relu in _layer_plan(channels):
        tags = "".join(["+bn" if has_bn else "", "+relu" if has_relu else ""])
        parts.append(f"{kind}({cin}->{cout},k{KERNEL_SIZE},s1,same){tags}")
    return "|".join(parts)


@dataclass
class LayerParams:
    weight: Tensor
    bias: Tensor
    spec: ConvSpec
    bn: BatchNormState | None


@dataclass
class SubnetParams:
    layers: list[LayerParams]
    channels: int


@dataclass
class UnitParams:
    """Full parameter set: the three sub-networks plus ablation flags.

    ``dropped`` names sub-networks removed from the update: a dropped R
    contributes nothing (its additive term vanishes) while dropped H or D
    pass their input through unchanged (they wrap the data path).  Dropped
    sub-networks keep zeroed, frozen parameters so checkpoints stay
    structurally identical.
    """

    r: SubnetParams
    h: SubnetParams
    d: SubnetParams
    channels: int
    dropped: tuple[str, ...] = ()

    def subnet(self, name: str) -> SubnetParams:
        return {"r": self.r, "h": self.h, "d": self.d}[name]


def _init_subnet(seed_seq: np.random.SeedSequence, channels: int, dtype) -> SubnetParams:
    layers = []
    for (kind, cin, cout, has_bn, _), child in zip(_layer_plan(channels), seed_seq.spawn(6)):
        rng = np.random.default_rng(child)
        k = KERNEL_SIZE
        if kind == "conv":
            shape = (cout, cin, k, k)
            spec = ConvSpec(cout, cin, k)
        else:
            # transposed: weights live in the layout of the adjoint convolution
            shape = (cin, cout, k, k)
            spec = ConvSpec(cin, cout, k, transposed=True)
        bound = float(np.sqrt(1.0 / (cin * k * k)))
        weight = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)
        bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        bn = BatchNormState.create(cout, dtype=dtype) if has_bn else None
        layers.append(LayerParams(weight, bias, spec, bn))
    return SubnetParams(layers=layers, channels=channels)


def init_params(rng_seed: int, channels: int = 3, dtype=np.float32) -> UnitParams:
    """Random fan-in-scaled initialization, deterministic per seed."""
    root = np.random.SeedSequence(rng_seed)
    subs = [_init_subnet(child, channels, dtype) for child in root.spawn(3)]
    return UnitParams(r=subs[0], h=subs[1], d=subs[2], channels=channels)


def subnet_forward(params: SubnetParams, x: Tensor, mode: str) -> Tensor:
    """Run the six-layer CNN; output shape equals input shape."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim != 4 or x.data.shape[1] != params.channels:
        raise ShapeError(
            f"subnet expects (B, {params.channels}, H, W), got {x.data.shape}"
        )
    h = x
    for layer, (_, _, _, _, has_relu) in zip(params.layers, _layer_plan(params.channels)):
        op = tconv2d if layer.spec.transposed else conv2d
        h = op(h, layer.weight, layer.spec, layer.bias)
        if layer.bn is not None:
            layer.bn.mode = mode
            h = batch_norm(h, layer.bn)
        if has_relu:
            h = relu(h)
    return h


def descent_step(params: UnitParams, x_t: Tensor, y: Tensor, k, mode: str) -> Tensor:
    """One learned update; returns x_t exactly when D's output is zero."""
    fid = fidelity_gradient(x_t, y, k)
    terms = []
    if "r" not in params.dropped:
        terms.append(subnet_forward(params.r, x_t, mode))
    terms.append(fid if "h" in params.dropped else subnet_forward(params.h, fid, mode))
    direction = terms[0]
    for t in terms[1:]:
        direction = direction + t
    update = direction if "d" in params.dropped else subnet_forward(params.d, direction, mode)
    return x_t + update


def unroll(params: UnitParams, x0: Tensor, y: Tensor, k, steps: int, mode: str) -> list[Tensor]:
    """Apply the shared update unit ``steps`` times; returns every estimate."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    estimates = []
    x = x0
    for _ in range(steps):
        x = descent_step(params, x, y, k, mode)
        estimates.append(x)
    return estimates


def iter_parameters(params: UnitParams, trainable_only: bool = True):
    """All parameter tensors in a fixed order (r, h, d subnets; per layer
    weight, bias, then BN gamma/beta)."""
    for name in SUBNET_NAMES:
        if trainable_only and name in params.dropped:
            continue
        for layer in params.subnet(name).layers:
            yield layer.weight
            yield layer.bias
            if layer.bn is not None:
                yield layer.bn.gamma
                yield layer.bn.beta


def ablate(params: UnitParams, names) -> UnitParams:
    """Zero out and freeze the named sub-networks, marking them dropped."""
    names = tuple(sorted(set(names)))
    for name in names:
        if name not in SUBNET_NAMES:
            raise ValueError(f"unknown sub-network {name!r}")
        for layer in params.subnet(name).layers:
            layer.weight.data[...] = 0
            layer.weight.requires_grad = False
            layer.bias.data[...] = 0
            layer.bias.requires_grad = False
            if layer.bn is not None:
                layer.bn.gamma.data[...] = 0
                layer.bn.gamma.requires_grad = False
                layer.bn.beta.data[...] = 0
                layer.bn.beta.requires_grad = False
    return UnitParams(r=params.r, h=params.h, d=params.d,
                      channels=params.channels, dropped=names)


def zero_final_layer(params: UnitParams, name: str = "d") -> None:
    """Zero the last layer (weights and bias) of one sub-network, making
    that sub-network's output identically zero."""
    last = params.subnet(name).layers[-1]
    last.weight.data[...] = 0
    last.bias.data[...] = 0
