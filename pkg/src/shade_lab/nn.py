"""Toy conv net, initialization, SGD with momentum, poly schedule, losses, EMA.

Inputs are standardized with fixed constants (the pixel mean and std of the
default source domain), then (no normalization layers)::

    stem   conv3x3(3 -> c0) + ReLU            full resolution
    body1  conv3x3(c0 -> c1, stride 2) + ReLU half resolution
    body2  conv3x3(c1 -> c1) + ReLU           half resolution (bottleneck)
    head   GAP + linear(c1 -> K)              classification
           conv1x1(c1 -> K)                   segmentation, half resolution

`insertion_point` i means the style module acts on the output of layer i.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DataError
from .numerics import Tensor

LAYERS = ("stem", "body1", "body2")
ROLES = ("student", "frozen_teacher", "ema_teacher")
TASKS = ("classification", "segmentation")
INPUT_MEAN = 0.44
INPUT_STD = 0.18


@dataclass(frozen=True)
class ModelSpec:
    head_kind: str = "classification"
    num_classes: int = 4
    c0: int = 16
    c1: int = 32
    insertion_point: int = 0
    in_channels: int = 3

    def __post_init__(self):
        if self.head_kind not in TASKS:
            raise ConfigError(f"head_kind must be one of {TASKS}, got {self.head_kind!r}")
        if self.insertion_point not in (0, 1, 2):
            raise ConfigError(f"insertion_point must be 0, 1 or 2, got {self.insertion_point}")
        if min(self.c0, self.c1) < 2:
            raise ConfigError("channel widths must be >= 2")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def style_channels(self) -> int:
        """Channel count at the insertion point (= number of basis styles)."""
        return self.c0 if self.insertion_point == 0 else self.c1

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {
            "stem.w": (self.c0, self.in_channels, 3, 3), "stem.b": (self.c0,),
            "body1.w": (self.c1, self.c0, 3, 3), "body1.b": (self.c1,),
            "body2.w": (self.c1, self.c1, 3, 3), "body2.b": (self.c1,),
        }
        if self.head_kind == "classification":
            shapes["head.w"] = (self.num_classes, self.c1)
        else:
            shapes["head.w"] = (self.num_classes, self.c1, 1, 1)
        shapes["head.b"] = (self.num_classes,)
        return shapes

    def to_dict(self) -> dict:
        return dict(head_kind=self.head_kind, num_classes=self.num_classes, c0=self.c0,
                    c1=self.c1, insertion_point=self.insertion_point,
                    in_channels=self.in_channels)


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: dict[str, Tensor]
    role: str = "student"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractError(f"unknown role {self.role!r}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self, role: str | None = None) -> "ModelParams":
        role = role or self.role
        trainable = role == "student"
        return ModelParams(self.spec, {k: Tensor(t.data.copy(), requires_grad=trainable)
                                       for k, t in self.tensors.items()}, role)

    def frozen(self, role: str = "frozen_teacher") -> "ModelParams":
        return self.copy(role)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k].data).tobytes())
        return h.hexdigest()


def init_params(spec: ModelSpec, seed: int, role: str = "student") -> ModelParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.layer_shapes().items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(arr, requires_grad=(role == "student"))
    return ModelParams(spec, tensors, role)


# -- forward pieces ---------------------------------------------------------

def run_layers(params: ModelParams, x, start: int, stop: int) -> Tensor:
    """Apply backbone layers start..stop inclusive (conv + ReLU each)."""
    t = params.tensors
    h = x
    if start == 0:
        h = nx.scalar_affine(h, 1.0 / INPUT_STD, -INPUT_MEAN / INPUT_STD)
    for i in range(start, stop + 1):
        name = LAYERS[i]
        h = nx.relu(nx.conv2d(h, t[f"{name}.w"], t[f"{name}.b"], stride=2 if i == 1 else 1))
    return h


def backbone(params: ModelParams, x) -> Tensor:
    return run_layers(params, x, 0, len(LAYERS) - 1)


def head(params: ModelParams, feat: Tensor) -> Tensor:
    t = params.tensors
    if params.spec.head_kind == "classification":
        return nx.linear(nx.global_avg_pool(feat), t["head.w"], t["head.b"])
    return nx.conv2d(feat, t["head.w"], t["head.b"])


def retro_feature(params: ModelParams, feat: Tensor) -> Tensor:
    """The feature used for retrospection: pooled for classification, dense otherwise."""
    if params.spec.head_kind == "classification":
        return nx.global_avg_pool(feat)
    return feat


def forward(params: ModelParams, x) -> Tensor:
    return head(params, backbone(params, x))


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for a stack of images, computed batch-wise without a graph."""
    frozen = params if params.role != "student" else params.frozen("frozen_teacher")
    outs = [forward(frozen, images[i:i + batch_size]).data
            for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


# -- losses -------------------------------------------------------------------

def task_loss(logits: Tensor, labels, head_kind: str, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy over samples, or over all labeled pixels."""
    labels = np.asarray(labels)
    k = logits.shape[1]
    if head_kind == "classification":
        if logits.ndim != 2 or labels.shape != logits.shape[:1]:
            raise ContractError(f"classification logits {logits.shape} vs labels {labels.shape}")
    elif head_kind == "segmentation":
        if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
            raise ContractError(f"segmentation logits {logits.shape} vs labels {labels.shape}")
    else:
        raise ConfigError(f"unknown head_kind {head_kind!r}")
    valid = labels != ignore_index
    if np.any(valid & ((labels < 0) | (labels >= k))):
        raise DataError(f"label out of range [0, {k})")
    onehot = (np.arange(k).reshape((1, k) + (1,) * (labels.ndim - 1))
              == labels[:, None]).astype(np.float64)
    count = int(valid.sum())
    if count == 0:
        return nx.scalar_affine(nx.sum(nx.mul(logits, 0.0)), 1.0)
    picked = nx.sum(nx.mul(nx.log_softmax(logits, axis=1), onehot))
    return nx.scalar_affine(picked, -1.0 / count)


# -- optimization -------------------------------------------------------------

@dataclass
class OptimState:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    max_iter: int = 1
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def poly_lr(iteration: int, state: OptimState) -> float:
    if not 0 <= iteration <= state.max_iter:
        raise ContractError(f"iteration {iteration} outside [0, {state.max_iter}]")
    return state.base_lr * (1.0 - iteration / state.max_iter) ** state.power


def sgd_step(params: ModelParams, state: OptimState, lr: float) -> None:
    """v <- m*v + (g + wd*w);  w <- w - lr*v, for every student parameter."""
    if params.role != "student":
        raise ContractError(f"refusing to update {params.role} parameters")
    for name, t in params.tensors.items():
        if t.grad is None:
            raise ContractError(f"missing gradient for {name}")
    for name, t in params.tensors.items():
        d = t.grad + state.weight_decay * t.data if state.weight_decay else t.grad
        v = state.buffers.get(name)
        v = d if v is None else state.momentum * v + d
        state.buffers[name] = v
        t.data = t.data - lr * v


def ema_update(teacher: ModelParams, student: ModelParams, decay: float) -> None:
    if not 0.0 <= decay < 1.0:
        raise ContractError(f"EMA decay must lie in [0, 1), got {decay}")
    if teacher.spec != student.spec:
        raise ContractError("EMA teacher and student specs differ")
    for name, t in teacher.tensors.items():
        t.data = decay * t.data + (1.0 - decay) * student.tensors[name].data
