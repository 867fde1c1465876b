"""Classifier architectures, parameter handling, and classifier pools.

A model is described by a :class:`ModelConfig` (a stack of 3x3 conv blocks
followed by one fully connected layer) and carried as a flat dict of named
tensors.  Pools of frozen snapshots implement the mixture-of-classifiers
objective used by the game-theoretic training loop: attacks differentiate
the pool's average loss with respect to the input batch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"AGCK"
CHECKPOINT_VERSION = 1

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class ModelConfig:
    name: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int
    conv_layers: tuple[ConvSpec, ...]
    batchnorm: bool = True

    def __post_init__(self):
        c, h, w = self.input_shape
        if c < 1 or h < 1 or w < 1 or self.num_classes < 2:
            raise ValueError("malformed model config")
        for spec in self.conv_layers:
            if spec.channels < 1 or spec.kernel < 1 or spec.stride < 1:
                raise ValueError("malformed conv layer spec")
        if self.feature_size() < 1:
            raise ValueError("conv stack collapses the input to nothing")

    def conv_output_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for spec in self.conv_layers:
            pad = (spec.kernel - 1) // 2
            h = (h + 2 * pad - spec.kernel) // spec.stride + 1
            w = (w + 2 * pad - spec.kernel) // spec.stride + 1
            c = spec.channels
        return c, h, w

    def feature_size(self) -> int:
        c, h, w = self.conv_output_shape()
        return c * h * w

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "conv_layers": [[s.channels, s.kernel, s.stride] for s in self.conv_layers],
            "batchnorm": self.batchnorm,
        }, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        obj = json.loads(text)
        return ModelConfig(
            name=obj["name"],
            input_shape=tuple(obj["input_shape"]),
            num_classes=obj["num_classes"],
            conv_layers=tuple(ConvSpec(*row) for row in obj["conv_layers"]),
            batchnorm=obj["batchnorm"],
        )


def tiny_config(side: int = 16, channels: int = 3, num_classes: int = 10) -> ModelConfig:
    """Desk-scale model: two strided conv blocks and a classifier head."""
    return ModelConfig(
        name="tiny",
        input_shape=(channels, side, side),
        num_classes=num_classes,
        conv_layers=(ConvSpec(8, 3, 2), ConvSpec(16, 3, 2)),
        batchnorm=False,
    )


def paper_vgg_config(num_classes: int = 10) -> ModelConfig:
    """VGG-style stack for 32x32 RGB input: strided convs instead of pooling."""
    widths = [(64, 1), (64, 1), (128, 2), (128, 1), (128, 1),
              (256, 2), (256, 1), (256, 1), (512, 2), (512, 1), (512, 1)]
    return ModelConfig(
        name="paper-vgg",
        input_shape=(3, 32, 32),
        num_classes=num_classes,
        conv_layers=tuple(ConvSpec(c, 3, s) for c, s in widths),
        batchnorm=True,
    )


def model_config(name: str, **kwargs) -> ModelConfig:
    if name == "tiny":
        return tiny_config(**kwargs)
    if name == "paper-vgg":
        return paper_vgg_config(**{k: v for k, v in kwargs.items() if k == "num_classes"})
    raise ValueError(f"unknown model {name!r}; choices: tiny, paper-vgg")


def build_model(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Initialize parameters: fan-in-scaled uniform weights, zero biases.

    Conv weights are drawn from U(-b, b) with b = sqrt(1 / (C*k*k)); dense
    weights use b = sqrt(1 / fan_in).  Batch-norm starts at gamma=1, beta=0
    with zero running mean and unit running variance.
    """
    rng = np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    params: dict[str, Tensor] = {}
    in_c = config.input_shape[0]
    for i, spec in enumerate(config.conv_layers):
        bound = np.sqrt(1.0 / (in_c * spec.kernel * spec.kernel))
        w = rng.uniform(-bound, bound, (spec.channels, in_c, spec.kernel, spec.kernel))
        params[f"conv{i}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"conv{i}.bias"] = Tensor(np.zeros(spec.channels, dtype=dtype), requires_grad=True)
        if config.batchnorm:
            params[f"bn{i}.gamma"] = Tensor(np.ones(spec.channels, dtype=dtype), requires_grad=True)
            params[f"bn{i}.beta"] = Tensor(np.zeros(spec.channels, dtype=dtype), requires_grad=True)
            params[f"bn{i}.running_mean"] = Tensor(np.zeros(spec.channels, dtype=dtype))
            params[f"bn{i}.running_var"] = Tensor(np.ones(spec.channels, dtype=dtype))
        in_c = spec.channels
    fan_in = config.feature_size()
    bound = np.sqrt(1.0 / fan_in)
    w = rng.uniform(-bound, bound, (fan_in, config.num_classes))
    params["fc.weight"] = Tensor(w.astype(dtype), requires_grad=True)
    params["fc.bias"] = Tensor(np.zeros(config.num_classes, dtype=dtype), requires_grad=True)
    return params


def forward(config: ModelConfig, params: dict[str, Tensor], batch, mode: str = "infer") -> Tensor:
    """Run the network and return logits [B, num_classes].

    Train mode normalizes with batch statistics and advances the running
    buffers; infer mode reads the running buffers and leaves them untouched.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = config.input_shape
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"batch shape {x.shape} does not match input shape (B,)+{expected}")
    for i in range(len(config.conv_layers)):
        spec = config.conv_layers[i]
        x = T.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=spec.stride, padding="same")
        if config.batchnorm:
            x = T.batchnorm(
                x,
                params[f"bn{i}.gamma"],
                params[f"bn{i}.beta"],
                params[f"bn{i}.running_mean"],
                params[f"bn{i}.running_var"],
                mode=mode,
                momentum=BN_MOMENTUM,
                eps=BN_EPS,
            )
        x = T.relu(x)
    x = T.reshape(x, (x.shape[0], config.feature_size()))
    return T.dense(x, params["fc.weight"], params["fc.bias"])


def trainable_names(params: dict[str, Tensor]) -> list[str]:
    return [name for name, p in params.items() if p.requires_grad]


def copy_params(params: dict[str, Tensor], frozen: bool = False) -> dict[str, Tensor]:
    out = {}
    for name, p in params.items():
        arr = p.data.copy()
        if frozen:
            arr.setflags(write=False)
        out[name] = Tensor(arr, requires_grad=(p.requires_grad and not frozen))
    return out


# ---------------------------------------------------------------------------
# classifier pools
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierSnapshot:
    """Frozen copy of a classifier at one outer iteration."""
    iteration: int
    config: ModelConfig
    params: dict[str, Tensor]
    note: str = ""

    @staticmethod
    def freeze(iteration: int, config: ModelConfig, params: dict[str, Tensor], note: str = "") -> "ClassifierSnapshot":
        return ClassifierSnapshot(iteration, config, copy_params(params, frozen=True), note)


@dataclass
class ClassifierPool:
    """Ordered history of classifier snapshots with strictly increasing indices."""
    members: list[ClassifierSnapshot] = field(default_factory=list)

    def add(self, snapshot: ClassifierSnapshot) -> None:
        if self.members and snapshot.iteration <= self.members[-1].iteration:
            raise ValueError("snapshot iterations must be strictly increasing")
        self.members.append(snapshot)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


def pool_expected_loss(pool: ClassifierPool, batch, labels) -> Tensor:
    """Average cross-entropy over the pool members, differentiable in the batch.

    Equals the expected loss of a classifier drawn uniformly from the pool,
    which is exactly the objective the perturbation player maximizes.
    """
    if len(pool) == 0:
        raise ValueError("classifier pool is empty")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    losses = [T.softmax_cross_entropy(forward(m.config, m.params, x, "infer"), labels) for m in pool]
    total = losses[0]
    for term in losses[1:]:
        total = T.add(total, term)
    return T.mul(total, 1.0 / len(pool))


def pool_probabilities(pool: ClassifierPool, batch) -> np.ndarray:
    """Average per-member softmax probabilities over the pool."""
    if len(pool) == 0:
        raise ValueError("classifier pool is empty")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    acc = None
    for m in pool:
        logits = forward(m.config, m.params, x, "infer").data
        probs = np.exp(T.log_softmax(logits))
        acc = probs if acc is None else acc + probs
    return acc / len(pool)


def pool_predict(pool: ClassifierPool, batch) -> np.ndarray:
    """Argmax of the averaged probability vectors; ties go to the lowest class id."""
    return np.argmax(pool_probabilities(pool, batch), axis=1)


def single_pool(config: ModelConfig, params: dict[str, Tensor], iteration: int = 0) -> ClassifierPool:
    pool = ClassifierPool()
    pool.add(ClassifierSnapshot.freeze(iteration, config, params))
    return pool


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor]) -> None:
    """Write a versioned checkpoint: header, config, then named f32 tensors."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = config.to_json().encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(params))
    for name, p in params.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", p.data.ndim)
        blob += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        blob += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = ModelConfig.from_json(blob[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    dtype = T.get_default_dtype()
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        trainable = not name.endswith(("running_mean", "running_var"))
        params[name] = Tensor(data.astype(dtype), requires_grad=trainable)
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    return config, params
