"""Network assembly, forward/backward execution, and weight files.

The architecture is a channel-slim CNN for spectrogram tagging: two 1x1
stem convolutions lift the single-channel input to three channels, a
strided 3x3 convolution and a stack of inverted residual bottleneck
blocks extract features, a 1x1 convolution widens to the embedding size,
global max pooling collapses time and frequency, and two linear layers
produce one logit per output tag.  Every convolution is followed by batch
normalization; ReLU6 is the only nonlinearity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..taxonomy import Taxonomy
from .layers import (
    BatchNorm2d,
    BottleneckBlock,
    Conv2d,
    GlobalMaxPool,
    Linear,
    NonFiniteError,
    ReLU6,
    VectorReLU6,
    init_params,
)

VARIANTS = ("M1", "M2")


@dataclass(frozen=True)
class BlockSpec:
    """One backbone row: expansion t, output channels c, repeats n, stride s."""

    t: int
    c: int
    n: int
    s: int

    def __post_init__(self):
        if self.t < 1 or self.n < 1 or self.s not in (1, 2):
            raise ValueError(f"invalid block spec {self}")


_DEFAULT_BLOCKS = (
    BlockSpec(1, 16, 1, 1),
    BlockSpec(6, 24, 2, 2),
    BlockSpec(6, 32, 3, 2),
    BlockSpec(6, 64, 4, 2),
    BlockSpec(6, 96, 3, 1),
    BlockSpec(6, 160, 3, 2),
    BlockSpec(6, 320, 1, 1),
)


@dataclass(frozen=True)
class NetworkSpec:
    """Structural description of the tagging network.

    ``width_multiplier`` scales every channel count (minimum 1 channel,
    output head excluded) for desk-scale runs; 1.0 reproduces the full
    architecture.
    """

    stem_channels: tuple[int, int] = (10, 3)
    entry_channels: int = 32
    blocks: tuple[BlockSpec, ...] = _DEFAULT_BLOCKS
    head_conv_channels: int = 1280
    head_hidden: int = 512
    width_multiplier: float = 1.0

    def scaled(self, channels: int) -> int:
        if not (self.width_multiplier > 0):
            raise ValueError(f"invalid width multiplier {self.width_multiplier}")
        return max(1, int(channels * self.width_multiplier + 0.5))


class PlanRow(NamedTuple):
    op: str
    t: int | None
    c: int | None       # nominal output channels (before width multiplier)
    c_scaled: int | None
    n: int
    s: int | None


def head_tags(taxonomy: Taxonomy, variant: str) -> list[str]:
    """Output tag order for a model variant.

    M1 predicts fine then coarse tags.  M2 additionally predicts the
    unknown/other slots, ordered fine, incomplete, coarse.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "M1":
        return list(taxonomy.fine) + list(taxonomy.coarse)
    return list(taxonomy.fine) + list(taxonomy.incomplete_ids) + list(taxonomy.coarse)


@dataclass
class Network:
    spec: NetworkSpec
    variant: str
    head: list[str]
    layers: list
    plan: list[PlanRow]
    params: dict[str, np.ndarray]
    dtype: type = np.float32
    check_finite: bool = field(default=False)

    @property
    def n_outputs(self) -> int:
        return len(self.head)

    def learnable_names(self) -> list[str]:
        """Parameter names that receive gradients (running stats excluded)."""
        return [n for n in self.params if not n.endswith(BatchNorm2d.STAT_SUFFIXES)]

    def forward(self, x, mode="train"):
        """Run the network on a (B, 1, n_mels, n_frames) batch.

        Returns (logits, caches); pass the caches to :meth:`backward`.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected batch shaped (B, 1, H, W), got {x.shape}")
        caches = []
        y = x
        for layer in self.layers:
            y, c = layer.forward(y, self.params, mode)
            caches.append(c)
            if self.check_finite and not np.all(np.isfinite(y)):
                raise NonFiniteError(layer.name)
        return y, caches

    def backward(self, dlogits, caches):
        """Backpropagate and return one gradient array per learnable parameter."""
        grads = {}
        d = np.asarray(dlogits, dtype=self.dtype)
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d, g = layer.backward(d, cache, self.params)
            grads.update(g)
            if self.check_finite and not np.all(np.isfinite(d)):
                raise NonFiniteError(layer.name, stage="backward")
        for name in self.learnable_names():
            if name not in grads:
                grads[name] = np.zeros_like(self.params[name])
        return grads

    def locate_non_finite(self, x, mode="eval"):
        """Diagnostic re-run with per-layer checks; returns the failing layer name."""
        was = self.check_finite
        self.check_finite = True
        try:
            self.forward(x, mode)
        except NonFiniteError as err:
            return err.layer_name
        finally:
            self.check_finite = was
        return None


def build_network(
    spec: NetworkSpec,
    taxonomy: Taxonomy,
    variant: str = "M1",
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> Network:
    """Assemble layers and freshly initialized parameters.

    Convolution and linear weights use Kaiming-normal initialization;
    batchnorm starts at identity.  Convolutions carry no bias (the
    following batchnorm shift plays that role); linear layers are biased.
    """
    if taxonomy.n_fine == 0 or taxonomy.n_coarse == 0:
        raise ValueError("taxonomy is empty")
    head = head_tags(taxonomy, variant)
    rng = rng or np.random.default_rng(0)

    layers = []
    plan: list[PlanRow] = []

    def conv_bn_relu(name, in_ch, out_ch, kernel, stride):
        layers.append(Conv2d(f"{name}.conv", in_ch, out_ch, kernel, stride, bias=False))
        layers.append(BatchNorm2d(f"{name}.bn", out_ch))
        layers.append(ReLU6(f"{name}.relu"))

    in_ch = 1
    for i, c in enumerate(spec.stem_channels):
        sc = spec.scaled(c)
        conv_bn_relu(f"stem.{i}", in_ch, sc, kernel=1, stride=1)
        plan.append(PlanRow("conv2d", None, c, sc, 1, 1))
        in_ch = sc

    entry = spec.scaled(spec.entry_channels)
    conv_bn_relu("entry", in_ch, entry, kernel=3, stride=2)
    plan.append(PlanRow("conv2d", None, spec.entry_channels, entry, 1, 2))
    in_ch = entry

    idx = 0
    for blk in spec.blocks:
        out_ch = spec.scaled(blk.c)
        plan.append(PlanRow("bottleneck", blk.t, blk.c, out_ch, blk.n, blk.s))
        for r in range(blk.n):
            stride = blk.s if r == 0 else 1
            layers.append(BottleneckBlock(f"blocks.{idx}", in_ch, out_ch, blk.t, stride))
            in_ch = out_ch
            idx += 1

    embed = spec.scaled(spec.head_conv_channels)
    conv_bn_relu("head", in_ch, embed, kernel=1, stride=1)
    plan.append(PlanRow("conv2d-1x1", None, spec.head_conv_channels, embed, 1, 1))

    layers.append(GlobalMaxPool("pool"))
    plan.append(PlanRow("maxpool", None, spec.head_conv_channels, embed, 1, None))

    hidden = spec.scaled(spec.head_hidden)
    layers.append(Linear("fc1", embed, hidden))
    layers.append(VectorReLU6("fc1.relu"))
    plan.append(PlanRow("linear", None, spec.head_hidden, hidden, 1, None))
    layers.append(Linear("fc2", hidden, len(head)))
    plan.append(PlanRow("linear", None, len(head), len(head), 1, None))

    params = init_params(layers, rng, dtype=dtype)
    return Network(spec=spec, variant=variant, head=head, layers=layers, plan=plan, params=params, dtype=dtype)


# ---------------------------------------------------------------------------
# Weight file: magic + version, then (name_len, name, rank, dims, float32 data)
# with all integers 64-bit little-endian and payloads 32-bit LE floats.

WEIGHTS_MAGIC = b"USTW"
WEIGHTS_VERSION = 1
_META_PREFIX = "__meta__."


def save_weights(path: str | Path, params: dict[str, np.ndarray], meta: dict[str, float] | None = None) -> None:
    """Serialize named arrays (plus scalar metadata entries) to ``path``."""
    out = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION)]
    entries = dict(params)
    for key, value in (meta or {}).items():
        entries[_META_PREFIX + key] = np.asarray([value], dtype=np.float32)
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<Q", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<Q", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_weights(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Read a weight file back into (params, meta)."""
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weight file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unknown weight file version {version}")
    pos = 8
    params: dict[str, np.ndarray] = {}
    meta: dict[str, float] = {}
    while pos < len(data):
        (name_len,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
        pos += 4 * count
        if name.startswith(_META_PREFIX):
            meta[name[len(_META_PREFIX):]] = float(arr[0])
        else:
            params[name] = arr
    return params, meta


def apply_weights(network: Network, loaded: dict[str, np.ndarray]) -> tuple[list[str], list[str]]:
    """Load a (possibly partial) parameter set into a network.

    Entries whose names match network parameters are copied in after a
    shape check; everything else in the network keeps its current values,
    so a file covering only some layers pre-initializes exactly those.
    Returns (applied_names, ignored_names).
    """
    applied, ignored = [], []
    for name, arr in loaded.items():
        if name not in network.params:
            ignored.append(name)
            continue
        current = network.params[name]
        if tuple(arr.shape) != tuple(current.shape):
            raise ValueError(
                f"shape mismatch for layer {name!r}: file has {tuple(arr.shape)}, network needs {tuple(current.shape)}"
            )
        network.params[name] = arr.astype(network.dtype)
        applied.append(name)
    return applied, ignored


def network_meta(network: Network) -> dict[str, float]:
    """Scalar metadata stored alongside weights for compatibility checks."""
    return {
        "head_units": float(network.n_outputs),
        "variant": 1.0 if network.variant == "M1" else 2.0,
        "width_multiplier": float(network.spec.width_multiplier),
    }
