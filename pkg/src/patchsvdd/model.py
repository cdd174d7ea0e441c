"""Hierarchical patch encoders and the relative-position classifier.

``f_small`` is a four-layer valid-padding conv stack whose receptive field
is exactly 32 px, so a 32x32 patch maps to a single D-vector and a whole
image maps to a dense feature grid with a 4 px step. ``g_big`` aggregates
the 2x2 grid of ``f_small`` features of a 64x64 patch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .numerics import (
    DimensionError,
    Parameter,
    Tensor,
    conv2d,
    leaky_relu,
    linear,
    no_grad,
)
from .numerics import serialize

ARCH_VERSION = 1
ALPHA = 0.1

# (kernel, stride, out_channels or None for the embedding width)
SMALL_LAYERS: Tuple[Tuple[int, int, Optional[int]], ...] = (
    (4, 2, 32),
    (5, 2, 64),
    (3, 1, 128),
    (4, 1, None),
)
# Non-hierarchical K=64 stack used by the flat ablation.
FLAT_BIG_LAYERS: Tuple[Tuple[int, int, Optional[int]], ...] = (
    (4, 2, 32),
    (5, 2, 64),
    (4, 2, 128),
    (3, 1, 128),
    (4, 1, None),
)
CLASSIFIER_HIDDEN = 128
N_POSITIONS = 8


def receptive_field(layers) -> Tuple[int, int]:
    """(receptive field, cumulative stride) of a conv stack."""
    rf, jump = 1, 1
    for k, s, _ in layers:
        rf += (k - 1) * jump
        jump *= s
    return rf, jump


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    receptive_fields: Tuple[int, int] = (64, 32)
    hierarchical: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        big, small = self.receptive_fields
        if big != 2 * small:
            raise ValueError(f"big receptive field {big} must be twice the small one {small}")
        if small != receptive_field(SMALL_LAYERS)[0]:
            raise ValueError(f"small receptive field is fixed at {receptive_field(SMALL_LAYERS)[0]}")


def he_std(fan_in: int, alpha: float = ALPHA) -> float:
    return float(np.sqrt(2.0 / ((1.0 + alpha ** 2) * fan_in)))


def _conv_params(prefix, layers, in_ch, embed_dim, rng, dtype) -> Dict[str, Parameter]:
    params = {}
    for i, (k, _, out) in enumerate(layers):
        out = embed_dim if out is None else out
        fan_in = k * k * in_ch
        w = rng.standard_normal((k, k, in_ch, out)) * he_std(fan_in)
        params[f"{prefix}.conv{i}.weight"] = Parameter(w.astype(dtype), name=f"{prefix}.conv{i}.weight")
        params[f"{prefix}.conv{i}.bias"] = Parameter(np.zeros(out, dtype), name=f"{prefix}.conv{i}.bias")
        in_ch = out
    return params


def _mlp_params(prefix, sizes, rng, dtype) -> Dict[str, Parameter]:
    params = {}
    for i, (n, m) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.standard_normal((n, m)) * he_std(n)
        params[f"{prefix}.fc{i}.weight"] = Parameter(w.astype(dtype), name=f"{prefix}.fc{i}.weight")
        params[f"{prefix}.fc{i}.bias"] = Parameter(np.zeros(m, dtype), name=f"{prefix}.fc{i}.bias")
    return params


def _run_convs(x: Tensor, params, prefix: str, layers) -> Tensor:
    n = len(layers)
    for i, (_, stride, _) in enumerate(layers):
        x = conv2d(x, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"], stride)
        if i < n - 1:
            x = leaky_relu(x, ALPHA)
    return x


def _run_mlp(x: Tensor, params, prefix: str, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = linear(x, params[f"{prefix}.fc{i}.weight"], params[f"{prefix}.fc{i}.bias"])
        if i < n_layers - 1:
            x = leaky_relu(x, ALPHA)
    return x


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def split_quadrants(patches: np.ndarray) -> np.ndarray:
    """[..., 2K, 2K, C] -> [..., 4, K, K, C] in row-major quadrant order."""
    h, w = patches.shape[-3], patches.shape[-2]
    k = h // 2
    quads = [patches[..., r:r + k, c:c + k, :] for r in (0, k) for c in (0, k)]
    return np.stack(quads, axis=-4)


@dataclass
class HierarchicalEncoder:
    config: EncoderConfig
    params: Dict[str, Parameter] = field(default_factory=dict)

    @property
    def small_size(self) -> int:
        return self.config.receptive_fields[1]

    @property
    def big_size(self) -> int:
        return self.config.receptive_fields[0]

    def small_params(self) -> List[Parameter]:
        return [p for k, p in self.params.items() if k.startswith("small.")]

    def big_params(self) -> List[Parameter]:
        return [p for k, p in self.params.items() if not k.startswith("small.")]

    # -- small scale --------------------------------------------------------
    def encode_small(self, patches) -> Tensor:
        """[32,32,3] -> [D] or [N,32,32,3] -> [N,D]."""
        x = _as_input(patches)
        k = self.small_size
        if x.ndim not in (3, 4) or x.shape[-3:] != (k, k, 3):
            raise DimensionError(f"encode_small expects [..., {k}, {k}, 3], got {x.shape}")
        out = _run_convs(x, self.params, "small", SMALL_LAYERS)
        d = self.config.embed_dim
        return out.reshape((d,) if x.ndim == 3 else (x.shape[0], d))

    def small_feature_map(self, image: np.ndarray) -> np.ndarray:
        """Dense f_small features of every 32x32 window at a 4 px step.

        Entry (i, j) is the feature of the patch whose top-left corner is
        (4i, 4j). Values agree with ``encode_small`` up to float rounding.
        """
        with no_grad():
            out = _run_convs(_as_input(image), self.params, "small", SMALL_LAYERS)
        return out.data

    # -- big scale ----------------------------------------------------------
    def g_big(self, quadrant_features) -> Tensor:
        """[4, D] -> [D] or [N, 4, D] -> [N, D]; quadrants in row-major order."""
        if not self.config.hierarchical:
            raise ValueError("g_big is only defined for hierarchical encoders")
        q = _as_input(quadrant_features)
        d = self.config.embed_dim
        if q.shape[-2:] != (4, d) or q.ndim not in (2, 3):
            raise DimensionError(f"g_big expects [..., 4, {d}], got {q.shape}")
        flat = q.reshape((4 * d,) if q.ndim == 2 else (q.shape[0], 4 * d))
        return _run_mlp(flat, self.params, "big", 2)

    def encode_big(self, patches) -> Tensor:
        """[64,64,3] -> [D] or [N,64,64,3] -> [N,D].

        Hierarchical encoders route every quadrant through ``encode_small``
        and aggregate with ``g_big``.
        """
        x = _as_input(patches)
        k = self.big_size
        if x.ndim not in (3, 4) or x.shape[-3:] != (k, k, 3):
            raise DimensionError(f"encode_big expects [..., {k}, {k}, 3], got {x.shape}")
        d = self.config.embed_dim
        if not self.config.hierarchical:
            out = _run_convs(x, self.params, "flat", FLAT_BIG_LAYERS)
            return out.reshape((d,) if x.ndim == 3 else (x.shape[0], d))
        if x.requires_grad:
            raise ValueError("encode_big does not propagate gradients to the input patch")
        quads = split_quadrants(x.data)
        if x.ndim == 3:
            return self.g_big(self.encode_small(quads))
        n = x.shape[0]
        feats = self.encode_small(quads.reshape((n * 4,) + quads.shape[2:]))
        return self.g_big(feats.reshape((n, 4, d)))

    def copy(self, dtype=None) -> "HierarchicalEncoder":
        params = {
            k: Parameter(p.data.astype(dtype or p.dtype, copy=True), name=k) for k, p in self.params.items()
        }
        return HierarchicalEncoder(self.config, params)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}


@dataclass
class PositionClassifier:
    """MLP over (h1 - h2): D -> 128 -> 128 -> 8."""

    params: Dict[str, Parameter]
    prefix: str = "clf"

    @classmethod
    def random(cls, embed_dim: int, seed: int, prefix: str = "clf", dtype=np.float32):
        rng = np.random.default_rng(seed)
        sizes = (embed_dim, CLASSIFIER_HIDDEN, CLASSIFIER_HIDDEN, N_POSITIONS)
        return cls(_mlp_params(prefix, sizes, rng, dtype), prefix)

    @property
    def embed_dim(self) -> int:
        return self.params[f"{self.prefix}.fc0.weight"].shape[0]

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def classify_pair(self, h1, h2) -> Tensor:
        h1, h2 = _as_input(h1), _as_input(h2)
        if h1.shape != h2.shape or h1.shape[-1] != self.embed_dim:
            raise DimensionError(f"classify_pair: shapes {h1.shape} and {h2.shape} (D={self.embed_dim})")
        return _run_mlp(h1 - h2, self.params, self.prefix, 3)

    def copy(self, dtype=None) -> "PositionClassifier":
        params = {k: Parameter(p.data.astype(dtype or p.dtype, copy=True), name=k) for k, p in self.params.items()}
        return PositionClassifier(params, self.prefix)


def init_random(config: EncoderConfig, seed: Optional[int] = None, dtype=np.float32):
    """Seeded He-normal weights, zero biases. Same seed -> identical bytes."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    params = _conv_params("small", SMALL_LAYERS, 3, d, rng, dtype)
    if config.hierarchical:
        params.update(_mlp_params("big", (4 * d, CLASSIFIER_HIDDEN, d), rng, dtype))
    else:
        params.update(_conv_params("flat", FLAT_BIG_LAYERS, 3, d, rng, dtype))
    encoder = HierarchicalEncoder(config, params)
    classifier = PositionClassifier.random(d, seed + 1, dtype=dtype)
    return encoder, classifier


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MODEL_FILE = "model.psvd"
MANIFEST_FILE = "model.manifest"


def save_model(directory, encoder: HierarchicalEncoder, classifiers: Optional[Dict[str, PositionClassifier]] = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = dict(encoder.state_dict())
    for clf in (classifiers or {}).values():
        tensors.update({k: p.data for k, p in clf.params.items()})
    serialize.save(directory / MODEL_FILE, tensors)
    cfg = encoder.config
    lines = [
        f"arch_version={ARCH_VERSION}",
        f"embed_dim={cfg.embed_dim}",
        f"receptive_field_big={cfg.receptive_fields[0]}",
        f"receptive_field_small={cfg.receptive_fields[1]}",
        f"hierarchical={int(cfg.hierarchical)}",
        f"seed={cfg.seed}",
        f"classifiers={','.join(sorted(classifiers or {}))}",
        f"format_version={serialize.VERSION}",
    ]
    (directory / MANIFEST_FILE).write_text("\n".join(lines) + "\n")


def load_model(directory):
    """Returns (encoder, {scale_name: classifier})."""
    directory = Path(directory)
    manifest = {}
    for line in (directory / MANIFEST_FILE).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            manifest[k.strip()] = v.strip()
    if int(manifest["arch_version"]) != ARCH_VERSION:
        raise ValueError(f"unsupported architecture version {manifest['arch_version']}")
    cfg = EncoderConfig(
        embed_dim=int(manifest["embed_dim"]),
        receptive_fields=(int(manifest["receptive_field_big"]), int(manifest["receptive_field_small"])),
        hierarchical=bool(int(manifest.get("hierarchical", "1"))),
        seed=int(manifest["seed"]),
    )
    tensors = serialize.load(directory / MODEL_FILE)
    enc_params = {k: Parameter(v, name=k) for k, v in tensors.items() if k.split(".")[0] in ("small", "big", "flat")}
    encoder = HierarchicalEncoder(cfg, enc_params)
    classifiers = {}
    for name in filter(None, manifest.get("classifiers", "").split(",")):
        params = {k: Parameter(v, name=k) for k, v in tensors.items() if k.split(".")[0] == name}
        classifiers[name] = PositionClassifier(params, name)
    return encoder, classifiers
