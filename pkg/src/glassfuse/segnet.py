"""Two-stream RGB-D segmentation network with switchable fusion.

The network is deliberately small: each modality runs through a stack of
stride-2 conv+relu blocks producing a shallow and a deep feature map,
the two modalities are fused at both depths (weighted fusion, plain
concatenation, or RGB passthrough), and a decoder upsamples, merges and
projects down to two per-pixel class logits.  Only fused maps enter the
decoder; there are no skip connections from the raw backbone.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeMismatchError, Tensor
from .wff import FusionWeights, WffParams, he_uniform, wff_forward

__all__ = [
    "FUSION_MODES",
    "ABLATIONS",
    "NetworkConfig",
    "SegNet",
    "Checkpoint",
    "classify",
    "predict",
    "bce_loss",
    "PROB_CLAMP",
    "CHECKPOINT_MAGIC",
]

FUSION_MODES = ("wff", "concat", "rgb_only")
ABLATIONS = ("none", "f_af_only", "f_af_and_f_aw")

PROB_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"GLASSFUSE-CKPT-v1\n"


def _stride_blocks(total: int, what: str) -> int:
    n = int(round(np.log2(total)))
    if total < 2 or 2**n != total:
        raise ValueError(f"{what} must be a power of two >= 2, got {total}")
    return n


@dataclass
class NetworkConfig:
    """Architecture switches; parameter names and shapes follow from these."""

    input_h: int = 64
    input_w: int = 64
    shallow_channels: int = 16
    deep_channels: int = 64
    shallow_stride: int = 4
    deep_stride: int = 16
    fusion_mode: str = "wff"
    decoder_channels: int = 32
    ablation: str = "none"
    wff_hidden_relu: bool = False

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.ablation != "none" and self.fusion_mode != "wff":
            raise ValueError("ablation switches only apply to fusion_mode='wff'")
        if self.deep_stride % self.shallow_stride != 0:
            raise ValueError(
                f"deep_stride {self.deep_stride} not divisible by shallow_stride {self.shallow_stride}"
            )
        if self.input_h % self.deep_stride or self.input_w % self.deep_stride:
            raise ValueError(
                f"input {self.input_h}x{self.input_w} not divisible by deep_stride {self.deep_stride}"
            )
        _stride_blocks(self.shallow_stride, "shallow_stride")
        _stride_blocks(self.deep_stride // self.shallow_stride, "deep_stride/shallow_stride")
        if self.fusion_mode == "wff" and (self.shallow_channels % 2 or self.deep_channels % 2):
            raise ValueError("wff fusion requires even shallow_channels and deep_channels")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def _conv_param(rng, cin: int, cout: int, k: int, dtype) -> tuple[Tensor, Tensor]:
    w = Tensor(he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)
    b = Tensor(np.zeros(cout, dtype), requires_grad=True)
    return w, b


class SegNet:
    """The network: parameters plus the forward graph builder."""

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(seed))
        cfg = config
        n1 = _stride_blocks(cfg.shallow_stride, "shallow_stride")
        n2 = _stride_blocks(cfg.deep_stride // cfg.shallow_stride, "deep stride ratio")

        self.streams: dict[str, list[tuple[Tensor, Tensor]]] = {}
        streams = ["rgb"] if cfg.fusion_mode == "rgb_only" else ["rgb", "depth"]
        for stream in streams:
            cin = 3 if stream == "rgb" else 1
            blocks = []
            for _ in range(n1):
                blocks.append(_conv_param(rng, cin, cfg.shallow_channels, 3, dtype))
                cin = cfg.shallow_channels
            for _ in range(n2):
                blocks.append(_conv_param(rng, cin, cfg.deep_channels, 3, dtype))
                cin = cfg.deep_channels
            self.streams[stream] = blocks
        self._n_shallow_blocks = n1

        self.fusion: dict[str, WffParams | tuple[Tensor, Tensor] | None] = {"shallow": None, "deep": None}
        if cfg.fusion_mode == "wff":
            self.fusion["shallow"] = WffParams.initialize(
                cfg.shallow_channels, rng, dtype, hidden_relu=cfg.wff_hidden_relu
            )
            self.fusion["deep"] = WffParams.initialize(
                cfg.deep_channels, rng, dtype, hidden_relu=cfg.wff_hidden_relu
            )
        elif cfg.fusion_mode == "concat":
            self.fusion["shallow"] = _conv_param(rng, 2 * cfg.shallow_channels, cfg.shallow_channels, 1, dtype)
            self.fusion["deep"] = _conv_param(rng, 2 * cfg.deep_channels, cfg.deep_channels, 1, dtype)

        dec_in = cfg.shallow_channels + cfg.deep_channels
        self.decoder = [
            _conv_param(rng, dec_in, cfg.decoder_channels, 3, dtype),
            _conv_param(rng, cfg.decoder_channels, cfg.decoder_channels, 3, dtype),
        ]
        self.head = _conv_param(rng, cfg.decoder_channels, 2, 1, dtype)

    # -- parameter bookkeeping -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        """Name -> tensor map in a fixed order determined by the config."""
        out: dict[str, Tensor] = {}
        for stream, blocks in self.streams.items():
            for i, (w, b) in enumerate(blocks):
                out[f"{stream}.conv{i}.weight"] = w
                out[f"{stream}.conv{i}.bias"] = b
        for site in ("shallow", "deep"):
            params = self.fusion[site]
            if isinstance(params, WffParams):
                out.update(params.named(f"fuse_{site}"))
            elif params is not None:
                out[f"fuse_{site}.proj.weight"] = params[0]
                out[f"fuse_{site}.proj.bias"] = params[1]
        for i, (w, b) in enumerate(self.decoder):
            out[f"decoder.conv{i}.weight"] = w
            out[f"decoder.conv{i}.bias"] = b
        out["decoder.head.weight"] = self.head[0]
        out["decoder.head.bias"] = self.head[1]
        return out

    def zero_grads(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    # -- forward graph -----------------------------------------------------------

    def encode(self, image: Tensor, stream: str) -> tuple[Tensor, Tensor]:
        """Run one modality through its stack: returns (shallow, deep) maps."""
        if stream not in self.streams:
            raise ValueError(f"network has no {stream!r} stream (fusion_mode={self.config.fusion_mode})")
        expected = 3 if stream == "rgb" else 1
        if image.data.ndim != 4 or image.shape[1] != expected:
            raise ShapeMismatchError(
                f"{stream} stream expects [N,{expected},H,W] input, got {image.shape}"
            )
        x = image
        shallow = None
        for i, (w, b) in enumerate(self.streams[stream]):
            x = T.relu(T.conv2d(x, w, b, stride=2, padding=1))
            if i + 1 == self._n_shallow_blocks:
                shallow = x
        return shallow, x

    def fuse_stage(self, r: Tensor, d: Tensor | None, site: str) -> tuple[Tensor, FusionWeights | None]:
        mode = self.config.fusion_mode
        if mode == "rgb_only":
            return r, None
        if d is None or r.shape != d.shape:
            raise ShapeMismatchError(f"fuse_stage {site}: rgb {r.shape} vs depth {None if d is None else d.shape}")
        if mode == "concat":
            w, b = self.fusion[site]
            return T.conv2d(T.concat([r, d], axis=1), w, b), None
        if self.config.ablation == "f_af_only":
            # frozen half/half blend: summation only, no learned weighting
            n, c = r.shape[0], r.shape[1]
            half = Tensor(np.full((n, c), 0.5, dtype=r.dtype))
            return T.scale(T.add(r, d), 0.5), FusionWeights(half, half)
        fused, weights = wff_forward(r, d, self.fusion[site])
        return fused, weights

    def decode(self, fused_shallow: Tensor, fused_deep: Tensor) -> Tensor:
        """Merge the two fused maps and project to per-pixel logits [N,2,H,W]."""
        hs, ws = fused_shallow.shape[2], fused_shallow.shape[3]
        up = T.bilinear_upsample(fused_deep, hs, ws)
        x = T.concat([fused_shallow, up], axis=1)
        for w, b in self.decoder:
            x = T.relu(T.conv2d(x, w, b, stride=1, padding=1))
        x = T.bilinear_upsample(x, self.config.input_h, self.config.input_w)
        return T.conv2d(x, self.head[0], self.head[1])

    def forward(self, rgb: Tensor, depth: Tensor | None) -> Tensor:
        logits, _ = self.forward_with_weights(rgb, depth)
        return logits

    def forward_with_weights(
        self, rgb: Tensor, depth: Tensor | None
    ) -> tuple[Tensor, dict[str, FusionWeights | None]]:
        """Full forward pass; also returns the fusion weights per site."""
        shallow_r, deep_r = self.encode(rgb, "rgb")
        if self.config.fusion_mode == "rgb_only":
            return self.decode(shallow_r, deep_r), {"shallow": None, "deep": None}
        if depth is None:
            raise ValueError(f"fusion_mode={self.config.fusion_mode} requires a depth input")
        shallow_d, deep_d = self.encode(depth, "depth")
        fused_s, w_s = self.fuse_stage(shallow_r, shallow_d, "shallow")
        fused_d, w_d = self.fuse_stage(deep_r, deep_d, "deep")
        return self.decode(fused_s, fused_d), {"shallow": w_s, "deep": w_d}


# ---------------------------------------------------------------------------
# pixel classification and loss
# ---------------------------------------------------------------------------


def classify(logits: Tensor) -> Tensor:
    """Per-pixel class probabilities from 2-channel logits."""
    if logits.data.ndim != 4 or logits.shape[1] != 2:
        raise ShapeMismatchError(f"classify expects [N,2,H,W] logits, got {logits.shape}")
    return T.softmax(logits, axis=1)


def predict(probs: Tensor | np.ndarray) -> np.ndarray:
    """Hard mask from probabilities; exact ties resolve to background."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (p[:, 1] > p[:, 0]).astype(np.uint8)


def _as_binary_mask(mask, dtype) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    vals = np.unique(m)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"mask must be binary {{0,1}}, found values {vals[:8]}")
    return m.astype(dtype)


def bce_loss(probs: Tensor, mask) -> Tensor:
    """Mean over all pixels of -log p(true class), probabilities clamped.

    ``mask`` is the [N,H,W] ground truth with 1 marking glass.
    """
    if probs.data.ndim != 4 or probs.shape[1] != 2:
        raise ShapeMismatchError(f"bce_loss expects [N,2,H,W] probabilities, got {probs.shape}")
    n, _, h, w = probs.shape
    m = _as_binary_mask(mask, probs.dtype)
    if m.shape != (n, h, w):
        raise ShapeMismatchError(f"bce_loss: mask {m.shape} does not match probabilities {probs.shape}")
    glass = Tensor(m.reshape(n, 1, h, w))
    background = Tensor((1.0 - m).reshape(n, 1, h, w))
    p_glass = T.narrow(probs, 1, 1, 1)
    p_background = T.narrow(probs, 1, 0, 1)
    p_true = T.add(T.mul(p_glass, glass), T.mul(p_background, background))
    p_true = T.clamp(p_true, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return T.neg(T.mean_all(T.log(p_true)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Serialized network: config, named parameter arrays, training metadata."""

    config: NetworkConfig
    parameters: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: SegNet, meta: dict | None = None) -> "Checkpoint":
        params = {name: t.data.copy() for name, t in net.named_parameters().items()}
        return cls(config=net.config, parameters=params, meta=dict(meta or {}))

    def build(self) -> SegNet:
        """Reconstruct a network carrying exactly these parameters."""
        net = SegNet(self.config)
        named = net.named_parameters()
        if set(named) != set(self.parameters):
            missing = sorted(set(named) ^ set(self.parameters))
            raise ValueError(f"checkpoint parameters do not match config, mismatched names: {missing}")
        for name, tensor in named.items():
            stored = self.parameters[name]
            if stored.shape != tensor.shape:
                raise ValueError(f"checkpoint parameter {name}: shape {stored.shape} != {tensor.shape}")
            tensor.data = stored.astype(np.float32).copy()
        return net

    def save(self, path: str | os.PathLike) -> None:
        blobs = []
        manifest = []
        offset = 0
        for name, arr in self.parameters.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = json.dumps(
            {"config": self.config.to_dict(), "meta": self.meta, "manifest": manifest},
            sort_keys=True,
        ).encode()
        path = os.fspath(path)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".ckpt-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(CHECKPOINT_MAGIC)
                f.write(len(header).to_bytes(8, "little"))
                f.write(header)
                for raw in blobs:
                    f.write(raw)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        with open(path, "rb") as f:
            magic = f.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a glassfuse checkpoint (bad magic)")
            header_len = int.from_bytes(f.read(8), "little")
            header = json.loads(f.read(header_len).decode())
            blob = f.read()
        params: dict[str, np.ndarray] = {}
        for entry in header["manifest"]:
            raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
            params[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        return cls(
            config=NetworkConfig.from_dict(header["config"]),
            parameters=params,
            meta=header.get("meta", {}),
        )
