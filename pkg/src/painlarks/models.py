"""STGCN, STGCN-LSTM and hybrid ConvNeXt-LSTM classifiers."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .graph import FacialGraph, build_facial_adjacency, read_edge_list, write_edge_list
from .layers import (
    ConvLSTM, Dense, LayerNorm, Module, SequenceEncoder, TemporalConv,
    LSTM_VARIANTS, graph_convolution, stacked_lstm_param_count, uniform_param, zeros_param,
)
from .tensor import ShapeError, Tensor

MODEL_KINDS = ("stgcn", "stgcn_lstm", "hybrid")
BACKBONES = ("toy_convnext", "precomputed_features")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StgcnBlockConfig:
    c_in: int
    c_out: int
    temporal_kernel: int = 9
    use_gate: bool = True

    def __post_init__(self):
        if self.c_in < 1 or self.c_out < 1:
            raise ConfigError(f"block widths must be >= 1, got {self.c_in}->{self.c_out}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal_kernel must be odd, got {self.temporal_kernel}")


@dataclass(frozen=True)
class ConvNextConfig:
    stage_channels: tuple[int, ...] = (96, 192, 384, 768)
    stage_blocks: tuple[int, ...] = (3, 3, 9, 3)
    image_size: int = 224
    expansion: int = 4

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.stage_blocks) != 4:
            raise ConfigError("ConvNeXt needs exactly 4 stage widths and 4 block counts")
        if self.image_size % 32:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")


DEFAULT_BLOCKS = (StgcnBlockConfig(2, 32), StgcnBlockConfig(32, 64), StgcnBlockConfig(64, 64))


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "stgcn_lstm"
    blocks: tuple[StgcnBlockConfig, ...] = DEFAULT_BLOCKS
    lstm_hidden: int = 64
    lstm_variant: str = "stacked"
    num_classes: int = 2
    backbone: str = "precomputed_features"
    convnext: ConvNextConfig = field(default_factory=ConvNextConfig)
    n_frames: int = 20
    num_nodes: int = 68
    feature_dim: int | None = None
    strict_frames: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.lstm_variant not in LSTM_VARIANTS:
            raise ConfigError(f"unknown lstm_variant {self.lstm_variant!r}")
        if self.num_classes != 2:
            raise ConfigError("only binary classification (num_classes=2) is supported")
        if self.kind != "hybrid":
            if not self.blocks:
                raise ConfigError("at least one STGCN block is required")
            if self.blocks[0].c_in != 2:
                raise ConfigError("first STGCN block must take 2 input channels (x, y)")
            for a, b in zip(self.blocks, self.blocks[1:]):
                if a.c_out != b.c_in:
                    raise ConfigError(f"block widths do not chain: {a.c_out} -> {b.c_in}")

    def to_flat(self) -> dict[str, str]:
        b0 = self.blocks[0]
        return {
            "kind": self.kind,
            "blocks": ",".join(f"{b.c_in}:{b.c_out}" for b in self.blocks),
            "temporal_kernel": str(b0.temporal_kernel),
            "use_gate": str(b0.use_gate).lower(),
            "lstm_hidden": str(self.lstm_hidden),
            "lstm_variant": self.lstm_variant,
            "num_classes": str(self.num_classes),
            "backbone": self.backbone,
            "stage_channels": ",".join(map(str, self.convnext.stage_channels)),
            "stage_blocks": ",".join(map(str, self.convnext.stage_blocks)),
            "image_size": str(self.convnext.image_size),
            "expansion": str(self.convnext.expansion),
            "n_frames": str(self.n_frames),
            "num_nodes": str(self.num_nodes),
            "feature_dim": "" if self.feature_dim is None else str(self.feature_dim),
            "strict_frames": str(self.strict_frames).lower(),
        }

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "ModelConfig":
        def ints(s):
            return tuple(int(v) for v in s.split(",") if v.strip())

        def boolean(s):
            return parse_bool(s)

        tk = int(flat.get("temporal_kernel", 9))
        gate = boolean(flat.get("use_gate", "true"))
        blocks = DEFAULT_BLOCKS
        if "blocks" in flat:
            blocks = tuple(parse_blocks(flat["blocks"], tk, gate))
        else:
            blocks = tuple(replace(b, temporal_kernel=tk, use_gate=gate) for b in blocks)
        cn = ConvNextConfig()
        cn = ConvNextConfig(
            stage_channels=ints(flat["stage_channels"]) if "stage_channels" in flat else cn.stage_channels,
            stage_blocks=ints(flat["stage_blocks"]) if "stage_blocks" in flat else cn.stage_blocks,
            image_size=int(flat.get("image_size", cn.image_size)),
            expansion=int(flat.get("expansion", cn.expansion)),
        )
        fd = flat.get("feature_dim", "")
        return cls(
            kind=flat.get("kind", "stgcn_lstm"),
            blocks=blocks,
            lstm_hidden=int(flat.get("lstm_hidden", 64)),
            lstm_variant=flat.get("lstm_variant", "stacked"),
            num_classes=int(flat.get("num_classes", 2)),
            backbone=flat.get("backbone", "precomputed_features"),
            convnext=cn,
            n_frames=int(flat.get("n_frames", 20)),
            num_nodes=int(flat.get("num_nodes", 68)),
            feature_dim=int(fd) if str(fd).strip() else None,
            strict_frames=boolean(flat.get("strict_frames", "true")),
        )


def parse_bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def parse_blocks(spec: str, temporal_kernel: int = 9, use_gate: bool = True) -> list[StgcnBlockConfig]:
    """``"2:32,32:64,64:64"`` -> block configs."""
    out = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            a, b = part.split(":")
            out.append(StgcnBlockConfig(int(a), int(b), temporal_kernel, use_gate))
        except ValueError:
            raise ConfigError(f"malformed block spec {part!r}; expected c_in:c_out") from None
    return out


def _input_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- STGCN


class StgcnBlock(Module):
    """Spatial graph convolution, temporal convolution and ConvLSTM, gated and
    fused with a projected residual, then normalized over channels."""

    def __init__(self, cfg: StgcnBlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        ci, co = cfg.c_in, cfg.c_out
        self.gcn = Dense(ci, co, rng)
        self.tc = TemporalConv(co, co, cfg.temporal_kernel, rng)
        self.convlstm = ConvLSTM(co, co, rng)
        self.gate = Dense(co, co, rng) if cfg.use_gate else None
        self.residual = Dense(ci, co, rng, bias=False)
        self.proj = Dense(2 * co, co, rng)
        self.norm = LayerNorm(co)

    def __call__(self, A_hat: Tensor, X: Tensor) -> Tensor:
        if X.shape[-2] != A_hat.shape[0]:
            raise ShapeError(f"STGCN block: input has {X.shape[-2]} nodes, graph has {A_hat.shape[0]}")
        if X.shape[-1] != self.cfg.c_in:
            raise ShapeError(f"STGCN block: expected {self.cfg.c_in} channels, got {X.shape[-1]}")
        h = T.gelu(T.add_bias(graph_convolution(A_hat, X, self.gcn.W), self.gcn.b))
        h = self.tc(h)
        h = self.convlstm.run(A_hat, h)
        if self.gate is not None:
            h = T.sigmoid(self.gate(h)) * h
        fused = T.concat([h, self.residual(X)], axis=-1)
        return self.norm(self.proj(fused))


def stgcn_block_forward(block: StgcnBlock, graph: FacialGraph, X) -> Tensor:
    if graph.num_nodes != _input_tensor(X).shape[-2]:
        raise ShapeError("node count mismatch between graph and input")
    return block(graph.A_hat, _input_tensor(X))


class StgcnNet(Module):
    """STGCN classifier; with ``kind='stgcn_lstm'`` a two-layer stacked LSTM
    reads the per-frame node-pooled features before the classifier."""

    def __init__(self, cfg: ModelConfig, graph: FacialGraph, rng: np.random.Generator):
        if cfg.kind not in ("stgcn", "stgcn_lstm"):
            raise ConfigError(f"StgcnNet cannot build kind {cfg.kind!r}")
        if graph.num_nodes != cfg.num_nodes:
            raise ConfigError(f"graph has {graph.num_nodes} nodes, config expects {cfg.num_nodes}")
        self.cfg = cfg
        self._graph = graph
        self.blocks = [StgcnBlock(b, rng) for b in cfg.blocks]
        width = cfg.blocks[-1].c_out
        if cfg.kind == "stgcn_lstm":
            self.lstm = SequenceEncoder("stacked", width, cfg.lstm_hidden, rng)
            width = self.lstm.output_size
        self.head = Dense(width, cfg.num_classes, rng)

    @property
    def graph(self) -> FacialGraph:
        return self._graph

    def features(self, x) -> Tensor:
        x = _input_tensor(x)
        c = self.cfg
        expected = (c.n_frames, c.num_nodes, 2) if c.strict_frames else (c.num_nodes, 2)
        if x.shape[-len(expected):] != expected:
            raise ShapeError(f"expected clips of shape [{c.n_frames}, {c.num_nodes}, 2], got {list(x.shape)}")
        A = self._graph.A_hat
        for block in self.blocks:
            x = block(A, x)
        return x

    def __call__(self, x) -> Tensor:
        x = _input_tensor(x)
        unbatched = x.ndim == 3
        if unbatched:
            x = x.reshape((1,) + x.shape)
        h = self.features(x)
        if self.cfg.kind == "stgcn":
            pooled = T.mean(h, axis=(1, 2))
        else:
            pooled = self.lstm(T.mean(h, axis=2))
        logits = self.head(pooled)
        return logits.reshape(logits.shape[1:]) if unbatched else logits


def stgcn_forward(model: StgcnNet, clip) -> Tensor:
    return model(clip)


stgcn_lstm_forward = stgcn_forward


# ---------------------------------------------------------------- ConvNeXt


class ConvNextBlock(Module):
    """Depthwise 7x7, channel LayerNorm, 1x1 expand, GELU, 1x1 contract, residual."""

    def __init__(self, channels: int, rng: np.random.Generator, expansion: int = 4):
        C = channels
        self.dw_kernel = uniform_param(rng, (C, 1, 7, 7), 49)
        self.dw_bias = zeros_param(C)
        self.norm = LayerNorm(C)
        self.pw1 = Dense(C, expansion * C, rng)
        self.pw2 = Dense(expansion * C, C, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = _input_tensor(x)
        C = x.shape[-3]
        y = T.conv2d(x, self.dw_kernel, self.dw_bias, stride=1, pad=3, groups=C)
        last = (0, 2, 3, 1) if y.ndim == 4 else (1, 2, 0)
        back = (0, 3, 1, 2) if y.ndim == 4 else (2, 0, 1)
        y = T.transpose(y, last)
        y = self.pw2(T.gelu(self.pw1(self.norm(y))))
        return x + T.transpose(y, back)


def convnext_block_forward(block: ConvNextBlock, x) -> Tensor:
    return block(x)


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks


class _Conv(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        self.kernel = uniform_param(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = zeros_param(c_out)
        self.k = k

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias, stride=self.k, pad=0)


class ConvNextBackbone(Module):
    """4x4/stride-4 patchify stem, four stages of ConvNeXt blocks separated by
    2x2/stride-2 downsampling, global average pool."""

    def __init__(self, cfg: ConvNextConfig, rng: np.random.Generator):
        self.cfg = cfg
        ch = cfg.stage_channels
        self.stem = _Conv(3, ch[0], 4, rng)
        self.stages = []
        self.downsample = []
        for s in range(4):
            if s > 0:
                self.downsample.append(_Conv(ch[s - 1], ch[s], 2, rng))
            self.stages.append(_Stage([ConvNextBlock(ch[s], rng, cfg.expansion)
                                       for _ in range(cfg.stage_blocks[s])]))
        self._trace: list[tuple[int, int, int]] = []

    @property
    def trace(self) -> list[tuple[int, int, int]]:
        """``(channels, resolution, blocks_run)`` per stage for the last call."""
        return list(self._trace)

    @property
    def output_size(self) -> int:
        return self.cfg.stage_channels[-1]

    def __call__(self, images) -> Tensor:
        x = _input_tensor(images)
        unbatched = x.ndim == 3
        if unbatched:
            x = x.reshape((1,) + x.shape)
        S = self.cfg.image_size
        if x.shape[1:] != (3, S, S):
            raise ShapeError(f"backbone expects images [3, {S}, {S}], got {list(x.shape[1:])}")
        self._trace = []
        x = self.stem(x)
        for s, stage in enumerate(self.stages):
            if s > 0:
                x = self.downsample[s - 1](x)
            for block in stage.blocks:
                x = block(x)
            self._trace.append((x.shape[1], x.shape[2], len(stage.blocks)))
        feats = T.mean(x, axis=(2, 3))
        return feats.reshape(feats.shape[1:]) if unbatched else feats


def convnext_backbone_forward(backbone: ConvNextBackbone, image) -> Tensor:
    return backbone(image)


# ---------------------------------------------------------------- hybrid


class HybridNet(Module):
    """Per-frame features (ConvNeXt or precomputed) stacked into a sequence and
    classified by an LSTM variant."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.kind != "hybrid":
            raise ConfigError(f"HybridNet cannot build kind {cfg.kind!r}")
        self.cfg = cfg
        if cfg.backbone == "toy_convnext":
            self.backbone = ConvNextBackbone(cfg.convnext, rng)
            dim = self.backbone.output_size
        else:
            self.backbone = None
            if cfg.feature_dim is None:
                raise ConfigError("precomputed_features backbone needs feature_dim")
            dim = cfg.feature_dim
        self.encoder = SequenceEncoder(cfg.lstm_variant, dim, cfg.lstm_hidden, rng)
        self.head = Dense(self.encoder.output_size, cfg.num_classes, rng)

    def _check_frames(self, n: int) -> None:
        if self.cfg.strict_frames and n != self.cfg.n_frames:
            raise ShapeError(f"expected {self.cfg.n_frames} frames per clip, got {n}")

    def __call__(self, x) -> Tensor:
        x = _input_tensor(x)
        if self.backbone is not None:
            unbatched = x.ndim == 4
            if unbatched:
                x = x.reshape((1,) + x.shape)
            if x.ndim != 5:
                raise ShapeError(f"toy_convnext expects [B, T, 3, S, S] frames, got {list(x.shape)}")
            B, n = x.shape[:2]
            self._check_frames(n)
            feats = self.backbone(x.reshape((B * n,) + x.shape[2:])).reshape(B, n, -1)
        else:
            unbatched = x.ndim == 2
            if unbatched:
                x = x.reshape((1,) + x.shape)
            if x.ndim != 3 or x.shape[-1] != self.cfg.feature_dim:
                raise ShapeError(f"expected features [B, T, {self.cfg.feature_dim}], got {list(x.shape)}")
            self._check_frames(x.shape[1])
            feats = x
        logits = self.head(self.encoder(feats))
        return logits.reshape(logits.shape[1:]) if unbatched else logits


def hybrid_forward(model: HybridNet, clip_frames) -> Tensor:
    return model(clip_frames)


# ---------------------------------------------------------------- construction, checkpoints


def build_model(cfg: ModelConfig, graph: FacialGraph | None = None, seed: int = 0):
    rng = np.random.default_rng(seed)
    if cfg.kind == "hybrid":
        return HybridNet(cfg, rng)
    return StgcnNet(cfg, graph if graph is not None else build_facial_adjacency(), rng)


def save_checkpoint(model, path) -> None:
    """Directory with ``manifest.txt`` (config) and one tensor dump per parameter."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    flat = model.cfg.to_flat()
    names = [n for n, _ in model.named_parameters()]
    lines = ["# painlarks checkpoint"] + [f"{k}={v}" for k, v in flat.items()]
    lines.append("params=" + ",".join(names))
    (path / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name, p in model.named_parameters():
        with open(path / "params" / f"{name}.txt", "w", encoding="utf-8") as fh:
            T.dump_tensor(p, fh)
    if isinstance(model, StgcnNet):
        write_edge_list(model.graph.edges, path / "edges.txt")


def load_checkpoint(path):
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    flat = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, _, v = line.partition("=")
            flat[k.strip()] = v.strip()
    names = flat.pop("params", "").split(",")
    cfg = ModelConfig.from_flat(flat)
    graph = None
    if cfg.kind != "hybrid":
        edges_file = path / "edges.txt"
        graph = (FacialGraph.from_edges(cfg.num_nodes, read_edge_list(edges_file))
                 if edges_file.exists() else build_facial_adjacency())
    model = build_model(cfg, graph)
    state = {}
    for name in names:
        with open(path / "params" / f"{name}.txt", encoding="utf-8") as fh:
            state[name] = T.load_tensor(fh).data
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------- parameter accounting


def stgcn_block_param_count(b: StgcnBlockConfig) -> int:
    """``2*ci*co + (k+10)*co^2 + 9*co``, plus ``co^2 + co`` with the gate."""
    ci, co, k = b.c_in, b.c_out, b.temporal_kernel
    return 2 * ci * co + (k + 10) * co * co + 9 * co + (co * co + co if b.use_gate else 0)


def convnext_block_param_count(channels: int, expansion: int = 4) -> int:
    """``2*e*C^2 + (53+e)*C``."""
    C, e = channels, expansion
    return 2 * e * C * C + (53 + e) * C


def convnext_backbone_param_count(cfg: ConvNextConfig) -> int:
    ch = cfg.stage_channels
    total = 49 * ch[0]  # 4x4 stem over 3 channels, plus bias
    for s in range(4):
        if s > 0:
            total += 4 * ch[s - 1] * ch[s] + ch[s]
        total += cfg.stage_blocks[s] * convnext_block_param_count(ch[s], cfg.expansion)
    return total


def sequence_encoder_param_count(variant: str, input_size: int, hidden: int) -> int:
    D, H = input_size, hidden
    layer = 4 * (H * D + H * H + H)
    if variant == "plain":
        return layer
    if variant == "bi":
        return 2 * layer
    if variant == "stacked":
        return stacked_lstm_param_count(D, H)
    return layer + H * H + H  # attention with attention size H


def model_param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count of ``build_model(cfg)``."""
    C = cfg.num_classes
    if cfg.kind == "hybrid":
        if cfg.backbone == "toy_convnext":
            dim, total = cfg.convnext.stage_channels[-1], convnext_backbone_param_count(cfg.convnext)
        else:
            dim, total = cfg.feature_dim, 0
        width = 2 * cfg.lstm_hidden if cfg.lstm_variant == "bi" else cfg.lstm_hidden
        return total + sequence_encoder_param_count(cfg.lstm_variant, dim, cfg.lstm_hidden) + width * C + C
    total = sum(stgcn_block_param_count(b) for b in cfg.blocks)
    width = cfg.blocks[-1].c_out
    if cfg.kind == "stgcn_lstm":
        total += stacked_lstm_param_count(width, cfg.lstm_hidden)
        width = cfg.lstm_hidden
    return total + width * C + C


def model_config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
