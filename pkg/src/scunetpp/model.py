"""SCUNet++ assembly: Swin encoder, CNN bottleneck, dense skip grid, Swin decoder."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as tio
from . import tensor as T
from .bottleneck import CNNBottleneck
from .nn import Linear, Module
from .skip import DEPTH, FuseNode, build_grid, canonical_shape, node_inputs, node_schedule
from .swin import ConfigurationError, DoubleSwinBlock, FinalExpand4, PatchEmbed, PatchMerging
from .tensor import DimensionError, Tensor

VARIANTS = ("full", "no_dense_skip", "no_cnn_bottleneck")


@dataclass
class ModelConfig:
    img_size: int = 224
    patch_size: int = 4
    in_channels: int = 3
    base_dim: int = 96
    window: int = 7
    heads: tuple[int, ...] = (3, 6, 12, 24)
    mlp_ratio: int = 4
    num_classes: int = 2
    dense_skips: bool = True
    cnn_bottleneck: bool = True
    bottleneck_units: int = 2
    bottleneck_reduction: int = 4
    bottleneck_residual: bool = True
    rel_pos_bias: bool = True
    deep_supervision: bool = False
    seed: int = 0

    def __post_init__(self):
        self.heads = tuple(int(h) for h in self.heads)

    def resolution(self, level: int) -> int:
        return self.img_size // 2 ** (level + 2)

    def dim(self, level: int) -> int:
        return self.base_dim * 2**level

    def validate(self) -> "ModelConfig":
        errors = []
        if self.patch_size != 4:
            errors.append(f"patch_size must be 4, got {self.patch_size}")
        if self.img_size <= 0 or self.img_size % 32:
            errors.append(f"img_size {self.img_size} is not divisible by 32")
        if len(self.heads) != DEPTH + 1:
            errors.append(f"heads needs {DEPTH + 1} entries, got {len(self.heads)}")
        if self.window < 1:
            errors.append("window must be >= 1")
        if self.num_classes < 1:
            errors.append("num_classes must be >= 1")
        if not errors:
            swin_levels = range(DEPTH + 1) if not self.cnn_bottleneck else range(DEPTH)
            for k in swin_levels:
                res = self.resolution(k)
                eff = min(self.window, res)
                if res % eff:
                    errors.append(f"level {k} resolution {res} is not divisible by window {self.window}")
                if self.dim(k) % self.heads[k]:
                    errors.append(f"level {k} dim {self.dim(k)} is not divisible by {self.heads[k]} heads")
            if self.cnn_bottleneck and self.dim(DEPTH) // self.bottleneck_reduction < 1:
                errors.append("bottleneck reduction leaves no channels")
        if errors:
            raise ConfigurationError("; ".join(errors))
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def ablate(cfg: ModelConfig, variant: str) -> ModelConfig:
    """Config for one of the ablation variants."""
    if variant == "full":
        return dataclasses.replace(cfg)
    if variant == "no_dense_skip":
        return dataclasses.replace(cfg, dense_skips=False)
    if variant == "no_cnn_bottleneck":
        return dataclasses.replace(cfg, cnn_bottleneck=False)
    raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")


class Model(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c, w = cfg.base_dim, cfg.window

        def swin(level: int) -> DoubleSwinBlock:
            return DoubleSwinBlock(cfg.dim(level), cfg.heads[level], w, rng, cfg.mlp_ratio,
                                   cfg.rel_pos_bias, cfg.resolution(level))

        self.embed = PatchEmbed(c, rng, cfg.in_channels, cfg.patch_size)
        self.encoder = [swin(k) for k in range(DEPTH)]
        self.merge = [PatchMerging(cfg.dim(k), rng) for k in range(DEPTH)]
        if cfg.cnn_bottleneck:
            self.bottleneck = CNNBottleneck(cfg.dim(DEPTH), rng, cfg.bottleneck_units,
                                            cfg.bottleneck_reduction, cfg.bottleneck_residual)
        else:
            self.bottleneck = swin(DEPTH)
        self.fuse = {
            f"{i}_{j}": FuseNode(cfg.dim(i), len(node_inputs(i, j, cfg.dense_skips)[0]), rng)
            for i, j in node_schedule(cfg.dense_skips)
        }
        self.decoder = [swin(k) for k in range(DEPTH)]
        self.final = FinalExpand4(c, rng)
        self.head = Linear(c, cfg.num_classes, rng)
        if cfg.deep_supervision and cfg.dense_skips:
            self.aux_heads = [Linear(c, cfg.num_classes, rng) for _ in range(DEPTH - 1)]
        else:
            self.aux_heads = []
        self.stage_shapes: list[tuple[str, tuple]] = []

    def _record(self, name: str, x: Tensor) -> Tensor:
        self.stage_shapes.append((name, tuple(x.shape)))
        return x

    def forward(self, image: Tensor, mode: str = "eval"):
        """Per-pixel class logits (B, num_classes, H, W).

        With deep supervision on, returns ``(logits, [aux_logits, ...])``.
        Eval mode runs one sample at a time so each output row is bitwise
        independent of the rest of the batch (BLAS blocking depends on the
        GEMM size).
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.cfg
        image = image if isinstance(image, Tensor) else Tensor(image)
        expected = (cfg.in_channels, cfg.img_size, cfg.img_size)
        if image.ndim != 4 or tuple(image.shape[1:]) != expected:
            raise DimensionError(f"expected input (B, {expected[0]}, {expected[1]}, {expected[2]}), got {image.shape}")
        self.train(mode == "train")
        if mode == "eval" and image.shape[0] > 1:
            outs = [self._forward(image[b : b + 1]) for b in range(image.shape[0])]
            shapes = self.stage_shapes
            self.stage_shapes = [(name, (image.shape[0], *shape[1:])) for name, shape in shapes]
            if not self.aux_heads:
                return T.concat(outs, 0)
            return (T.concat([o[0] for o in outs], 0),
                    [T.concat([o[1][j] for o in outs], 0) for j in range(len(self.aux_heads))])
        return self._forward(image)

    def _forward(self, image: Tensor):
        cfg = self.cfg
        self.stage_shapes = []

        x = self._record("embed", self.embed(image))
        feats = []
        for k in range(DEPTH):
            x = self._record(f"encoder{k}", self.encoder[k](x))
            feats.append(x)
            x = self._record(f"merge{k}", self.merge[k](x))
        if cfg.cnn_bottleneck:
            x = self.bottleneck(x.transpose(0, 3, 1, 2)).transpose(0, 2, 3, 1)
        else:
            x = self.bottleneck(x)
        x = self._record("bottleneck", x)

        fuse = {(int(k[0]), int(k[2])): v for k, v in self.fuse.items()}
        decoder = {i: self._decoder_stage(i) for i in range(DEPTH)}
        grid = build_grid(feats, x, fuse, cfg.img_size, cfg.base_dim, cfg.dense_skips, decoder)
        self.grid = grid

        y = self._record("final_expand", self.final(grid.output(0)))
        logits = self._record("logits", self.head(y).transpose(0, 3, 1, 2))
        if not self.aux_heads:
            return logits
        aux = [self._upsample_head(head, grid[(0, j + 1)]) for j, head in enumerate(self.aux_heads)]
        return logits, aux

    def _decoder_stage(self, level: int):
        def run(x: Tensor) -> Tensor:
            return self._record(f"decoder{level}", self.decoder[level](x))
        return run

    def _upsample_head(self, head: Linear, x: Tensor) -> Tensor:
        b, h, w, _ = x.shape
        k = self.cfg.num_classes
        y = head(x).reshape(b, h, 1, w, 1, k)
        y = T.broadcast_to(y, (b, h, 4, w, 4, k)).reshape(b, 4 * h, 4 * w, k)
        return y.transpose(0, 3, 1, 2)


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def param_count(model: Model) -> int:
    return model.num_parameters()


def expected_stage_shapes(cfg: ModelConfig, batch: int = 1) -> list[tuple[str, tuple]]:
    """Closed-form (B, H/2^(i+2), W/2^(i+2), C*2^i) ledger in forward order."""
    def level(i):
        return (batch, *canonical_shape(i, cfg.img_size, cfg.base_dim))

    rows = [("embed", level(0))]
    for k in range(DEPTH):
        rows += [(f"encoder{k}", level(k)), (f"merge{k}", level(k + 1))]
    rows.append(("bottleneck", level(DEPTH)))
    for i, j in node_schedule(cfg.dense_skips):
        if j == (DEPTH - i if cfg.dense_skips else 1):
            rows.append((f"decoder{i}", level(i)))
    rows.append(("final_expand", (batch, cfg.img_size, cfg.img_size, cfg.base_dim)))
    rows.append(("logits", (batch, cfg.num_classes, cfg.img_size, cfg.img_size)))
    return rows


def save_checkpoint(model: Model, path, dtype=np.float64) -> None:
    """Write parameters and buffers as CKP1 plus a JSON config sidecar."""
    path = Path(path)
    state = {k: v.astype(dtype) for k, v in model.state_dict().items()}
    tio.save_ckp(path, state)
    path.with_suffix(".json").write_text(json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Model:
    path = Path(path)
    cfg = ModelConfig.from_dict(json.loads(path.with_suffix(".json").read_text()))
    model = Model(cfg)
    state = tio.load_ckp(path)
    model.load_state_dict({k: v.astype(np.float64) for k, v in state.items()})
    return model
