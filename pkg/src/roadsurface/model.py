"""Four-stage hybrid convolution-attention classifier.

The network is a stem (two stride-2 3x3 convolutions) followed by four
stages connected by stride-2 patch-embedding convolutions, so stage i runs
on a grid of R/4, R/8, R/16, R/32 for input resolution R.  Each stage holds
an ordered list of residual blocks of two kinds:

* conv block:  y = x + pw2(gelu(pw1(norm(dw3x3(x))))) on B x C x H x W,
  where norm is a channel-axis layer norm and pw1/pw2 are 1x1 convolutions
  expanding by ``mlp_ratio`` and contracting back.
* trans block: pre-norm residual pair on B x T x C tokens —
  x += MHA(norm(x)); x += MLP(norm(x)) with per-head scaled dot-product
  attention (head width ``head_dim``) and a gelu MLP.

The classifier head global-average-pools the stage-4 tokens, projects to
``output_channel``, then maps linearly to class logits.

Stage layouts come from a small stacking DSL (see :func:`parse_stack_spec`)
with presets T/S/B/L plus a desk-scale "micro" layout for tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DimensionError, StackSpecError
from .tensor import (
    Tensor,
    conv2d,
    depthwise_conv2d,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    tensor_mean,
    transpose,
)

DEFAULT_CHANNELS = (96, 192, 384, 768)

# published reference sizes for the presets, used by the build report
PARAM_TARGETS = {
    "T": 27_000_000,
    "S": 44_000_000,
    "B": 80_000_000,
    "L": 206_000_000,
}
PARAM_TOLERANCE = 0.20

_PRESET_SPECS = {
    "T": "L[c3] M[c3 t1] M[(c3 t2)x1] G[t2]",
    "S": "L[c3] M[c3 t1] M[(c3 t2)x2] G[t3]",
    "B": "L[c3] M[c3 t1] M[(c3 t2)x3] G[t3]",
    "L": "L[c3] M[c3 t1] M[(c3 t2)x4] G[t3]",
    "micro": "L[c1] M[c1 t1] M[c1 t1] G[t1]",
}
_PRESET_OUTPUT_CHANNEL = {"T": 768, "S": 768, "B": 1024, "L": 1536,
                          "micro": 256}
_PRESET_CHANNELS = {"micro": (16, 32, 64, 128)}

# the canonical four-position layout; a bare letter matching its canonical
# position takes that position's block list, any other bare letter falls
# back to the per-letter default
_CANONICAL_LETTERS = "LMMG"
_POSITION_DEFAULT_BODY = ("c3", "c3 t1", "(c3 t2)x3", "t3")
_LETTER_DEFAULT_BODY = {"L": "c3", "M": "c3 t1", "G": "t3"}


@dataclass(frozen=True)
class StageSpec:
    """One stage: kind letter, flat ordered block list, channel width."""

    kind: str
    blocks: tuple[str, ...]
    channels: int

    def block_summary(self) -> str:
        """Run-length description like 'conv x3 + trans x2'."""
        runs = []
        for b in self.blocks:
            name = "conv" if b == "c" else "trans"
            if runs and runs[-1][0] == name:
                runs[-1][1] += 1
            else:
                runs.append([name, 1])
        return " + ".join(f"{name} x{count}" for name, count in runs)


@dataclass(frozen=True)
class StackSpec:
    """Validated four-stage layout."""

    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        if len(self.stages) != 4:
            raise StackSpecError(
                f"expected exactly 4 stages, got {len(self.stages)}"
            )
        for idx, stage in enumerate(self.stages):
            if stage.kind not in "LMG":
                raise StackSpecError(
                    f"stage {idx + 1} has unknown kind {stage.kind!r}"
                )
            if not stage.blocks:
                raise StackSpecError(f"stage {idx + 1} has no blocks")
            if stage.kind == "L" and "t" in stage.blocks:
                raise StackSpecError(
                    f"stage {idx + 1} is L (conv-only) but contains a "
                    "trans block"
                )
            if stage.kind == "G" and "c" in stage.blocks:
                raise StackSpecError(
                    f"stage {idx + 1} is G (trans-only) but contains a "
                    "conv block"
                )
            if stage.channels < 1:
                raise StackSpecError(
                    f"stage {idx + 1} channel width must be positive"
                )
        widths = [s.channels for s in self.stages]
        if any(a > b for a, b in zip(widths, widths[1:])):
            raise StackSpecError(
                f"channel widths must be non-decreasing, got {widths}"
            )

    @property
    def letters(self) -> str:
        return "".join(s.kind for s in self.stages)

    def with_channels(self, channels) -> "StackSpec":
        channels = tuple(int(c) for c in channels)
        if len(channels) != 4:
            raise StackSpecError("channel override needs exactly 4 widths")
        return StackSpec(tuple(
            replace(stage, channels=c)
            for stage, c in zip(self.stages, channels)
        ))

    def describe(self) -> str:
        return " | ".join(
            f"stage{idx + 1} {s.kind}: {s.block_summary()}"
            for idx, s in enumerate(self.stages)
        )


def _parse_body(text: str, start: int) -> tuple[tuple[str, ...], int]:
    """Parse '[...]' starting at the opening bracket; return blocks, end."""
    blocks: list[str] = []
    i = start + 1
    while True:
        while i < len(text) and text[i].isspace():
            i += 1
        if i >= len(text):
            raise StackSpecError("unclosed '['", position=start)
        ch = text[i]
        if ch == "]":
            return tuple(blocks), i + 1
        if ch == "(":
            group, i = _parse_items(text, i + 1, stop=")")
            if i >= len(text) or text[i] != ")":
                raise StackSpecError("unclosed '('", position=i)
            i += 1
            if i >= len(text) or text[i] != "x":
                raise StackSpecError(
                    "group must be followed by 'x<count>'", position=i
                )
            count, i = _parse_count(text, i + 1)
            blocks.extend(group * count)
        elif ch in "ct":
            items, i = _parse_items(text, i, stop="]")
            blocks.extend(items)
        else:
            raise StackSpecError(
                f"unexpected character {ch!r} in block list", position=i
            )


def _parse_items(text: str, start: int, stop: str) -> tuple[list[str], int]:
    items: list[str] = []
    i = start
    while i < len(text):
        while i < len(text) and text[i].isspace():
            i += 1
        if i >= len(text) or text[i] in (stop, "]", ")", "("):
            break
        ch = text[i]
        if ch not in "ct":
            raise StackSpecError(
                f"expected block letter 'c' or 't', got {ch!r}", position=i
            )
        count, i = _parse_count(text, i + 1)
        items.extend([ch] * count)
    return items, i


def _parse_count(text: str, start: int) -> tuple[int, int]:
    i = start
    while i < len(text) and text[i].isdigit():
        i += 1
    if i == start:
        raise StackSpecError("expected a count", position=start)
    value = int(text[start:i])
    if value < 1:
        raise StackSpecError("count must be positive", position=start)
    return value, i


def parse_stack_spec(text: str, channels=DEFAULT_CHANNELS) -> StackSpec:
    """Parse a four-stage layout string.

    Grammar (whitespace between stages optional):

        spec   := stage stage stage stage
        stage  := ("L" | "M" | "G") [ "[" body "]" ]
        body   := ( item | group )+
        group  := "(" item+ ")x" count
        item   := ("c" | "t") count

    'c' is a conv block, 't' a trans block.  A bare letter takes the
    canonical block list for its position when it matches the canonical
    L,M,M,G layout there, otherwise the letter's own default (L: c3,
    M: c3 t1, G: t3).  L stages must be conv-only and G stages trans-only;
    any four-letter combination is otherwise accepted.
    """
    parsed: list[tuple[str, tuple[str, ...] | None, int]] = []
    i = 0
    while i < len(text):
        if text[i].isspace():
            i += 1
            continue
        letter = text[i]
        if letter not in "LMG":
            raise StackSpecError(
                f"expected stage letter L, M, or G, got {letter!r}",
                position=i,
            )
        if len(parsed) == 4:
            raise StackSpecError("more than 4 stages", position=i)
        pos = i
        i += 1
        body = None
        if i < len(text) and text[i] == "[":
            body, i = _parse_body(text, i)
        parsed.append((letter, body, pos))
    if len(parsed) != 4:
        raise StackSpecError(f"expected exactly 4 stages, got {len(parsed)}")

    stages = []
    for idx, (letter, body, pos) in enumerate(parsed):
        if body is None:
            if letter == _CANONICAL_LETTERS[idx]:
                default = _POSITION_DEFAULT_BODY[idx]
            else:
                default = _LETTER_DEFAULT_BODY[letter]
            body, _ = _parse_body("[" + default + "]", 0)
        try:
            stages.append(StageSpec(letter, body, int(channels[idx])))
        except StackSpecError:
            raise
    spec = StackSpec(tuple(stages))
    return spec


@dataclass(frozen=True)
class ModelConfig:
    """Full declarative model description."""

    stack: StackSpec
    num_classes: int = 27
    input_resolution: int = 224
    head_dim: int = 32
    mlp_ratio: float = 4.0
    output_channel: int = 768

    def __post_init__(self):
        problems = []
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_resolution < 32 or self.input_resolution % 32 != 0:
            problems.append(
                "input_resolution must be a positive multiple of 32, got "
                f"{self.input_resolution}"
            )
        if self.head_dim < 1:
            problems.append(f"head_dim must be positive, got {self.head_dim}")
        if self.mlp_ratio <= 0:
            problems.append(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.output_channel < 1:
            problems.append(
                f"output_channel must be positive, got {self.output_channel}"
            )
        for idx, stage in enumerate(self.stack.stages):
            hidden = stage.channels * self.mlp_ratio
            if abs(hidden - round(hidden)) > 1e-9:
                problems.append(
                    f"stage {idx + 1}: channels*mlp_ratio must be integral"
                )
            if "t" in stage.blocks and stage.channels % self.head_dim != 0:
                problems.append(
                    f"stage {idx + 1}: channels {stage.channels} not "
                    f"divisible by head_dim {self.head_dim}"
                )
        if problems:
            raise ConfigError(problems)

    @property
    def stage_grids(self) -> tuple[int, ...]:
        r = self.input_resolution
        return (r // 4, r // 8, r // 16, r // 32)

    @property
    def stage_tokens(self) -> tuple[int, ...]:
        return tuple(g * g for g in self.stage_grids)


def preset_names():
    return tuple(_PRESET_SPECS)


def preset(name: str, num_classes: int | None = None,
           input_resolution: int | None = None) -> ModelConfig:
    """Named configuration; 'T','S','B','L' are the published variants,
    'micro' is the desk-scale test layout (16/32/64/128 channels at 32px)."""
    if name not in _PRESET_SPECS:
        raise ConfigError(
            [f"unknown preset {name!r}; choose from {sorted(_PRESET_SPECS)}"]
        )
    channels = _PRESET_CHANNELS.get(name, DEFAULT_CHANNELS)
    if num_classes is None:
        num_classes = 5 if name == "micro" else 27
    if input_resolution is None:
        input_resolution = 32 if name == "micro" else 224
    return ModelConfig(
        stack=parse_stack_spec(_PRESET_SPECS[name], channels=channels),
        num_classes=num_classes,
        input_resolution=input_resolution,
        output_channel=_PRESET_OUTPUT_CHANNEL[name],
    )


# -- parameter initialization -----------------------------------------------


def truncated_normal(rng: np.random.Generator, shape, std=0.02,
                     clip_sigmas=2.0) -> np.ndarray:
    """Normal draw with out-of-band samples redrawn until inside +-clip."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > clip_sigmas * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > clip_sigmas * std
    return out


class _Registry:
    def __init__(self, rng):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def weight(self, name, shape):
        t = Tensor(truncated_normal(self.rng, shape), requires_grad=True)
        self._add(name, t)
        return t

    def zeros(self, name, shape):
        t = Tensor(np.zeros(shape), requires_grad=True)
        self._add(name, t)
        return t

    def ones(self, name, shape):
        t = Tensor(np.ones(shape), requires_grad=True)
        self._add(name, t)
        return t

    def _add(self, name, tensor):
        if name in self.params:
            raise ConfigError([f"duplicate parameter name {name!r}"])
        self.params[name] = tensor


# -- layers -----------------------------------------------------------------


class _ConvLayer:
    def __init__(self, reg, name, cin, cout, k, stride, pad, depthwise=False):
        self.stride = stride
        self.pad = pad
        self.depthwise = depthwise
        wshape = (cout, 1, k, k) if depthwise else (cout, cin, k, k)
        self.w = reg.weight(f"{name}.w", wshape)
        self.b = reg.zeros(f"{name}.b", (cout,))

    def __call__(self, x):
        if self.depthwise:
            return depthwise_conv2d(x, self.w, self.b, stride=self.stride,
                                    pad=self.pad)
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class _LinearLayer:
    def __init__(self, reg, name, cin, cout):
        self.w = reg.weight(f"{name}.w", (cin, cout))
        self.b = reg.zeros(f"{name}.b", (cout,))

    def __call__(self, x):
        return matmul(x, self.w) + self.b


class _NormLayer:
    def __init__(self, reg, name, channels, axis):
        self.axis = axis
        self.gamma = reg.ones(f"{name}.gamma", (channels,))
        self.beta = reg.zeros(f"{name}.beta", (channels,))

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, axis=self.axis)


class ConvBlock:
    """Residual depthwise-conv unit operating on B x C x H x W."""

    def __init__(self, reg, name, channels, mlp_ratio):
        hidden = int(round(channels * mlp_ratio))
        self.dw = _ConvLayer(reg, f"{name}.dw", channels, channels, 3, 1, 1,
                             depthwise=True)
        self.norm = _NormLayer(reg, f"{name}.norm", channels, axis=1)
        self.pw1 = _ConvLayer(reg, f"{name}.pw1", channels, hidden, 1, 1, 0)
        self.pw2 = _ConvLayer(reg, f"{name}.pw2", hidden, channels, 1, 1, 0)

    def __call__(self, x):
        y = self.dw(x)
        y = self.norm(y)
        y = self.pw1(y)
        y = gelu(y)
        y = self.pw2(y)
        return x + y


class TransBlock:
    """Residual attention + MLP unit operating on B x T x C tokens."""

    def __init__(self, reg, name, channels, head_dim, mlp_ratio):
        if channels % head_dim:
            raise ConfigError(
                [f"{name}: channels {channels} not divisible by head_dim "
                 f"{head_dim}"]
            )
        hidden = int(round(channels * mlp_ratio))
        self.channels = channels
        self.heads = channels // head_dim
        self.head_dim = head_dim
        self.scale = 1.0 / math.sqrt(head_dim)
        self.norm1 = _NormLayer(reg, f"{name}.norm1", channels, axis=-1)
        self.q = _LinearLayer(reg, f"{name}.q", channels, channels)
        self.k = _LinearLayer(reg, f"{name}.k", channels, channels)
        self.v = _LinearLayer(reg, f"{name}.v", channels, channels)
        self.proj = _LinearLayer(reg, f"{name}.proj", channels, channels)
        self.norm2 = _NormLayer(reg, f"{name}.norm2", channels, axis=-1)
        self.fc1 = _LinearLayer(reg, f"{name}.fc1", channels, hidden)
        self.fc2 = _LinearLayer(reg, f"{name}.fc2", hidden, channels)

    def _split_heads(self, t, batch, tokens):
        t = reshape(t, (batch, tokens, self.heads, self.head_dim))
        return transpose(t, (0, 2, 1, 3))

    def attention(self, x):
        batch, tokens, _ = x.shape
        q = self._split_heads(self.q(x), batch, tokens)
        k = self._split_heads(self.k(x), batch, tokens)
        v = self._split_heads(self.v(x), batch, tokens)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * self.scale
        attn = softmax(scores, axis=-1)
        ctx = matmul(attn, v)
        ctx = transpose(ctx, (0, 2, 1, 3))
        ctx = reshape(ctx, (batch, tokens, self.channels))
        return self.proj(ctx)

    def __call__(self, x):
        x = x + self.attention(self.norm1(x))
        y = self.norm2(x)
        y = self.fc2(gelu(self.fc1(y)))
        return x + y


# -- the model --------------------------------------------------------------


def _to_tokens(x, batch, channels, height, width):
    t = reshape(x, (batch, channels, height * width))
    return transpose(t, (0, 2, 1))


def _to_grid(x, batch, channels, height, width):
    t = transpose(x, (0, 2, 1))
    return reshape(t, (batch, channels, height, width))


class Model:
    """Parameter store plus the staged forward graph."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        reg = _Registry(np.random.default_rng(seed))
        c1 = config.stack.stages[0].channels
        stem_mid = max(1, c1 // 2)
        self.stem0 = _ConvLayer(reg, "stem.conv0", 3, stem_mid, 3, 2, 1)
        self.stem1 = _ConvLayer(reg, "stem.conv1", stem_mid, c1, 3, 2, 1)

        self.stages = []
        prev_c = c1
        for idx, stage in enumerate(config.stack.stages):
            name = f"stage{idx + 1}"
            embed = None
            if idx > 0:
                embed = _ConvLayer(reg, f"{name}.embed", prev_c,
                                   stage.channels, 3, 2, 1)
            blocks = []
            for bidx, kind in enumerate(stage.blocks):
                bname = f"{name}.block{bidx}"
                if kind == "c":
                    blocks.append(ConvBlock(reg, bname, stage.channels,
                                            config.mlp_ratio))
                else:
                    blocks.append(TransBlock(reg, bname, stage.channels,
                                             config.head_dim,
                                             config.mlp_ratio))
            self.stages.append((embed, blocks, stage.channels))
            prev_c = stage.channels

        self.head_proj = _LinearLayer(reg, "head.proj", prev_c,
                                      config.output_channel)
        self.head_fc = _LinearLayer(reg, "head.fc", config.output_channel,
                                    config.num_classes)
        self.params = reg.params

    def forward(self, images: Tensor):
        """Run the staged graph.

        Returns (logits, stage_features) where stage_features[i] is the
        stage-i output as B x T_i x C_i tokens, tape-connected so auxiliary
        losses backpropagate into the trunk.
        """
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(
                f"expected images shaped (B, 3, R, R), got {images.shape}"
            )
        r = cfg.input_resolution
        if images.shape[2] != r or images.shape[3] != r:
            raise DimensionError(
                f"expected resolution {r}, got "
                f"{images.shape[2]}x{images.shape[3]}"
            )
        batch = images.shape[0]
        x = self.stem1(self.stem0(images))
        height = width = r // 4
        in_grid = True
        features = []
        for idx, (embed, blocks, channels) in enumerate(self.stages):
            if embed is not None:
                if not in_grid:
                    x = _to_grid(x, batch, prev_channels, height, width)
                    in_grid = True
                x = embed(x)
                height //= 2
                width //= 2
            for block in blocks:
                wants_grid = isinstance(block, ConvBlock)
                if wants_grid and not in_grid:
                    x = _to_grid(x, batch, channels, height, width)
                    in_grid = True
                elif not wants_grid and in_grid:
                    x = _to_tokens(x, batch, channels, height, width)
                    in_grid = False
                x = block(x)
            if in_grid:
                z = _to_tokens(x, batch, channels, height, width)
            else:
                z = x
            features.append(z)
            prev_channels = channels
        pooled = tensor_mean(features[-1], axis=1)
        logits = self.head_fc(self.head_proj(pooled))
        return logits, features

    def count_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def stage_breakdown(self) -> dict[str, int]:
        """Scalar parameter count per top-level group."""
        groups = {"stem": 0, "stage1": 0, "stage2": 0, "stage3": 0,
                  "stage4": 0, "head": 0}
        for name, p in self.params.items():
            groups[name.split(".", 1)[0]] += p.data.size
        return groups

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed=seed)


def count_params(model: Model) -> int:
    return model.count_params()
