"""ConvMixFormer encoder, classification head, and parameter/MAC accounting.

One stage computes ``LayerNorm(x + FFN(Mixer(x)))``:

* the mixer views the [B, T, D] token matrix as a 2-D map (one channel by
  default), applies a same-padded convolution and batch norm, then adds a
  learned class-token embedding to every token;
* the FFN is either a gated depthwise network (two pointwise+depthwise
  branches, GELU on one, multiplied together, then projected back to D) or a
  plain two-layer GELU MLP for the ungated baseline.

Enumeration order of learnable arrays is: stages in index order, each stage
in ``StageParams`` field order, then the classifier weight and bias.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, UsageError
from .ops import BatchNormState
from .tensor import Tensor, as_tensor


class FFNVariant(str, Enum):
    FFN_BL1 = "FFN_BL1"
    GDFN_BL2 = "GDFN_BL2"
    GDFN_LESS_BL3 = "GDFN_LESS_BL3"


GATED = (FFNVariant.GDFN_BL2, FFNVariant.GDFN_LESS_BL3)


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 25
    num_stages: int = 6
    feature_dim: int = 512
    seq_len: int = 40
    mixer_kernel: tuple = (3, 3)
    mixer_channels: int = 1
    ffn_variant: FFNVariant = FFNVariant.GDFN_LESS_BL3
    ffn_hidden: Optional[int] = None  # None -> feature_dim
    class_token: str = "additive"
    dwconv_kernel: int = 3
    bn_eps: float = 1e-5
    ln_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "mixer_kernel", tuple(int(k) for k in self.mixer_kernel))
        try:
            object.__setattr__(self, "ffn_variant", FFNVariant(self.ffn_variant))
        except ValueError:
            raise ConfigError(f"unknown ffn_variant {self.ffn_variant!r}") from None
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", self.feature_dim)
        self.validate()

    def validate(self) -> None:
        if self.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")
        if self.feature_dim < 1 or self.seq_len < 1:
            raise ConfigError("feature_dim and seq_len must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.mixer_kernel) != 2 or any(k < 1 or k % 2 == 0 for k in self.mixer_kernel):
            raise ConfigError(f"mixer_kernel must be a pair of odd ints, got {self.mixer_kernel}")
        if self.dwconv_kernel < 1 or self.dwconv_kernel % 2 == 0:
            raise ConfigError(f"dwconv_kernel must be odd, got {self.dwconv_kernel}")
        if self.mixer_channels < 1 or self.feature_dim % self.mixer_channels:
            raise ConfigError("mixer_channels must divide feature_dim")
        if self.ffn_hidden < 1:
            raise ConfigError("ffn_hidden must be >= 1")
        if self.class_token not in ("additive", "none"):
            raise ConfigError(f"class_token must be 'additive' or 'none', got {self.class_token!r}")
        if not (self.bn_eps > 0 and self.ln_eps > 0 and 0 < self.bn_momentum <= 1):
            raise ConfigError("eps values must be positive and bn_momentum in (0, 1]")

    @property
    def branch_width(self) -> int:
        """Channel width of each gated branch (BL2 doubles the hidden width)."""
        if self.ffn_variant is FFNVariant.GDFN_BL2:
            return 2 * self.ffn_hidden
        return self.ffn_hidden

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ffn_variant"] = self.ffn_variant.value
        d["mixer_kernel"] = list(self.mixer_kernel)
        return d


def ablation_configs(base: ModelConfig) -> dict[str, ModelConfig]:
    """BL1 (plain FFN, 4*D hidden), BL2 (gated, doubled width), BL3 (gated)."""
    d = base.feature_dim
    return {
        "BL1": base.replace(ffn_variant=FFNVariant.FFN_BL1, ffn_hidden=4 * d),
        "BL2": base.replace(ffn_variant=FFNVariant.GDFN_BL2, ffn_hidden=d),
        "BL3": base.replace(ffn_variant=FFNVariant.GDFN_LESS_BL3, ffn_hidden=d),
    }


@dataclass
class StageParams:
    mixer_w: Tensor
    mixer_b: Tensor
    mixer_bn_gamma: Tensor
    mixer_bn_beta: Tensor
    class_token: Optional[Tensor] = None
    # gated variants
    pw1_w: Optional[Tensor] = None
    pw1_b: Optional[Tensor] = None
    dw1_w: Optional[Tensor] = None
    dw1_b: Optional[Tensor] = None
    pw2_w: Optional[Tensor] = None
    pw2_b: Optional[Tensor] = None
    dw2_w: Optional[Tensor] = None
    dw2_b: Optional[Tensor] = None
    proj_w: Optional[Tensor] = None
    proj_b: Optional[Tensor] = None
    # plain FFN variant
    fc1_w: Optional[Tensor] = None
    fc1_b: Optional[Tensor] = None
    fc2_w: Optional[Tensor] = None
    fc2_b: Optional[Tensor] = None
    norm_gamma: Optional[Tensor] = None
    norm_beta: Optional[Tensor] = None
    bn_state: BatchNormState = field(default_factory=BatchNormState)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                yield f.name, value


@dataclass
class ModelParams:
    stages: list
    head_w: Tensor
    head_b: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, stage in enumerate(self.stages):
            out.extend((f"stage{i}.{name}", t) for name, t in stage.named_tensors())
        out.append(("head_w", self.head_w))
        out.append(("head_b", self.head_b))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, stage in enumerate(self.stages):
            st = stage.bn_state
            if st.ready:
                out.append((f"stage{i}.bn_running_mean", st.mean))
                out.append((f"stage{i}.bn_running_var", st.var))
        return out

    def num_params(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def clone(self) -> "ModelParams":
        def dup(stage: StageParams) -> StageParams:
            kw = {}
            for f in dataclasses.fields(stage):
                v = getattr(stage, f.name)
                if isinstance(v, Tensor):
                    kw[f.name] = Tensor(v.data, requires_grad=v.requires_grad)
                elif isinstance(v, BatchNormState):
                    kw[f.name] = v.copy()
                else:
                    kw[f.name] = v
            return StageParams(**kw)

        return ModelParams(
            [dup(s) for s in self.stages],
            Tensor(self.head_w.data, requires_grad=self.head_w.requires_grad),
            Tensor(self.head_b.data, requires_grad=self.head_b.requires_grad),
        )


# --- initialization ---------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def init_stage(config: ModelConfig, rng: np.random.Generator) -> StageParams:
    d, c = config.feature_dim, config.mixer_channels
    kh, kw = config.mixer_kernel
    m = config.dwconv_kernel
    mixer_fan = c * kh * kw
    p = StageParams(
        mixer_w=_uniform(rng, (c, c, kh, kw), mixer_fan),
        mixer_b=_uniform(rng, (c,), mixer_fan),
        mixer_bn_gamma=_param(np.ones(c)),
        mixer_bn_beta=_param(np.zeros(c)),
        bn_state=BatchNormState.initialized(c, config.bn_momentum),
    )
    if config.class_token == "additive":
        p.class_token = _param(np.zeros(d))
    if config.ffn_variant in GATED:
        w = config.branch_width
        p.pw1_w = _uniform(rng, (w, d, 1, 1), d)
        p.pw1_b = _uniform(rng, (w,), d)
        p.dw1_w = _uniform(rng, (w, 1, m, 1), m)
        p.dw1_b = _uniform(rng, (w,), m)
        p.pw2_w = _uniform(rng, (w, d, 1, 1), d)
        p.pw2_b = _uniform(rng, (w,), d)
        p.dw2_w = _uniform(rng, (w, 1, m, 1), m)
        p.dw2_b = _uniform(rng, (w,), m)
        p.proj_w = _uniform(rng, (d, w, 1, 1), w)
        p.proj_b = _uniform(rng, (d,), w)
    else:
        h = config.ffn_hidden
        p.fc1_w = _uniform(rng, (h, d), d)
        p.fc1_b = _uniform(rng, (h,), d)
        p.fc2_w = _uniform(rng, (d, h), h)
        p.fc2_b = _uniform(rng, (d,), h)
    p.norm_gamma = _param(np.ones(d))
    p.norm_beta = _param(np.zeros(d))
    return p


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded initialization.

    Stage convolutions and affine maps draw weights and biases from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norms start at the identity and the
    class token at zero.  The classifier head starts at zero so the initial
    prediction is exactly uniform.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    stages = [init_stage(config, rng) for _ in range(config.num_stages)]
    d, n = config.feature_dim, config.num_classes
    return ModelParams(stages, _param(np.zeros((n, d))), _param(np.zeros(n)))


# --- forward ------------------------------------------------------------------------

def _check_tokens(x: Tensor, config: ModelConfig) -> None:
    if x.data.ndim != 3 or x.shape[1:] != (config.seq_len, config.feature_dim):
        raise DimensionError(
            f"expected [B, {config.seq_len}, {config.feature_dim}] tokens, got {x.shape}"
        )


def conv_token_mixer(x, stage: StageParams, config: ModelConfig, mode: str = "train") -> Tensor:
    x = as_tensor(x)
    _check_tokens(x, config)
    b, t, d = x.shape
    c = config.mixer_channels
    if c == 1:
        grid = ops.reshape(x, (b, 1, t, d))
    else:
        grid = ops.transpose(ops.reshape(x, (b, t, c, d // c)), (0, 2, 1, 3))
    y = ops.conv2d(grid, stage.mixer_w, stage.mixer_b, padding="same")
    y = ops.batchnorm(y, stage.mixer_bn_gamma, stage.mixer_bn_beta, stage.bn_state, mode, config.bn_eps)
    if c == 1:
        y = ops.reshape(y, (b, t, d))
    else:
        y = ops.reshape(ops.transpose(y, (0, 2, 1, 3)), (b, t, d))
    if config.class_token == "additive":
        if stage.class_token is None:
            raise ConfigError("class_token enabled but stage has no embedding")
        y = ops.add(y, stage.class_token)
    return y


def _tokens_to_channels(p: Tensor) -> Tensor:
    b, t, d = p.shape
    return ops.reshape(ops.transpose(p, (0, 2, 1)), (b, d, t, 1))


def _channels_to_tokens(y: Tensor) -> Tensor:
    b, d, t, _ = y.shape
    return ops.transpose(ops.reshape(y, (b, d, t)), (0, 2, 1))


def gdfn_forward(p, stage: StageParams, config: ModelConfig) -> Tensor:
    """Gated depthwise FFN on a [B, width, T, 1] layout; depthwise convs run along T."""
    if config.ffn_variant not in GATED:
        raise UsageError("gdfn_forward called for the plain FFN variant; use ffn_forward")
    p = as_tensor(p)
    grid = _tokens_to_channels(p)
    w = config.branch_width
    pad = (config.dwconv_kernel // 2, 0)
    a = ops.conv2d(grid, stage.pw1_w, stage.pw1_b)
    a = ops.gelu(ops.conv2d(a, stage.dw1_w, stage.dw1_b, padding=pad, groups=w))
    g = ops.conv2d(grid, stage.pw2_w, stage.pw2_b)
    g = ops.conv2d(g, stage.dw2_w, stage.dw2_b, padding=pad, groups=w)
    out = ops.conv2d(ops.mul(a, g), stage.proj_w, stage.proj_b)
    return _channels_to_tokens(out)


def ffn_forward(p, stage: StageParams, config: ModelConfig) -> Tensor:
    if config.ffn_variant is not FFNVariant.FFN_BL1:
        raise UsageError("ffn_forward is only for the FFN_BL1 variant")
    h = ops.gelu(ops.affine(p, stage.fc1_w, stage.fc1_b))
    return ops.affine(h, stage.fc2_w, stage.fc2_b)


def feed_forward(p, stage: StageParams, config: ModelConfig) -> Tensor:
    if config.ffn_variant in GATED:
        return gdfn_forward(p, stage, config)
    return ffn_forward(p, stage, config)


def stage_forward(x, stage: StageParams, config: ModelConfig, mode: str = "train") -> Tensor:
    x = as_tensor(x)
    mixed = conv_token_mixer(x, stage, config, mode)
    y = ops.add(x, feed_forward(mixed, stage, config))
    return ops.layernorm(y, stage.norm_gamma, stage.norm_beta, config.ln_eps)


def encoder_forward(x, params: ModelParams, config: ModelConfig, mode: str = "train") -> Tensor:
    if len(params.stages) != config.num_stages:
        raise ConfigError(f"config has {config.num_stages} stages, params have {len(params.stages)}")
    x = as_tensor(x)
    for stage in params.stages:
        x = stage_forward(x, stage, config, mode)
    return x


def classify_logits(x, params: ModelParams, config: ModelConfig, mode: str = "train") -> Tensor:
    pooled = ops.mean_axis(encoder_forward(x, params, config, mode), axis=1)
    return ops.affine(pooled, params.head_w, params.head_b)


def classify_sequence(x, params: ModelParams, config: ModelConfig, mode: str = "eval") -> Tensor:
    """Class probabilities [B, n]: mean over frames, linear head, softmax."""
    return ops.softmax(classify_logits(x, params, config, mode))


# --- accounting ---------------------------------------------------------------------

def stage_param_breakdown(config: ModelConfig) -> dict[str, int]:
    d, c = config.feature_dim, config.mixer_channels
    kh, kw = config.mixer_kernel
    m = config.dwconv_kernel
    out = {
        "mixer": c * c * kh * kw + c,
        "mixer_bn": 2 * c,
        "class_token": d if config.class_token == "additive" else 0,
    }
    if config.ffn_variant in GATED:
        w = config.branch_width
        out["ffn_pointwise"] = 2 * (w * d + w)
        out["ffn_depthwise"] = 2 * (w * m + w)
        out["ffn_proj"] = d * w + d
    else:
        h = config.ffn_hidden
        out["ffn_fc1"] = h * d + h
        out["ffn_fc2"] = d * h + d
    out["norm"] = 2 * d
    return out


def count_params(config: ModelConfig, num_stages: Optional[int] = None) -> dict:
    """Closed-form learnable-parameter counts (running BN statistics excluded).

    ``num_stages`` overrides the config's stage count, e.g. 0 for the head alone.
    """
    stages = config.num_stages if num_stages is None else num_stages
    per_stage = stage_param_breakdown(config)
    stage_total = sum(per_stage.values())
    ffn = sum(v for k, v in per_stage.items() if k.startswith("ffn_"))
    classifier = config.num_classes * config.feature_dim + config.num_classes
    return {
        "per_stage": per_stage,
        "stage_mixer": per_stage["mixer"] + per_stage["mixer_bn"] + per_stage["class_token"],
        "stage_ffn": ffn,
        "stage_norm": per_stage["norm"],
        "stage_total": stage_total,
        "num_stages": stages,
        "classifier": classifier,
        "total": stages * stage_total + classifier,
    }


def count_params_vanilla(config: ModelConfig) -> dict:
    """One post-norm transformer stage: 4 DxD attention projections, 4D-hidden MLP, 2 layer norms."""
    d = config.feature_dim
    mha = 4 * (d * d + d)
    mlp = (4 * d * d + 4 * d) + (4 * d * d + d)
    norms = 2 * 2 * d
    return {"mha": mha, "mlp": mlp, "norms": norms, "stage_total": mha + mlp + norms}


def conv_macs(c_in: int, c_out: int, h_out: int, w_out: int, kernel: tuple, groups: int = 1) -> int:
    return c_out * h_out * w_out * (c_in // groups) * kernel[0] * kernel[1]


def affine_macs(d_in: int, d_out: int, positions: int = 1) -> int:
    return d_in * d_out * positions


def count_macs(config: ModelConfig, batch: int = 1) -> dict:
    """Multiply-accumulates of convolutions and affine maps; norms, GELU and adds are free."""
    t, d, c = config.seq_len, config.feature_dim, config.mixer_channels
    per_stage = {"mixer_conv": conv_macs(c, c, t, d // c, config.mixer_kernel)}
    if config.ffn_variant in GATED:
        w, m = config.branch_width, config.dwconv_kernel
        per_stage["ffn_pointwise_1"] = conv_macs(d, w, t, 1, (1, 1))
        per_stage["ffn_depthwise_1"] = conv_macs(w, w, t, 1, (m, 1), groups=w)
        per_stage["ffn_pointwise_2"] = conv_macs(d, w, t, 1, (1, 1))
        per_stage["ffn_depthwise_2"] = conv_macs(w, w, t, 1, (m, 1), groups=w)
        per_stage["ffn_proj"] = conv_macs(w, d, t, 1, (1, 1))
    else:
        h = config.ffn_hidden
        per_stage["ffn_fc1"] = affine_macs(d, h, t)
        per_stage["ffn_fc2"] = affine_macs(h, d, t)
    per_stage = {k: v * batch for k, v in per_stage.items()}
    stage_total = sum(per_stage.values())
    classifier = affine_macs(d, config.num_classes) * batch
    return {
        "per_stage": per_stage,
        "stage_total": stage_total,
        "num_stages": config.num_stages,
        "classifier": classifier,
        "total": config.num_stages * stage_total + classifier,
    }
