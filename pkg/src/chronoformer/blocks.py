"""Transformer building blocks and the end-to-end forecasting model.

Activations are ``(batch, d, n)``: features on axis ``-2``, time on ``-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (
    LOGSPARSE_KINDS,
    AttentionMask,
    CostCounter,
    MultiHeadParams,
    ProbSparse,
    build_logsparse_mask,
    build_mask,
    causal_mask,
    conv_self_attention,
    multi_head_attention,
)
from .errors import ConfigError, ContractError, DataError, DimensionError, ParseError
from .initializers import constant, xavier_init
from .positional import DAY_BUCKETS, PESpec, StampFeatures, pe_columns, stamp_embedding
from .tensor import Tensor

NORM_PLACEMENTS = ("post_ln", "pre_ln", "rezero")
ATTENTION_VARIANTS = ("canonical", "probsparse", "conv", "logsparse")
ENCODER_MASKS = ("full", "causal", "restricted")
HEAD_KINDS = ("regression", "classification")
POOLINGS = ("mean", "dense_interp")
MODEL_PE = ("relative", "global", "periodic_daily", "periodic_weekly", "none")
DECODING = ("one_shot", "autoregressive")
FORWARD_MODES = ("teacher_forced", "one_shot")

CHECKPOINT_HEADER = "chronoformer-ckpt v1"


def _choice(name: str, value, options) -> None:
    if value not in options:
        raise ConfigError(f"{name} = {value!r} is not one of {', '.join(map(str, options))}")


def _positive(name: str, value, minimum: int = 1) -> None:
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 32
    heads: int = 4
    head_size: int | None = None
    d_ff: int | None = None
    norm_placement: str = "post_ln"
    attention: str = "canonical"
    probsparse_u: int | None = None
    probsparse_factor: float = 5.0
    conv_kernel: int = 3
    logsparse_kind: str = "logsparse"
    mask_window: int = 4
    mask_block: int = 8
    ln_eps: float = 1e-5

    def __post_init__(self):
        _positive("d_model", self.d_model)
        _positive("heads", self.heads)
        _choice("norm_placement", self.norm_placement, NORM_PLACEMENTS)
        _choice("attention", self.attention, ATTENTION_VARIANTS)
        _choice("logsparse_kind", self.logsparse_kind, LOGSPARSE_KINDS)
        if self.head_size is None:
            if self.d_model % self.heads:
                raise ConfigError(
                    f"d_model = {self.d_model} is not divisible by heads = {self.heads}; set head_size"
                )
            object.__setattr__(self, "head_size", self.d_model // self.heads)
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        _positive("head_size", self.head_size)
        _positive("d_ff", self.d_ff)
        _positive("conv_kernel", self.conv_kernel)
        _positive("mask_window", self.mask_window, 0)
        _positive("mask_block", self.mask_block)
        if self.probsparse_u is not None:
            _positive("probsparse_u", self.probsparse_u)
        if self.probsparse_factor <= 0:
            raise ConfigError(f"probsparse_factor must be positive, got {self.probsparse_factor}")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be positive, got {self.ln_eps}")


@dataclass(frozen=True)
class ModelConfig:
    input_width: int = 1
    output_width: int | None = None
    window: int = 64
    horizon: int = 16
    n_encoders: int = 2
    n_decoders: int = 1
    block: BlockConfig = field(default_factory=BlockConfig)
    encoder_mask: str = "full"
    distilling: bool = False
    replica: bool = False
    head: str = "regression"
    n_classes: int = 2
    pooling: str = "mean"
    interp_factors: int = 4
    embed_kernel: int = 1
    pe: str = "relative"
    pe_base: float = 10_000.0
    stamps: bool = False
    decoding: str = "one_shot"

    def __post_init__(self):
        _positive("input_width", self.input_width)
        if self.output_width is None:
            object.__setattr__(self, "output_width", self.input_width)
        _positive("output_width", self.output_width)
        _positive("window", self.window)
        _positive("horizon", self.horizon)
        _positive("n_encoders", self.n_encoders)
        _positive("n_decoders", self.n_decoders, 0)
        _positive("embed_kernel", self.embed_kernel)
        _positive("interp_factors", self.interp_factors)
        _choice("encoder_mask", self.encoder_mask, ENCODER_MASKS)
        _choice("head", self.head, HEAD_KINDS)
        _choice("pooling", self.pooling, POOLINGS)
        _choice("pe", self.pe, MODEL_PE)
        _choice("decoding", self.decoding, DECODING)
        if self.distilling and self.n_encoders < 2:
            raise ConfigError("distilling needs n_encoders >= 2")
        if self.replica and not self.distilling:
            raise ConfigError("replica needs distilling = true")
        if self.head == "classification":
            if self.n_decoders:
                raise ConfigError("classification head needs n_decoders = 0")
            _positive("n_classes", self.n_classes, 2)
        if self.n_decoders and self.output_width > self.input_width:
            raise ConfigError(
                f"output_width = {self.output_width} exceeds input_width = {self.input_width}; "
                "the decoder start token is read from the first input columns"
            )
        if self.pe != "none" and self.block.d_model % 2:
            raise ConfigError(f"positional encoding needs an even d_model, got {self.block.d_model}")


# -- parameter groups --------------------------------------------------------------


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ResidualParams:
    gain: Tensor | None = None
    bias: Tensor | None = None
    alpha: Tensor | None = None
    eps: float = 1e-5


@dataclass
class BlockParams:
    attn: MultiHeadParams
    ff: FeedForwardParams
    residuals: list[ResidualParams]
    cross: MultiHeadParams | None = None


@dataclass
class StackParams:
    blocks: list[BlockParams]
    distill: list[Tensor] = field(default_factory=list)
    seed: int = 0


# -- sublayers ----------------------------------------------------------------------


def feed_forward(X: Tensor, p: FeedForwardParams) -> Tensor:
    """Position-wise ``W2 relu(W1 X + b1) + b2``; biases are column vectors."""
    d = X.shape[-2]
    if p.w1.shape[-1] != d or p.w2.shape != (d, p.w1.shape[0]):
        raise DimensionError(
            f"feed-forward weights {p.w1.shape}, {p.w2.shape} do not fit {d} input features"
        )
    hidden = T.relu(T.add(T.matmul(p.w1, X), p.b1))
    return T.add(T.matmul(p.w2, hidden), p.b2)


def residual_sublayer(
    X: Tensor, F: Callable[[Tensor], Tensor], placement: str, p: ResidualParams
) -> Tensor:
    if placement == "post_ln":
        return T.layer_norm(T.add(X, F(X)), p.gain, p.bias, p.eps)
    if placement == "pre_ln":
        return T.add(X, F(T.layer_norm(X, p.gain, p.bias, p.eps)))
    if placement == "rezero":
        return T.add(X, T.mul(p.alpha, F(X)))
    raise ConfigError(f"unknown norm placement {placement!r}; expected one of {NORM_PLACEMENTS}")


def self_attention(
    X: Tensor,
    p: MultiHeadParams,
    cfg: BlockConfig,
    mask: AttentionMask | None = None,
    counter: CostCounter | None = None,
    seed: int = 0,
    weights_out: list | None = None,
    allow_sparse: bool = True,
) -> Tensor:
    sparse = None
    if cfg.attention == "probsparse" and allow_sparse:
        n = X.shape[-1]
        u = None if cfg.probsparse_u is None else min(cfg.probsparse_u, n)
        sparse = ProbSparse(u, cfg.probsparse_factor, seed)
    if cfg.attention == "conv":
        return conv_self_attention(X, p, mask, counter, sparse, weights_out)
    return multi_head_attention(X, p, mask, counter, probsparse=sparse, weights_out=weights_out)


def encoder_block(
    X: Tensor,
    p: BlockParams,
    cfg: BlockConfig,
    mask: AttentionMask | None = None,
    counter: CostCounter | None = None,
    seed: int = 0,
    weights_out: list | None = None,
) -> Tensor:
    def attend(Z):
        return self_attention(Z, p.attn, cfg, mask, counter, seed, weights_out)

    X = residual_sublayer(X, attend, cfg.norm_placement, p.residuals[0])
    return residual_sublayer(X, lambda Z: feed_forward(Z, p.ff), cfg.norm_placement, p.residuals[1])


def decoder_block(
    Y: Tensor,
    memory: Tensor,
    p: BlockParams,
    cfg: BlockConfig,
    self_mask: AttentionMask | None = None,
    counter: CostCounter | None = None,
    seed: int = 0,
    weights_out: list | None = None,
) -> Tensor:
    """Masked self-attention, then attention over ``memory``, then feed-forward.

    ProbSparse query selection ranks all queries together, so a later token
    could change which earlier queries are active; the masked self-attention
    here therefore always attends densely to keep predictions causal.
    """
    if p.cross is None:
        raise ConfigError("decoder block needs encoder-decoder attention weights")
    if self_mask is None:
        self_mask = causal_mask(Y.shape[-1])

    def attend(Z):
        return self_attention(Z, p.attn, cfg, self_mask, counter, seed, weights_out, allow_sparse=False)

    def cross(Z):
        return multi_head_attention(Z, p.cross, None, counter, memory=memory, weights_out=weights_out)

    Y = residual_sublayer(Y, attend, cfg.norm_placement, p.residuals[0])
    Y = residual_sublayer(Y, cross, cfg.norm_placement, p.residuals[1])
    return residual_sublayer(Y, lambda Z: feed_forward(Z, p.ff), cfg.norm_placement, p.residuals[2])


def distill_layer(X: Tensor, kernel: Tensor) -> Tensor:
    """Causal conv (kernel 3) -> ELU -> stride-2 max-pool: halves the time axis."""
    if X.shape[-1] < 2:
        raise DimensionError(f"distilling needs at least 2 positions, got {X.shape[-1]}")
    return T.maxpool1d_stride2(T.elu(T.causal_conv1d(X, kernel)))


def encoder_stack(
    X: Tensor,
    stack: StackParams,
    cfg: BlockConfig,
    mask_for: Callable[[int], AttentionMask | None] = lambda n: None,
    counter: CostCounter | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """Run the blocks in order, distilling between consecutive blocks when configured.

    ``weights_out`` collects ``(layer index, weights)`` pairs.
    """
    for i, block in enumerate(stack.blocks):
        layer_weights = None if weights_out is None else []
        X = encoder_block(X, block, cfg, mask_for(X.shape[-1]), counter, stack.seed + i, layer_weights)
        if weights_out is not None:
            weights_out.extend((i, w) for w in layer_weights)
        if i < len(stack.distill):
            X = distill_layer(X, stack.distill[i])
    return X


def replica_concat(
    X: Tensor,
    main: StackParams,
    replica: StackParams | None,
    cfg: BlockConfig,
    mask_for: Callable[[int], AttentionMask | None] = lambda n: None,
    counter: CostCounter | None = None,
    weights_out: list | None = None,
) -> Tensor:
    """Main stack on the whole input, replica on its most recent half, joined along time."""
    out = encoder_stack(X, main, cfg, mask_for, counter, weights_out)
    if replica is None:
        return out
    L = X.shape[-1]
    recent = T.index(X, (Ellipsis, slice(L - math.ceil(L / 2), None)))
    rep_out = encoder_stack(recent, replica, cfg, mask_for, counter)
    if rep_out.shape != out.shape:
        raise ConfigError(
            f"replica output {rep_out.shape} does not match main stack output {out.shape}"
        )
    return T.concat([out, rep_out], axis=-1)


def dense_interp_weights(n_steps: int, factors: int) -> np.ndarray:
    """``(T, M)`` weights ``(1 - |M t / T - m| / M) ** 2`` for 1-based ``t`` and ``m``."""
    _positive("dense interpolation input length", n_steps)
    _positive("dense interpolation factors", factors)
    t = np.arange(1, n_steps + 1)[:, None]
    m = np.arange(1, factors + 1)[None, :]
    s = factors * t / n_steps
    return (1.0 - np.abs(s - m) / factors) ** 2


def dense_interpolation(H: Tensor, factors: int) -> Tensor:
    """Summarise ``d x T`` hidden states into ``d x M`` by fixed temporal weights."""
    return T.matmul(H, dense_interp_weights(H.shape[-1], factors))


# -- model --------------------------------------------------------------------------


@dataclass
class Batch:
    """Model input.  ``inputs`` is ``(B, M, v)``; ``targets`` ``(B, H, v_out)``.

    ``input_index`` holds absolute series positions and ``input_times``
    epoch seconds, both ``(B, M)``; they feed the position strategies.
    """

    inputs: np.ndarray
    targets: np.ndarray | None = None
    input_index: np.ndarray | None = None
    input_times: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 3:
            raise DimensionError(f"inputs must be (batch, window, width), got {self.inputs.shape}")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.ndim != 3 or self.targets.shape[0] != self.inputs.shape[0]:
                raise DimensionError(
                    f"targets {self.targets.shape} do not match inputs {self.inputs.shape}"
                )

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


class Transformer:
    """Encoder stack with either a decoder stack or a pooled linear head.

    ``params`` maps stable names to leaf tensors in creation order, which
    is also the order the initialiser consumes random numbers.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self.forward_passes = 0
        rng = np.random.default_rng(self.seed)
        self._build(rng)

    # construction

    def _add(self, name: str, t: Tensor) -> Tensor:
        t.name = name
        self.params[name] = t
        return t

    def _xavier(self, name, shape, fan_in, fan_out, rng) -> Tensor:
        return self._add(name, xavier_init(shape, fan_in, fan_out, rng))

    def _attention_params(self, prefix, conv, rng) -> MultiHeadParams:
        b = self.config.block
        d, r, s = b.d_model, b.heads, b.head_size
        k = b.conv_kernel if conv else 1
        qk_shape = (r, s, d, k) if conv else (r, s, d)
        wq = self._xavier(f"{prefix}.wq", qk_shape, d * k, s * k, rng)
        wk = self._xavier(f"{prefix}.wk", qk_shape, d * k, s * k, rng)
        wv = self._xavier(f"{prefix}.wv", (r, s, d), d, s, rng)
        wo = self._xavier(f"{prefix}.wo", (d, r * s), r * s, d, rng)
        return MultiHeadParams(wq, wk, wv, wo)

    def _block_params(self, prefix, with_cross, rng) -> BlockParams:
        b = self.config.block
        d = b.d_model
        attn = self._attention_params(f"{prefix}.attn", b.attention == "conv", rng)
        cross = self._attention_params(f"{prefix}.cross", False, rng) if with_cross else None
        ff = FeedForwardParams(
            self._xavier(f"{prefix}.ff.w1", (b.d_ff, d), d, b.d_ff, rng),
            self._add(f"{prefix}.ff.b1", constant((b.d_ff, 1), 0.0)),
            self._xavier(f"{prefix}.ff.w2", (d, b.d_ff), b.d_ff, d, rng),
            self._add(f"{prefix}.ff.b2", constant((d, 1), 0.0)),
        )
        residuals = []
        for j in range(3 if with_cross else 2):
            name = f"{prefix}.res{j}"
            if b.norm_placement == "rezero":
                residuals.append(ResidualParams(alpha=self._add(f"{name}.alpha", constant((1,), 0.0))))
            else:
                residuals.append(
                    ResidualParams(
                        gain=self._add(f"{name}.gain", constant((d,), 1.0)),
                        bias=self._add(f"{name}.bias", constant((d,), 0.0)),
                        eps=b.ln_eps,
                    )
                )
        return BlockParams(attn, ff, residuals, cross)

    def _stack(self, prefix, depth, n_distill, seed, rng) -> StackParams:
        d = self.config.block.d_model
        blocks = [self._block_params(f"{prefix}{i}", False, rng) for i in range(depth)]
        distill = [
            self._xavier(f"{prefix}.distill{j}.kernel", (d, d, 3), 3 * d, 3 * d, rng)
            for j in range(n_distill)
        ]
        return StackParams(blocks, distill, seed)

    def _build(self, rng) -> None:
        c, d = self.config, self.config.block.d_model
        ke = c.embed_kernel
        self._xavier("embed.kernel", (d, c.input_width, ke), c.input_width * ke, d * ke, rng)
        self.stamp_tables = None
        if c.stamps:
            self.stamp_tables = {
                name: self._xavier(f"stamp.{name}", (rows, d), 1, d, rng)
                for name, rows in (("minute", DAY_BUCKETS), ("weekday", 7), ("holiday", 2))
            }
        n_enc = c.n_encoders
        n_distill = n_enc - 1 if c.distilling else 0
        self.encoder = self._stack("enc", n_enc, n_distill, self.seed, rng)
        self.replica = None
        if c.replica:
            self.replica = self._stack("rep", n_enc - 1, n_distill - 1, self.seed + 1000, rng)
        self.decoder = []
        if c.n_decoders:
            v = c.output_width
            self._xavier("dec_embed.kernel", (d, v, ke), v * ke, d * ke, rng)
            self.decoder = [self._block_params(f"dec{i}", True, rng) for i in range(c.n_decoders)]
            self._xavier("out.weight", (v, d), d, v, rng)
            self._add("out.bias", constant((v, 1), 0.0))
        else:
            factors = c.interp_factors if c.pooling == "dense_interp" else 1
            width = c.horizon * c.output_width if c.head == "regression" else c.n_classes
            self._xavier("head.weight", (width, d * factors), d * factors, width, rng)
            self._add("head.bias", constant((width, 1), 0.0))

    # forward pieces

    def _encoder_mask(self, n: int) -> AttentionMask | None:
        b = self.config.block
        if b.attention == "logsparse":
            return build_logsparse_mask(n, b.logsparse_kind, b.mask_window, b.mask_block)
        if self.config.encoder_mask == "full":
            return None
        return build_mask(self.config.encoder_mask, n, window=b.mask_window)

    def _decoder_mask(self, n: int) -> AttentionMask:
        b = self.config.block
        if b.attention == "logsparse":
            return build_logsparse_mask(n, b.logsparse_kind, b.mask_window, b.mask_block)
        return causal_mask(n)

    def _encoding(self, positions: np.ndarray, times: np.ndarray | None) -> np.ndarray | None:
        kind = self.config.pe
        if kind == "none":
            return None
        if kind in ("relative", "global"):
            values = positions
        else:
            if times is None:
                raise ConfigError(f"pe = {kind} needs timestamps")
            stamps = StampFeatures.from_timestamps(times)
            values = stamps.minute_bucket if kind == "periodic_daily" else stamps.weekday
        spec = PESpec(self.config.block.d_model, self.config.pe_base)
        values = np.asarray(values)
        if values.ndim == 1:
            return pe_columns(values, spec)
        cols = pe_columns(values.reshape(-1), spec).reshape((spec.d,) + values.shape)
        return np.moveaxis(cols, 0, -2)

    def _embed(self, tokens: np.ndarray, kernel: Tensor, positions, times) -> Tensor:
        X = T.causal_conv1d(T.tensor(np.swapaxes(tokens, -1, -2)), kernel)
        pe = self._encoding(positions, times)
        if pe is not None:
            X = T.add(X, pe)
        if self.stamp_tables is not None:
            if times is None:
                raise ConfigError("stamps = true needs timestamps")
            X = T.add(X, stamp_embedding(StampFeatures.from_timestamps(times), self.stamp_tables))
        return X

    def _check_batch(self, batch: Batch) -> None:
        if batch.inputs.shape[2] != self.config.input_width:
            raise DimensionError(
                f"inputs have width {batch.inputs.shape[2]}, model expects {self.config.input_width}"
            )

    def embed_inputs(self, batch: Batch) -> Tensor:
        """Input projection plus position (and stamp) encodings: ``(B, d, M)``."""
        self._check_batch(batch)
        M = batch.inputs.shape[1]
        if self.config.pe == "global" and batch.input_index is not None:
            positions = np.asarray(batch.input_index)
        else:
            positions = np.arange(M)
        return self._embed(batch.inputs, self.params["embed.kernel"], positions, batch.input_times)

    def encode(self, X: Tensor, counter=None, weights_out=None) -> Tensor:
        """Encoder trunk (with distilling and replica when configured)."""
        b = self.config.block
        return replica_concat(X, self.encoder, self.replica, b, self._encoder_mask, counter, weights_out)

    def decoder_tokens(self, batch: Batch, mode: str, horizon: int) -> np.ndarray:
        """``(B, H, v_out)``: the last observed step followed by targets or zeros."""
        _choice("mode", mode, FORWARD_MODES)
        v = self.config.output_width
        start = batch.inputs[:, -1:, :v]
        if mode == "teacher_forced":
            if batch.targets is None:
                raise ContractError("teacher-forced forward needs targets")
            if batch.targets.shape[1] < horizon - 1 or batch.targets.shape[2] != v:
                raise DimensionError(
                    f"targets {batch.targets.shape} too short for horizon {horizon} and width {v}"
                )
            rest = batch.targets[:, : horizon - 1]
        else:
            rest = np.zeros((batch.size, horizon - 1, v))
        return np.concatenate([start, rest], axis=1)

    def decode(self, memory: Tensor, tokens: np.ndarray, batch: Batch, counter=None, weights_out=None) -> Tensor:
        """Decoder stack over ``tokens`` (``(B, H, v_out)``) -> predictions ``(B, H, v_out)``."""
        b = self.config.block
        H = tokens.shape[1]
        M = batch.inputs.shape[1]
        if self.config.pe == "global" and batch.input_index is not None:
            positions = np.asarray(batch.input_index)[:, -1:] + np.arange(H)
        else:
            positions = np.arange(M - 1, M - 1 + H)
        times = None
        if batch.input_times is not None:
            ts = np.asarray(batch.input_times, dtype=np.int64)
            if M < 2:
                raise ConfigError("decoder timestamps need a window of at least 2 steps")
            step = ts[:, -1:] - ts[:, -2:-1]
            times = ts[:, -1:] + step * np.arange(H)
        Y = self._embed(tokens, self.params["dec_embed.kernel"], positions, times)
        mask = self._decoder_mask(H)
        for i, block in enumerate(self.decoder):
            layer_weights = None if weights_out is None else []
            Y = decoder_block(Y, memory, block, b, mask, counter, self.seed + 2000 + i, layer_weights)
            if weights_out is not None:
                weights_out.extend((f"dec{i}", w) for w in layer_weights)
        out = T.add(T.matmul(self.params["out.weight"], Y), self.params["out.bias"])
        return T.transpose(out)

    def head(self, memory: Tensor, logits: bool = False) -> Tensor:
        c = self.config
        if c.pooling == "dense_interp":
            pooled = dense_interpolation(memory, c.interp_factors)
        else:
            pooled = T.mean(memory, axis=-1, keepdims=True)
        B, d, F = pooled.shape
        flat = T.reshape(pooled, (B, d * F, 1))
        out = T.add(T.matmul(self.params["head.weight"], flat), self.params["head.bias"])
        out = T.reshape(out, (B, out.shape[1]))
        if c.head == "regression":
            return T.reshape(out, (B, c.horizon, c.output_width))
        return out if logits else T.softmax_rows(out)

    def forward(
        self,
        batch: Batch,
        mode: str | None = None,
        horizon: int | None = None,
        tokens: np.ndarray | None = None,
        counter: CostCounter | None = None,
        weights_out: list | None = None,
        logits: bool = False,
    ) -> Tensor:
        """One full pass.  Regression gives ``(B, H, v_out)``; classification ``(B, C)``.

        ``mode`` defaults to teacher forcing for autoregressive configs and
        to one-shot otherwise.  ``tokens`` overrides the decoder input.
        ``weights_out`` collects ``(layer, weights)`` pairs.
        """
        c = self.config
        self.forward_passes += 1
        H = c.horizon if horizon is None else horizon
        _positive("horizon", H)
        enc_weights = None if weights_out is None else []
        memory = self.encode(self.embed_inputs(batch), counter, enc_weights)
        if weights_out is not None:
            weights_out.extend((f"enc{i}", w) for i, w in enc_weights)
        if not self.decoder:
            if H != c.horizon:
                raise ConfigError(f"encoder-only head is built for horizon {c.horizon}, asked for {H}")
            return self.head(memory, logits)
        if tokens is None:
            if mode is None:
                mode = "teacher_forced" if c.decoding == "autoregressive" else "one_shot"
            tokens = self.decoder_tokens(batch, mode, H)
        return self.decode(memory, tokens, batch, counter, weights_out)

    __call__ = forward

    # persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = [n for n in self.params if n not in state]
        extra = [n for n in state if n not in self.params]
        if missing or extra:
            raise DataError(f"checkpoint does not fit the model: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, t in self.params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != t.shape:
                raise DataError(f"checkpoint tensor {name} has shape {values.shape}, model needs {t.shape}")
            t.values = values.copy()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors: a header line, then ``name dims... : values`` per tensor."""
    lines = [CHECKPOINT_HEADER]
    for name, values in tensors.items():
        if not name or any(ch.isspace() for ch in name) or ":" in name:
            raise ContractError(f"tensor name {name!r} cannot be stored")
        values = np.asarray(values, dtype=np.float64)
        fields = [name, *(str(n) for n in values.shape), ":"]
        fields += [format(v, ".17g") for v in values.reshape(-1)]
        lines.append(" ".join(fields))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise ParseError(f"expected header {CHECKPOINT_HEADER!r}", line=1)
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        head, sep, body = line.partition(":")
        fields = head.split()
        if not sep or not fields:
            raise ParseError("expected 'name dims... : values'", line=lineno)
        name = fields[0]
        try:
            shape = tuple(int(n) for n in fields[1:])
            values = np.array([float(v) for v in body.split()], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"tensor {name}: {exc}", line=lineno) from None
        if values.size != math.prod(shape):
            raise ParseError(f"tensor {name} has {values.size} values for shape {shape}", line=lineno)
        if name in out:
            raise ParseError(f"tensor {name} appears twice", line=lineno)
        out[name] = values.reshape(shape)
    return out
