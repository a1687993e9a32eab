"""Run configuration: ``key = value`` files, command-line overrides and model assembly."""

from __future__ import annotations

import argparse
import difflib
from dataclasses import dataclass
from typing import Any, Callable

from .attention import LOGSPARSE_KINDS
from .blocks import (
    ATTENTION_VARIANTS,
    DECODING,
    ENCODER_MASKS,
    MODEL_PE,
    NORM_PLACEMENTS,
    POOLINGS,
    BlockConfig,
    ModelConfig,
)
from .data import SEGMENTS
from .errors import ConfigError
from .training import Schedule


def _nearest(word: str, options) -> str:
    close = difflib.get_close_matches(word, list(options), n=1, cutoff=0.5)
    return f"; did you mean {close[0]!r}?" if close else ""


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    return float(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.lower() == "none" else parse(text)

    inner.__name__ = parse.__name__
    return inner


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    flag: str
    choices: tuple | None = None
    help: str = ""


# Ordered as written to resolved configuration files.
KEYS: dict[str, Key] = {
    # model shape
    "d_model": Key(_int, 32, "--d-model", help="model width"),
    "heads": Key(_int, 4, "--heads", help="attention heads"),
    "head_size": Key(_optional(_int), None, "--head-size", help="per-head width (default d_model/heads)"),
    "d_ff": Key(_optional(_int), None, "--d-ff", help="feed-forward width (default 4*d_model)"),
    "norm_placement": Key(str, "post_ln", "--norm", NORM_PLACEMENTS, "residual/normalisation placement"),
    "attention": Key(str, "canonical", "--variant", ATTENTION_VARIANTS, "attention variant"),
    "probsparse_u": Key(_optional(_int), None, "--probsparse-u", help="active queries (default ceil(c ln L))"),
    "probsparse_factor": Key(_float, 5.0, "--probsparse-factor", help="sampling factor c"),
    "conv_kernel": Key(_int, 3, "--conv-kernel", help="query/key kernel for conv attention"),
    "logsparse_kind": Key(str, "logsparse", "--logsparse-kind", LOGSPARSE_KINDS, "logsparse pattern"),
    "mask_window": Key(_int, 4, "--mask-window", help="local/restricted window"),
    "mask_block": Key(_int, 8, "--mask-block", help="restart block length"),
    "window": Key(_int, 64, "--window", help="input steps M"),
    "horizon": Key(_int, 16, "--horizon", help="forecast steps H"),
    "n_encoders": Key(_int, 2, "--n-encoders", help="encoder blocks"),
    "n_decoders": Key(_int, 1, "--n-decoders", help="decoder blocks (0: pooled head)"),
    "encoder_mask": Key(str, "full", "--encoder-mask", ENCODER_MASKS, "encoder self-attention mask"),
    "distilling": Key(_bool, False, "--distilling", help="conv/pool distilling between encoders"),
    "replica": Key(_bool, False, "--replica", help="half-length replica encoder stack"),
    "pooling": Key(str, "mean", "--pooling", POOLINGS, "pooled head for n_decoders = 0"),
    "interp_factors": Key(_int, 4, "--interp-factors", help="dense interpolation factors"),
    "embed_kernel": Key(_int, 1, "--embed-kernel", help="input projection kernel"),
    "pe": Key(str, "relative", "--pe", MODEL_PE, "position encoding strategy"),
    "pe_base": Key(_float, 10_000.0, "--pe-base", help="sinusoid base"),
    "stamps": Key(_bool, False, "--stamps", help="add calendar stamp embeddings"),
    "decoding": Key(str, "one_shot", "--decoding", DECODING, "decoder regime"),
    # optimisation
    "steps": Key(_int, 2000, "--steps", help="training steps"),
    "lr": Key(_float, 1e-3, "--lr", help="peak learning rate"),
    "warmup": Key(_int, 400, "--warmup", help="warm-up steps (0: constant rate)"),
    "clip": Key(_float, 1.0, "--clip", help="global gradient-norm clip (0: off)"),
    "batch": Key(_int, 16, "--batch", help="windows per step"),
    "seed": Key(_int, 0, "--seed", help="initialisation and sampling seed"),
    # data
    "stride": Key(_int, 1, "--stride", help="training window stride"),
    "tde_dim": Key(_int, 1, "--tde-dim", help="delay-embedding dimension"),
    "tde_tau": Key(_int, 1, "--tde-tau", help="delay-embedding spacing"),
    "differences": Key(_bool, False, "--differences", help="append 1st/2nd differences"),
    "segments": Key(str, "none", "--segments", tuple(SEGMENTS), "prepend same-time windows from earlier days"),
}

_BLOCK_KEYS = (
    "d_model heads head_size d_ff norm_placement attention probsparse_u probsparse_factor "
    "conv_kernel logsparse_kind mask_window mask_block"
).split()
_MODEL_KEYS = (
    "window horizon n_encoders n_decoders encoder_mask distilling replica pooling "
    "interp_factors embed_kernel pe pe_base stamps decoding"
).split()


def parse_value(key: str, text: str):
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}{_nearest(key, KEYS)}")
    spec = KEYS[key]
    text = text.strip()
    if spec.choices is not None:
        if text not in spec.choices:
            raise ConfigError(
                f"{key} = {text!r} is not one of {', '.join(spec.choices)}{_nearest(text, spec.choices)}"
            )
        return text
    try:
        return spec.parse(text)
    except ValueError:
        raise ConfigError(f"{key} = {text!r} is not a valid {spec.parse.__name__.lstrip('_')}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment; later lines win."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        try:
            out[key.strip()] = parse_value(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def load_config(path) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def resolve(file_values: dict[str, Any] | None = None, flags: dict[str, Any] | None = None) -> dict[str, Any]:
    """Defaults, then file values, then flags that were actually given (not None)."""
    out = {k: spec.default for k, spec in KEYS.items()}
    out.update(file_values or {})
    out.update({k: v for k, v in (flags or {}).items() if v is not None})
    return out


def format_config(values: dict[str, Any]) -> str:
    lines = []
    for key in KEYS:
        v = values[key]
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif v is None:
            text = "none"
        elif isinstance(v, float):
            text = repr(v)  # shortest text that round-trips exactly
        else:
            text = str(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def model_config(values: dict[str, Any], input_width: int, output_width: int) -> ModelConfig:
    """``window`` counts recent steps; daily/weekly segments lengthen the model input."""
    block = BlockConfig(**{k: values[k] for k in _BLOCK_KEYS})
    fields = {k: values[k] for k in _MODEL_KEYS}
    fields["window"] *= 1 + len(SEGMENTS[values["segments"]])
    return ModelConfig(input_width=input_width, output_width=output_width, block=block, **fields)


def schedule(values: dict[str, Any]) -> Schedule:
    return Schedule(values["lr"], values["warmup"])


def add_flags(parser, keys=None) -> None:
    """Register ``--flag`` options (default None so unset flags never override files)."""
    for key in keys or KEYS:
        spec = KEYS[key]
        parser.add_argument(
            spec.flag,
            dest=key,
            default=None,
            metavar=key.upper(),
            type=_flag_type(key),
            help=spec.help + (f" ({'|'.join(spec.choices)})" if spec.choices else ""),
        )


def _flag_type(key: str):
    def convert(text: str):
        try:
            return parse_value(key, text)
        except ConfigError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    convert.__name__ = key
    return convert
