"""INI-style key-value config files for the CLI.

Example::

    [model]
    arch = deepfm
    fields = 100,100,50
    k = 8
    hidden = 32

    [batcher]
    max_batch = 16
    flush_interval_ms = 10

Precedence is dataclass defaults, then the file, then command-line flags.
Durations in the file carry an ``_ms`` suffix.
"""
from __future__ import annotations

import configparser
from dataclasses import fields as dc_fields

from .bench import LoadProfile
from .errors import ValidationError
from .serving import BatcherConfig
from .synth import Schema
from .train import TrainConfig


def int_list(text: str) -> tuple[int, ...]:
    text = str(text).strip()
    if not text:
        return ()
    try:
        return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from None


def _ms(text) -> float:
    return float(text) / 1e3


# section -> key -> (target, field, converter)
_KEYS = {
    "model": {
        "arch": ("train", "arch", str),
        "fields": ("train", "field_sizes", int_list),
        "k": ("train", "k", int),
        "hidden": ("train", "hidden", int_list),
    },
    "optimizer": {
        "kind": ("train", "optimizer", str),
        "lr": ("train", "lr", float),
        "beta1": ("train", "beta1", float),
        "beta2": ("train", "beta2", float),
        "eps": ("train", "eps", float),
    },
    "train": {
        "batch_size": ("train", "batch_size", int),
        "seed": ("train", "seed", int),
        "holdout_fraction": ("train", "holdout_fraction", float),
        "window_batches": ("train", "window_batches", int),
        "block_size": ("train", "block_size", int),
        "prefetch_blocks": ("train", "prefetch_blocks", int),
    },
    "batcher": {
        "max_batch": ("batcher", "max_batch", int),
        "flush_interval_ms": ("batcher", "flush_interval", _ms),
        "n_batcher_threads": ("batcher", "n_batcher_threads", int),
        "request_timeout_ms": ("batcher", "request_timeout", _ms),
    },
    "load": {
        "rate": ("load", "rate", float),
        "duration": ("load", "duration", float),
        "arrival": ("load", "arrival", str),
        "seed": ("load", "seed", int),
        "deadline_ms": ("load", "deadline", _ms),
    },
    "schema": {
        "fields": ("schema", "field_sizes", int_list),
        "k_true": ("schema", "k_true", int),
        "bias": ("schema", "bias", float),
        "weight_scale": ("schema", "weight_scale", float),
        "factor_scale": ("schema", "factor_scale", float),
        "skew": ("schema", "skew", float),
    },
}

_TARGETS = {"train": TrainConfig, "batcher": BatcherConfig, "load": LoadProfile, "schema": Schema}


def read_config(path) -> dict[str, dict]:
    """Parse ``path`` into ``{target: {field: value}}``; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ValidationError(f"{path}: {exc}") from None
    out: dict[str, dict] = {t: {} for t in _TARGETS}
    for section in parser.sections():
        if section not in _KEYS:
            raise ValidationError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _KEYS[section]:
                raise ValidationError(f"{path}: unknown key {key!r} in [{section}]")
            target, name, conv = _KEYS[section][key]
            try:
                out[target][name] = conv(raw)
            except ValueError:
                raise ValidationError(f"{path}: bad value {raw!r} for {section}.{key}") from None
    return out


def build(target: str, file_values: dict | None = None, **overrides):
    """Instantiate a config dataclass from file values plus non-None overrides."""
    cls = _TARGETS[target]
    known = {f.name for f in dc_fields(cls)}
    kw = dict((file_values or {}).get(target, {}))
    kw.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(kw) - known
    if unknown:
        raise ValidationError(f"unknown {target} settings {sorted(unknown)}")
    return cls(**kw)
