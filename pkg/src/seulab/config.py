"""Campaign configuration files: strict JSON with unknown-key rejection.

A typo in a campaign definition silently corrupts an experiment, so
validation is strict: every unknown key is an error naming the exact
field path, and structural problems report where they were found.

Minimal example (defaults fill the rest; trials defaults to 50):

    {
      "prompts": ["a parked sports car"],
      "targets": [
        {"block": "down", "level": 0, "transformer": 0,
         "layer": "sa", "matrix": "wv", "bit": 14}
      ]
    }
"""

from __future__ import annotations

import json
from pathlib import Path

from .campaign import DEFAULT_TRIALS, METRIC_NAMES, CampaignConfig, config_from_dict
from .model import DiffuserConfig


class ParseError(Exception):
    """The config file is not readable JSON."""


class ValidationError(Exception):
    """The config structure is invalid; the message names the field path."""


_MODEL_KEYS = frozenset({
    "latent_size", "image_size", "latent_channels",
    "transformers_per_down_block", "transformers_per_up_block",
    "transformers_per_mid_block", "heads", "embed_width",
    "text_length", "steps", "seed",
})
_TARGET_KEYS = frozenset({"block", "level", "transformer", "layer", "matrix", "bit"})
_TOP_KEYS = {"model", "targets", "prompts", "trials", "seed", "metrics"}

_BLOCKS = {"down", "mid", "up"}
_LAYERS = {"sa", "ca", "ffn"}
_MATRICES = {"wq", "wk", "wv", "wo", "wf1", "wf2"}


def _expect(condition: bool, path: str, message: str) -> None:
    if not condition:
        raise ValidationError(f"{path}: {message}")


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_keys(obj: dict, allowed, path: str) -> None:
    for key in obj:
        _expect(key in allowed, f"{path}.{key}" if path else key, "unknown key")


def validate_config_dict(raw: dict) -> dict:
    """Validate a parsed config object; returns it with defaults applied."""
    _expect(isinstance(raw, dict), "<root>", "config must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "")

    model = raw.get("model", {})
    _expect(isinstance(model, dict), "model", "must be an object")
    _check_keys(model, _MODEL_KEYS | {"channels"}, "model")
    for key in _MODEL_KEYS:
        if key in model:
            _expect(_is_int(model[key]), f"model.{key}", "must be an integer")
    if "channels" in model:
        chans = model["channels"]
        _expect(
            isinstance(chans, list) and chans and all(_is_int(c) and c > 0 for c in chans),
            "model.channels", "must be a non-empty list of positive integers",
        )

    prompts = raw.get("prompts")
    _expect(prompts is not None, "prompts", "required field is missing")
    _expect(
        isinstance(prompts, list) and all(isinstance(p, str) for p in prompts),
        "prompts", "must be a list of strings",
    )
    _expect(len(prompts) > 0, "prompts", "must be non-empty")

    targets = raw.get("targets")
    _expect(targets is not None, "targets", "required field is missing")
    _expect(isinstance(targets, list), "targets", "must be a list")
    _expect(len(targets) > 0, "targets", "must be non-empty")
    for i, target in enumerate(targets):
        path = f"targets[{i}]"
        _expect(isinstance(target, dict), path, "must be an object")
        _check_keys(target, _TARGET_KEYS, path)
        for key in ("block", "layer", "matrix"):
            _expect(key in target, f"{path}.{key}", "required field is missing")
            _expect(isinstance(target[key], str), f"{path}.{key}", "must be a string")
        _expect(target["block"] in _BLOCKS, f"{path}.block", f"must be one of {sorted(_BLOCKS)}")
        _expect(target["layer"] in _LAYERS, f"{path}.layer", f"must be one of {sorted(_LAYERS)}")
        _expect(
            target["matrix"] in _MATRICES, f"{path}.matrix", f"must be one of {sorted(_MATRICES)}"
        )
        for key in ("level", "transformer", "bit"):
            if key in target:
                _expect(_is_int(target[key]), f"{path}.{key}", "must be an integer")
        bit = target.get("bit", 14)
        _expect(0 <= bit <= 15, f"{path}.bit", "must be in [0, 15]")

    trials = raw.get("trials", DEFAULT_TRIALS)
    _expect(_is_int(trials), "trials", "must be an integer")
    _expect(trials >= 1, "trials", "must be >= 1")

    seed = raw.get("seed", 0)
    _expect(_is_int(seed), "seed", "must be an integer")

    metrics = raw.get("metrics", list(METRIC_NAMES))
    _expect(
        isinstance(metrics, list) and all(isinstance(m, str) for m in metrics),
        "metrics", "must be a list of strings",
    )
    for m in metrics:
        _expect(m in METRIC_NAMES, f"metrics.{m}", f"unknown metric, expected one of {list(METRIC_NAMES)}")
    _expect(len(metrics) > 0, "metrics", "must be non-empty")

    model = dict(model)
    model.setdefault("seed", seed)
    return {
        "model": model,
        "targets": targets,
        "prompts": prompts,
        "trials": trials,
        "seed": seed,
        "metrics": metrics,
    }


def load_config(path: str | Path, seed_override: int | None = None) -> CampaignConfig:
    """Read, validate and materialize a campaign config file.

    Raises ParseError for unreadable JSON and ValidationError (naming the
    field path) for structural problems, including selector combinations
    the model topology rejects.  ``seed_override`` replaces the master
    seed before validation (the model seed follows it unless the file
    pins one explicitly).
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if seed_override is not None:
        if not isinstance(raw, dict):
            raise ValidationError("<root>: config must be a JSON object")
        raw = dict(raw) | {"seed": seed_override}
    checked = validate_config_dict(raw)
    try:
        cfg = config_from_dict(checked)
    except (ValueError, KeyError) as exc:
        raise ValidationError(str(exc)) from exc
    _validate_targets_in_topology(cfg)
    return cfg


def _validate_targets_in_topology(cfg: CampaignConfig) -> None:
    scheme = cfg.model.naming_scheme()
    for i, target in enumerate(cfg.targets):
        if target.selector not in scheme.table:
            raise ValidationError(
                f"targets[{i}]: selector {target.selector} is outside the model topology"
            )


def default_model_config() -> DiffuserConfig:
    return DiffuserConfig()
