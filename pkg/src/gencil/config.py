"""Flat `key = value` configuration.

One namespace, no sections.  Types are fixed by the defaults table: an int
key rejects "0.5", a float key accepts "2" and keeps it as 2.0.  Unknown
and duplicate keys are errors, so a typo cannot silently fall back to a
default.  `render_config(parse_config(text))` is stable.
"""

from __future__ import annotations

from pathlib import Path

from .data import SyntheticSpec

DEFAULTS: dict[str, object] = {
    "seed": 7,
    "scheme": "b0(4)",
    # data generation
    "classes": 20,
    "pretrain_classes": 4,
    "train_per_class": 30,
    "test_per_class": 10,
    "pretrain_per_class": 40,
    "image_size": 32,
    "noise": 0.08,
    # encoder pretraining
    "encoder_steps": 600,
    "encoder_batch": 32,
    "encoder_lr": 0.2,
    "encoder_gate": 0.9,
    # decoder pretraining
    "p_tokens": 4,
    "d_model": 64,
    "decoder_blocks": 2,
    "max_len": 32,
    "decoder_steps": 2500,
    "decoder_batch": 16,
    "decoder_lr": 0.25,
    "decoder_gate": 0.5,
    # incremental sessions
    "epochs": 30,
    "batch_size": 16,
    "lr": 0.1,
    "replay_fraction": 0.25,
    "exemplar_budget": 20,
    # baselines
    "probe_epochs": 30,
    "probe_lr": 0.5,
    "probe_exemplar_budget": 0,
}


def coerce_value(key: str, raw: str) -> object:
    """Parse a raw string according to the key's default type."""
    if key not in DEFAULTS:
        raise ValueError(f"unknown config key: {key}")
    kind = type(DEFAULTS[key])
    raw = raw.strip()
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"config key {key} needs an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"config key {key} needs a number, got {raw!r}") from None
    return raw


def parse_config(text: str) -> dict[str, object]:
    """Defaults overlaid with the file's `key = value` lines."""
    cfg = dict(DEFAULTS)
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key in seen:
            raise ValueError(f"config line {lineno}: duplicate key {key}")
        seen.add(key)
        cfg[key] = coerce_value(key, raw)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> dict[str, object]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def render_config(cfg: dict[str, object]) -> str:
    lines = [f"{key} = {cfg[key]}" for key in DEFAULTS]
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: dict[str, object], pairs: list[tuple[str, str]]) -> dict[str, object]:
    out = dict(cfg)
    for key, raw in pairs:
        out[key] = coerce_value(key, raw)
    validate_config(out)
    return out


def validate_config(cfg: dict[str, object]) -> None:
    """Range checks beyond what the types give us."""
    def positive(*keys):
        for k in keys:
            if cfg[k] <= 0:  # type: ignore[operator]
                raise ValueError(f"config key {k} must be positive, got {cfg[k]}")

    positive("classes", "pretrain_classes", "train_per_class", "test_per_class",
             "pretrain_per_class", "image_size", "encoder_steps", "encoder_batch",
             "encoder_lr", "p_tokens", "d_model", "decoder_blocks", "max_len",
             "decoder_steps", "decoder_batch", "decoder_lr", "batch_size", "lr",
             "probe_epochs", "probe_lr")
    for k in ("noise", "exemplar_budget", "probe_exemplar_budget", "epochs"):
        if cfg[k] < 0:  # type: ignore[operator]
            raise ValueError(f"config key {k} must be >= 0, got {cfg[k]}")
    for k in ("encoder_gate", "replay_fraction"):
        if not 0.0 <= float(cfg[k]) <= 1.0:  # type: ignore[arg-type]
            raise ValueError(f"config key {k} must be within [0, 1], got {cfg[k]}")
    if float(cfg["decoder_gate"]) <= 0:
        raise ValueError(f"config key decoder_gate must be positive, got {cfg['decoder_gate']}")


def spec_from_config(cfg: dict[str, object]) -> SyntheticSpec:
    return SyntheticSpec(
        classes=int(cfg["classes"]),
        pretrain_classes=int(cfg["pretrain_classes"]),
        train_per_class=int(cfg["train_per_class"]),
        test_per_class=int(cfg["test_per_class"]),
        pretrain_per_class=int(cfg["pretrain_per_class"]),
        image_size=int(cfg["image_size"]),
        noise=float(cfg["noise"]),
        seed=int(cfg["seed"]),
    )
