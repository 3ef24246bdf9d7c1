"""Line-oriented experiment configs with dotted keys.

Files contain ``section.key = value`` lines ('#' starts a comment).
Unknown keys are rejected. ``--set key=value`` overrides win over the
file; the MODA_SEED environment variable overrides the global ``seed``;
section seeds default to the global one. Every command writes the fully
resolved config next to its outputs so a run is reproducible from that
artifact alone.
"""
from __future__ import annotations

import os
from typing import Any


class ConfigError(ValueError):
    pass


def _to_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _to_int_tuple(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(x) for x in s.split(","))


# key -> (caster, default). A None default means "fall back to the global
# seed" for *.seed keys and "unset" for everything else.
SCHEMA: dict[str, tuple[Any, Any]] = {
    "seed": (int, 0),

    "dataset.kind": (str, "blobs"),
    "dataset.classes": (int, 4),
    "dataset.per_class": (int, 300),
    "dataset.dim": (int, 2),
    "dataset.spread": (float, 0.8),
    "dataset.seed": (int, None),
    "dataset.train_images": (str, ""),
    "dataset.train_labels": (str, ""),
    "dataset.test_images": (str, ""),
    "dataset.test_labels": (str, ""),
    "dataset.limit": (int, 0),

    "model.hidden": (_to_int_tuple, (32, 32)),
    "model.conv_channels": (_to_int_tuple, ()),
    "model.seed": (int, None),

    "train.epochs": (int, 60),
    "train.batch_size": (int, 32),
    "train.learning_rate": (float, 0.05),
    "train.momentum": (float, 0.9),
    "train.shuffle": (_to_bool, True),
    "train.eval_every": (int, 10),
    "train.seed": (int, None),

    "loss.alpha": (float, 1.0),
    "loss.beta": (float, 1.0),
    "loss.gamma": (float, 0.3),

    "decompose.tau": (float, 0.9),

    "sweep.k_min": (int, 2),
    "sweep.k_max": (int, 3),
    "sweep.max_subtasks": (int, 50),
    "sweep.seed": (int, None),

    "replace.strong_classes": (_to_int_tuple, (0, 1, 2)),
    "replace.weak_classes": (_to_int_tuple, (2, 3)),
    "replace.target": (int, 2),
    "replace.weak_hidden": (_to_int_tuple, (8,)),
    "replace.weak_epochs": (int, 60),
    "replace.adapt_epochs": (int, 10),
    "replace.adapt_lr": (float, 0.05),
    "replace.adapt_batch_size": (int, 32),
    "replace.shared_fraction": (float, 0.5),
    "replace.overfit_fraction": (float, 0.1),
    "replace.seed": (int, None),

    "output.dir": (str, "runs/out"),
}

_SEED_KEYS = ("dataset.seed", "model.seed", "train.seed", "sweep.seed",
              "replace.seed")


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        raw[key.strip()] = value.strip()
    return raw


def resolve(path: str | None = None, overrides: list[str] | None = None,
            env: dict | None = None) -> dict[str, Any]:
    """Merge file, --set overrides, and MODA_SEED into a typed config."""
    env = os.environ if env is None else env
    raw: dict[str, str] = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw.update(parse_lines(fh.read(), source=str(path)))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        raw[key.strip()] = value.strip()

    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    cfg: dict[str, Any] = {}
    for key, (caster, default) in SCHEMA.items():
        if key in raw:
            try:
                cfg[key] = caster(raw[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from exc
        else:
            cfg[key] = default

    if "MODA_SEED" in env:
        try:
            cfg["seed"] = int(env["MODA_SEED"])
        except ValueError as exc:
            raise ConfigError(f"MODA_SEED must be an integer: {env['MODA_SEED']!r}") from exc

    for key in _SEED_KEYS:
        if cfg[key] is None:
            cfg[key] = cfg["seed"]
    return cfg


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def write_resolved(cfg: dict[str, Any], path) -> None:
    lines = [f"{key} = {_format_value(cfg[key])}" for key in sorted(cfg)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
