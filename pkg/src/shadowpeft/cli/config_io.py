"""TOML run configs with dotted-key overrides."""
from __future__ import annotations

import os
import sys

from ..config import ConfigError, RunConfig, default_config

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "SHADOWPEFT_SEED"


def parse_value(text: str):
    """Interpret ``text`` as a TOML value, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(data: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError([f"override {assignment!r} is not of the form key=value"])
    key, _, raw = assignment.partition("=")
    parts = key.strip().split(".")
    node = data
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ConfigError([f"override {key!r}: {part!r} is not a section"])
        node = nxt
    node[parts[-1]] = parse_value(raw.strip())


def _merge(into: dict, over: dict) -> dict:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(into.get(k), dict):
            _merge(into[k], v)
        else:
            into[k] = v
    return into


def load_run_config(path=None, overrides=(), seed=None, method=None, inference_mode=None,
                    f32: bool = False, env=None) -> RunConfig:
    """File, then ``--set`` overrides, then the seed env var, then explicit flags.

    Defaults come from the task named in the merged user settings, so a file
    that only says ``task.name = "parity_cls"`` gets the parity defaults.
    """
    env = os.environ if env is None else env
    user: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                user = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError([f"{path}: {exc}"]) from exc
    for item in overrides:
        apply_override(user, item)
    if env.get(SEED_ENV):
        apply_override(user, f"seed={env[SEED_ENV]}")
    if seed is not None:
        user["seed"] = seed
    if method is not None:
        user["method"] = method
    if inference_mode is not None:
        user["inference_mode"] = inference_mode
    if f32:
        user.setdefault("train", {})["f32"] = True
    task = user.get("task", {}).get("name", "copy_lm") if isinstance(user.get("task"), dict) else "copy_lm"
    base = default_config(task if task in ("copy_lm", "modadd_lm", "parity_cls") else "copy_lm").to_dict()
    return RunConfig.from_dict(_merge(base, user)).validate()
