"""Hierarchical YAML configuration with a defaults list and dotted overrides.

A config root looks like::

    configs/
      defaults.yaml        # ordered list of {group: name} entries
      data/synthetic.yaml  # each group file mounts under its group key
      model/resnet50.yaml
      ...

Groups merge in defaults order (later wins on conflicts), then dotted
command-line overrides such as ``model.optimizer.lr=0.00157`` apply on
top. Overrides may only touch keys that already exist after composition;
silent typos are the failure mode this guards against. String scalars of
the form ``${env:VAR}`` are replaced from the environment last.
"""

from __future__ import annotations

import copy
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import yaml

GROUPS = ("data", "model", "trainer", "augmentation", "hpo", "serve", "logger")

_ENV_RE = re.compile(r"^\$\{env:([A-Za-z_][A-Za-z0-9_]*)\}$")


class ConfigError(Exception):
    pass


class MissingGroupFile(ConfigError):
    pass


class ParseError(ConfigError):
    def __init__(self, file: str, detail: str):
        super().__init__(f"{file}: {detail}")
        self.file = file


class UnknownOverridePath(ConfigError):
    pass


class TypeMismatch(ConfigError):
    pass


@dataclass(frozen=True)
class Violation:
    path: str
    value: Any
    constraint: str

    def __str__(self) -> str:
        return f"{self.path} = {self.value!r} violates: {self.constraint}"


def parse_scalar(text: str) -> Any:
    """Override value parsing, precedence int -> float -> bool -> str."""
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; the right side wins on key conflicts."""
    out = dict(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _load_yaml_map(path: Path) -> dict:
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "unknown position"
        raise ParseError(str(path), f"{where}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ParseError(str(path), "top level must be a mapping")
    return data


def read_defaults(config_root: Path | str) -> list[tuple[str, str]]:
    """The ordered (group, name) entries from <root>/defaults.yaml."""
    root = Path(config_root)
    path = root / "defaults.yaml"
    if not path.exists():
        raise MissingGroupFile(str(path))
    data = _load_yaml_map(path)
    entries = data.get("defaults")
    if not isinstance(entries, list):
        raise ParseError(str(path), "expected a 'defaults' list")
    out = []
    for entry in entries:
        if not isinstance(entry, dict) or len(entry) != 1:
            raise ParseError(str(path), f"bad defaults entry: {entry!r}")
        group, name = next(iter(entry.items()))
        out.append((str(group), str(name)))
    return out


def apply_override(node: dict, assignment: str) -> None:
    """Apply one ``a.b.c=value`` assignment in place, strictly typed."""
    if "=" not in assignment:
        raise UnknownOverridePath(f"override needs path=value, got {assignment!r}")
    path, _, raw = assignment.partition("=")
    keys = path.strip().split(".")
    cursor: Any = node
    for key in keys[:-1]:
        if not isinstance(cursor, dict) or key not in cursor:
            raise UnknownOverridePath(path)
        cursor = cursor[key]
    leaf = keys[-1]
    if not isinstance(cursor, dict) or leaf not in cursor:
        raise UnknownOverridePath(path)
    current = cursor[leaf]
    if isinstance(current, (dict, list)):
        raise TypeMismatch(f"{path}: cannot override a non-scalar value")
    value = parse_scalar(raw.strip())
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise TypeMismatch(f"{path}: expected bool, got {value!r}")
    elif isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeMismatch(f"{path}: expected int, got {value!r}")
    elif isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeMismatch(f"{path}: expected number, got {value!r}")
        value = float(value)
    cursor[leaf] = value


def resolve_env(node: Any) -> Any:
    """Substitute ``${env:VAR}`` string scalars from the environment."""
    if isinstance(node, dict):
        return {k: resolve_env(v) for k, v in node.items()}
    if isinstance(node, list):
        return [resolve_env(v) for v in node]
    if isinstance(node, str):
        match = _ENV_RE.match(node)
        if match:
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} is not set")
            return parse_scalar(os.environ[name])
    return node


def compose(config_root: Path | str,
            defaults: Sequence[tuple[str, str]] | None = None,
            overrides: Iterable[str] = ()) -> dict:
    """Compose group files in defaults order, then apply dotted overrides."""
    root = Path(config_root)
    if defaults is None:
        defaults = read_defaults(root)
    node: dict = {}
    for group, name in defaults:
        path = root / group / f"{name}.yaml"
        if not path.exists():
            raise MissingGroupFile(str(path))
        node = deep_merge(node, {group: _load_yaml_map(path)})
    for assignment in overrides:
        apply_override(node, assignment)
    return resolve_env(node)


def serialize(node: dict) -> str:
    return yaml.safe_dump(node, sort_keys=True, default_flow_style=False)


def _get(node: dict, path: str) -> tuple[bool, Any]:
    cursor: Any = node
    for key in path.split("."):
        if not isinstance(cursor, dict) or key not in cursor:
            return False, None
        cursor = cursor[key]
    return True, cursor


def _check(violations: list[Violation], node: dict, path: str, constraint: str,
           predicate, required: bool = False) -> None:
    present, value = _get(node, path)
    if not present:
        if required:
            violations.append(Violation(path, None, "required field is missing"))
        return
    try:
        ok = predicate(value)
    except TypeError:
        ok = False
    if not ok:
        violations.append(Violation(path, value, constraint))


def validate(node: dict) -> list[Violation]:
    """Range-check a composed configuration; violations are data, not errors.

    Base rules always apply; when the node carries an ``hpo`` section the
    tuned parameters must additionally lie inside the search bounds they
    were (or will be) optimized over.
    """
    from .backbones import BACKBONE_NAMES
    from .trainer import VALID_BATCH_SIZES

    v: list[Violation] = []
    is_num = lambda x: isinstance(x, (int, float)) and not isinstance(x, bool)
    is_int = lambda x: isinstance(x, int) and not isinstance(x, bool)

    _check(v, node, "model.name", f"one of {BACKBONE_NAMES}",
           lambda x: x in BACKBONE_NAMES, required=True)
    _check(v, node, "model.optimizer.name", "adam or sgd",
           lambda x: x in ("adam", "sgd"), required=True)
    _check(v, node, "model.optimizer.lr", "> 0",
           lambda x: is_num(x) and x > 0, required=True)
    _check(v, node, "model.optimizer.weight_decay", ">= 0",
           lambda x: is_num(x) and x >= 0, required=True)
    _check(v, node, "model.net.dropout_value", "in [0, 1)",
           lambda x: is_num(x) and 0 <= x < 1, required=True)
    _check(v, node, "model.scheduler.patience", "integer >= 1",
           lambda x: is_int(x) and x >= 1, required=True)
    _check(v, node, "model.scheduler.factor", "in (0, 1)",
           lambda x: is_num(x) and 0 < x < 1, required=True)
    _check(v, node, "data.batch_size", f"one of {VALID_BATCH_SIZES}",
           lambda x: x in VALID_BATCH_SIZES, required=True)
    _check(v, node, "trainer.epochs", "integer >= 1",
           lambda x: is_int(x) and x >= 1, required=True)

    if "hpo" in node:
        from .hpo import define_space
        bounds = {p.name: p for p in define_space().params}
        tuned = {
            "model.net.dropout_value": bounds["dropout"],
            "model.optimizer.lr": bounds["lr"],
            "model.optimizer.weight_decay": bounds["weight_decay"],
            "model.scheduler.patience": bounds["scheduler_patience"],
            "model.scheduler.factor": bounds["scheduler_factor"],
        }
        for path, spec in tuned.items():
            low, high = spec.domain
            _check(v, node, path, f"in tuning range [{low}, {high}]",
                   lambda x, lo=low, hi=high: is_num(x) and lo <= x <= hi)
    return v
