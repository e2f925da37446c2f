"""Run configuration: an INI file with five sections, profiles and flag overrides.

Grammar
-------
The file is read by :mod:`configparser` (``key = value`` lines under
``[section]`` headers, ``#`` or ``;`` comments).  Sections and keys are
fixed by :data:`SCHEMA`; anything else is an error.  Values:

* ``int`` / ``float``: python literals (``2e-3`` is fine)
* ``bool``: ``true``/``false``/``yes``/``no``/``1``/``0``
* ``optional int``: an integer or an empty value for "automatic"
* ``ratios``: three colon-separated numbers, e.g. ``1:1:2``

Precedence, lowest first: built-in defaults, ``--profile``, the run
directory's saved ``config.ini`` (for commands that reuse a run), the
``--config`` file, then individual flags (``--set section.key=value`` and the
named shortcuts).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from typing import Any, Callable

from .tensor import ContractError


class ConfigError(ContractError):
    """One or more configuration values are missing, unknown or invalid."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip() == "" else int(text)


def _opt_float(text: str) -> float | None:
    return None if text.strip() == "" else float(text)


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(":")]
    if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise ValueError(f"expected three non-negative ratios like 1:1:2, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {list(options)}, got {text!r}")
        return t

    return parse


def _text(text: str) -> str:
    return text.strip()


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: str
    doc: str


SCHEMA: dict[str, dict[str, Field]] = {
    "data": {
        "root": Field(_text, "", "image folder with one sub-directory per class; empty means synthetic data"),
        "synth_classes": Field(int, "2", "classes of the synthetic dataset"),
        "synth_per_class": Field(int, "32", "synthetic images per class"),
        "synth_size": Field(int, "80", "side of the synthetic images"),
        "synth_seed": Field(int, "0", "seed of the synthetic dataset"),
        "split": Field(_ratios, "1:1:2", "train:val:test ratios over source images"),
        "split_seed": Field(int, "0", "seed of the split"),
        "balance": Field(_bool, "true", "subsample classes to the smallest one before splitting"),
        "augment": Field(_bool, "true", "expand every split with its six flips and rotations"),
        "patch": Field(int, "0", "tile sources into patch x patch crops first; 0 disables"),
    },
    "model": {
        "scale": Field(_choice("paper", "desk"), "paper", "paper (224 input, full widths) or desk"),
        "optimization": Field(_choice("dropout", "dropconnect"), "dropout", "optimization layer"),
        "p": Field(float, "0.5", "drop probability of the optimization layer"),
        "dtype": Field(_choice("fp32", "fp16", "fp64"), "fp32", "parameter storage dtype"),
        "seed": Field(int, "0", "initialization seed"),
        "input_size": Field(_opt_int, "", "input side; empty uses the scale's default"),
        "divisor": Field(_opt_int, "", "channel divisor; empty uses the scale's default"),
        "heads": Field(int, "4", "attention heads"),
        "eq1_literal": Field(_bool, "false", "leave attention logits unscaled"),
        "dropconnect_samples": Field(int, "16", "Gaussian draws at dropconnect inference"),
        "normalize_input": Field(_bool, "true", "standardize each input channel"),
    },
    "train": {
        "epochs": Field(int, "75", "training epochs"),
        "batch": Field(int, "16", "batch size"),
        "lr": Field(float, "2e-3", "initial learning rate"),
        "eps": Field(float, "1e-8", "AdamW epsilon"),
        "beta1": Field(float, "0.9", "AdamW first-moment decay"),
        "beta2": Field(float, "0.999", "AdamW second-moment decay"),
        "weight_decay": Field(float, "1e-2", "decoupled weight decay"),
        "plateau_patience": Field(int, "15", "epochs without improvement before the rate drops"),
        "plateau_factor": Field(float, "0.1", "learning-rate multiplier on a plateau"),
        "seed": Field(int, "0", "shuffling seed"),
    },
    "attack": {
        "kinds": Field(_text, "all", "comma-separated perturbation kinds, or 'all'"),
        "levels": Field(_text, "paper", "comma-separated epsilons, or 'paper' for the nine standard levels"),
        "split": Field(_choice("train", "val", "test"), "test", "split to perturb"),
        "pgd_steps": Field(int, "10", "pgd iterations"),
        "pgd_step_size": Field(_opt_float, "", "pgd step; empty means epsilon / 4"),
        "deepfool_max_iters": Field(int, "50", "DeepFool iteration cap"),
        "deepfool_overshoot": Field(float, "0.02", "DeepFool overshoot"),
        "erlang_k": Field(int, "2", "Erlang shape"),
        "seed": Field(int, "0", "noise seed"),
        "debug": Field(_bool, "false", "prepend an epsilon = 0 column"),
    },
    "output": {
        "dir": Field(_text, "runs/gashis", "directory receiving every artifact"),
    },
}

PROFILES: dict[str, dict[str, dict[str, str]]] = {
    "paper": {},
    "desk": {
        "model": {"scale": "desk"},
        "train": {"epochs": "30"},
    },
}


class RunConfig:
    """Parsed configuration, indexed as ``cfg["section"]["key"]``."""

    def __init__(self, raw: dict[str, dict[str, str]]):
        self.raw = {s: dict(v) for s, v in raw.items()}
        problems: list[str] = []
        self.values: dict[str, dict[str, Any]] = {}
        for section, fields in SCHEMA.items():
            self.values[section] = {}
            for key, f in fields.items():
                text = self.raw[section][key]
                try:
                    self.values[section][key] = f.parse(text)
                except (ValueError, TypeError) as exc:
                    problems.append(f"[{section}] {key} = {text!r}: {exc}")
        if problems:
            raise ConfigError(problems)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section in SCHEMA:
            cp[section] = self.raw[section]
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def echo(self) -> dict[str, dict[str, str]]:
        return {s: dict(v) for s, v in self.raw.items()}


def defaults() -> dict[str, dict[str, str]]:
    return {s: {k: f.default for k, f in fields.items()} for s, fields in SCHEMA.items()}


def _merge(base: dict[str, dict[str, str]], layer: dict[str, dict[str, str]], origin: str, problems: list[str]) -> None:
    for section, values in layer.items():
        if section not in SCHEMA:
            problems.append(f"{origin}: unknown section [{section}]")
            continue
        for key, value in values.items():
            if key not in SCHEMA[section]:
                problems.append(f"{origin}: unknown key [{section}] {key}")
                continue
            base[section][key] = value


def read_ini(text: str, origin: str, problems: list[str]) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        problems.append(f"{origin}: {exc}")
        return {}
    return {s: dict(cp[s]) for s in cp.sections()}


def parse_overrides(items: list[str], problems: list[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            problems.append(f"--set {item!r}: expected section.key=value")
            continue
        out.setdefault(section, {})[name] = value.strip()
    return out


def resolve(
    profile: str = "paper",
    layers: list[tuple[str, str]] = (),
    overrides: dict[str, dict[str, str]] | None = None,
    flag_items: list[str] = (),
) -> RunConfig:
    """Apply defaults, profile, INI ``layers`` (origin, text) and flags; report every problem at once."""
    problems: list[str] = []
    raw = defaults()
    if profile not in PROFILES:
        problems.append(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    else:
        _merge(raw, PROFILES[profile], f"profile {profile}", problems)
    for origin, text in layers:
        _merge(raw, read_ini(text, origin, problems), origin, problems)
    _merge(raw, parse_overrides(list(flag_items), problems), "--set", problems)
    if overrides:
        _merge(raw, overrides, "flags", problems)
    try:
        cfg = RunConfig(raw)
    except ConfigError as exc:
        problems.extend(exc.problems)
        cfg = None
    if problems:
        raise ConfigError(problems)
    return cfg  # type: ignore[return-value]


def describe() -> str:
    """Every key with its default, as an annotated INI file."""
    lines = []
    for section, fields in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, f in fields.items():
            lines.append(f"# {f.doc}")
            lines.append(f"{key} = {f.default}")
        lines.append("")
    return "\n".join(lines)
