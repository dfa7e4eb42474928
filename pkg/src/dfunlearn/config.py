"""Experiment configuration files.

Format: UTF-8 ``key = value`` lines, ``#`` starts a comment, ``[section]``
headers.  Root keys (before any header) are ``output_dir`` and ``seeds``.
Lists are comma-separated; ``forget_classes`` takes several class sets
separated by ``;``.  Unknown keys and sections are errors, and every path
must exist when the file is loaded.  Relative paths resolve against the
config file's directory.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from .data import BlobSpec
from .engine import SupervisedConfig, TrainConfig
from .errors import ConfigError
from .evaluation import RelearnConfig, ShadowConfig
from .losses import LabelSplit

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(",") if p.strip())


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s: str) -> float | None:
    return None if s.lower() in ("", "auto", "none") else float(s)


def _range(s: str) -> tuple[float, float] | None:
    if s.lower() in ("", "auto"):
        return None
    vals = _floats(s)
    if len(vals) != 2 or not vals[0] < vals[1]:
        raise ValueError(f"expected 'lo, hi' with lo < hi, got {s!r}")
    return vals


def _names(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _forget_sets(s: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_ints(part) for part in s.split(";") if part.strip())


def _path(s: str) -> str:
    return s


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "": {
        "output_dir": (_path, "runs"),
        "seeds": (_ints, (1, 2, 3)),
    },
    "data": {
        "source": (str, "blobs"),
        "num_classes": (int, 5),
        "dim": (int, 2),
        "sigma": (float, 0.5),
        "radius": (float, 3.0),
        "n_train": (int, 400),
        "n_test": (int, 200),
        "seed": (int, 0),
        "normalize": (_bool, False),
        "train_images": (_path, ""),
        "train_labels": (_path, ""),
        "test_images": (_path, ""),
        "test_labels": (_path, ""),
    },
    "teacher": {
        "hidden": (_ints, (64, 64)),
        "epochs": (int, 30),
        "lr": (float, 0.05),
        "batch_size": (int, 64),
        "momentum": (float, 0.9),
        "weight_decay": (float, 0.0),
        "milestones": (_ints, ()),
        "gamma": (float, 0.1),
        "seed": (int, 0),
    },
    "unlearn": {
        "methods": (_names, ("ISPF",)),
        "forget_classes": (_forget_sets, ((0,),)),
        "epochs": (int, 60),
        "loops_per_epoch": (int, 1),
        "n_g": (int, 1),
        "n_s": (int, 10),
        "lr_g": (float, 1e-3),
        "lr_s": (float, 0.05),
        "batch_size": (int, 128),
        "milestones": (_ints, ()),
        "gamma": (float, 0.1),
        "delta": (_opt_float, None),
        "balance_weight": (float, 0.0),
        "noise_dim": (int, 8),
        "generator_hidden": (_ints, (64, 64)),
        "student_momentum": (float, 0.9),
        "x_range": (_range, None),
    },
    "eval": {
        "relearn_lr": (float, 0.01),
        "relearn_max_steps": (int, 500),
        "margin": (float, 0.05),
        "eval_every": (int, 1),
        "relearn_batch_size": (int, 32),
        "mia_ii": (_bool, True),
        "n_shadow": (int, 4),
        "attack_hidden": (int, 32),
        "attack_epochs": (int, 40),
        "attack_lr": (float, 1e-2),
        "attack_batch_size": (int, 64),
        "val_fraction": (float, 0.2),
    },
}

PATH_KEYS = {("", "output_dir"), ("data", "train_images"), ("data", "train_labels"),
             ("data", "test_images"), ("data", "test_labels")}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, dict[str, Any]]
    raw: dict[str, dict[str, str]] = field(default_factory=dict)
    source: str = "<string>"

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    # -- typed views ---------------------------------------------------------

    @property
    def output_dir(self) -> Path:
        env = os.environ.get("ULRN_OUT")
        return Path(env) if env else Path(self.get("", "output_dir"))

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.get("", "seeds")

    @property
    def methods(self) -> tuple[str, ...]:
        return self.get("unlearn", "methods")

    @property
    def forget_sets(self) -> tuple[tuple[int, ...], ...]:
        return self.get("unlearn", "forget_classes")

    def blob_spec(self) -> BlobSpec:
        d = self.values["data"]
        return BlobSpec(d["num_classes"], d["dim"], d["sigma"], d["radius"],
                        d["n_train"], d["n_test"], d["seed"])

    def teacher_config(self) -> SupervisedConfig:
        t = self.values["teacher"]
        return SupervisedConfig(t["epochs"], t["lr"], t["batch_size"], t["momentum"],
                                t["weight_decay"], t["milestones"], t["gamma"], t["seed"])

    def train_config(self, method: str, seed: int,
                     x_range: tuple[float, float] | None = None) -> TrainConfig:
        u = self.values["unlearn"]
        rng = u["x_range"] or x_range
        if rng is None:
            raise ConfigError("x_range is 'auto' but no data range was supplied")
        return TrainConfig(
            epochs=u["epochs"], loops_per_epoch=u["loops_per_epoch"], n_g=u["n_g"],
            n_s=u["n_s"], lr_g=u["lr_g"], lr_s=u["lr_s"], batch_size=u["batch_size"],
            milestones=u["milestones"], gamma=u["gamma"], seed=seed, method=method,
            delta=u["delta"], balance_weight=u["balance_weight"], noise_dim=u["noise_dim"],
            generator_hidden=u["generator_hidden"], student_momentum=u["student_momentum"],
            x_range=tuple(rng))

    def relearn_config(self, seed: int = 0) -> RelearnConfig:
        e = self.values["eval"]
        return RelearnConfig(e["relearn_lr"], e["relearn_max_steps"], e["margin"],
                             e["eval_every"], e["relearn_batch_size"], seed=seed)

    def shadow_config(self) -> ShadowConfig:
        e = self.values["eval"]
        return ShadowConfig(e["n_shadow"], e["attack_hidden"], e["attack_epochs"],
                            e["attack_lr"], e["attack_batch_size"], e["val_fraction"])

    def split(self, num_classes: int, forget) -> LabelSplit:
        return LabelSplit(num_classes, tuple(forget))

    # -- hashing ---------------------------------------------------------------

    def canonical_lines(self, sections=("", "data", "teacher", "unlearn", "eval")) -> list[str]:
        """``section.key=value`` for every key (defaults included), sorted."""
        lines = []
        for sec in sections:
            for key, val in self.values[sec].items():
                lines.append(f"{sec}.{key}={_canon(val)}")
        return sorted(lines)

    def hash(self, sections=("", "data", "teacher", "unlearn", "eval"), extra: str = "") -> str:
        blob = "\n".join(self.canonical_lines(sections)) + "\n" + extra
        return f"{fnv1a64(blob.encode('utf-8')):016x}"

    def validate(self) -> None:
        """Cross-field checks that need the whole file."""
        if self.get("data", "source") == "blobs":
            self.blob_spec()
        self.teacher_config()
        for m in self.methods:
            self.train_config(m, 0, (0.0, 1.0))
        self.relearn_config()
        self.shadow_config()
        if not self.seeds:
            raise ConfigError(f"{self.source}: seeds must list at least one seed")
        if not self.methods:
            raise ConfigError(f"{self.source}: unlearn.methods must list at least one method")
        if not self.forget_sets:
            raise ConfigError(f"{self.source}: unlearn.forget_classes is empty")
        src = self.get("data", "source")
        if src not in ("blobs", "idx"):
            raise ConfigError(f"{self.source}: data.source must be 'blobs' or 'idx', got {src!r}")
        if src == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not self.get("data", key):
                    raise ConfigError(f"{self.source}: data.{key} is required for idx data")


def _canon(val: Any) -> str:
    if isinstance(val, tuple):
        if val and isinstance(val[0], tuple):
            return ";".join(_canon(v) for v in val)
        return ",".join(_canon(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    if val is None:
        return "auto"
    return str(val)


def parse_config(text: str, source: str = "<string>", base_dir: Path | None = None) -> ExperimentConfig:
    raw: dict[str, dict[str, str]] = {sec: {} for sec in SCHEMA}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA or section == "":
                raise ConfigError(f"{where}: unknown section [{section}]; "
                                  f"expected one of {', '.join(s for s in SCHEMA if s)}")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA[section]:
            label = f"[{section}]" if section else "the top level"
            raise ConfigError(f"{where}: unknown key {key!r} in {label}; "
                              f"valid keys: {', '.join(SCHEMA[section])}")
        if key in raw[section]:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        raw[section][key] = val

    values: dict[str, dict[str, Any]] = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (conv, default) in keys.items():
            if key not in raw[sec]:
                values[sec][key] = default
                continue
            try:
                values[sec][key] = conv(raw[sec][key])
            except ValueError as exc:
                name = f"{sec}.{key}" if sec else key
                raise ConfigError(f"{source}: bad value for {name}: {exc}") from None

    for sec, key in PATH_KEYS:
        val = values[sec][key]
        if not val:
            continue
        p = Path(val)
        if not p.is_absolute() and base_dir is not None:
            p = Path(os.path.normpath(base_dir / p))
        values[sec][key] = str(p)
        if key != "output_dir" and not p.exists():
            raise ConfigError(f"{source}: {sec}.{key} path does not exist: {p}")

    cfg = ExperimentConfig(values, raw, source)
    try:
        cfg.validate()
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(source) else f"{source}: {msg}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path), path.parent)


def with_overrides(cfg: ExperimentConfig, **section_values: dict[str, Any]) -> ExperimentConfig:
    """Copy of ``cfg`` with typed values replaced, e.g. ``unlearn={"epochs": 2}``."""
    values = {sec: dict(v) for sec, v in cfg.values.items()}
    for sec, kv in section_values.items():
        sec = "" if sec == "root" else sec
        for k, v in kv.items():
            if k not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {k!r} in section {sec!r}")
            values[sec][k] = v
    return replace(cfg, values=values)
