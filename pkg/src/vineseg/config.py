"""Run configuration read from ``key = value`` files.

Recognised keys (defaults in parentheses):

==================  =============================================================
mode                supervised | unsupervised (supervised)
data_dir            dataset root with images/ and trimaps/ (required)
checkpoint          output checkpoint path (none: not written)
report              per-epoch report path (none: not written)
arch                unet | xception (unet)
block               dense_double | separable_double (dense_double)
skip_merge          add | concat (add)
filters             comma-separated encoder widths (16,32,64)
height, width       network input size; images are resized to it (64, 64)
num_classes         ground-truth classes; 2 merges veins into blade (3)
epochs              training epochs (50)
batch_size          images per step (4)
seed                init / shuffle / augmentation seed (0)
lr                  Adam learning rate (0.001)
class_weights       on | off, inverse-frequency weighting (on)
fcm_clusters        clusters of the unsupervised model (3)
fcm_q               fuzzifier (2.0)
fcm_centroid_grad   detached | flow (detached)
fcm_feature         rgb | intensity (rgb)
sigmoid_correction  on | off (off)
sigmoid_gain        (10.0)
sigmoid_cutoff      (0.5)
augment_copies      augmented copies per training image (0)
max_rotation_deg    (30.0)
zoom_min, zoom_max  (0.8, 1.2)
split_train         training sources (12)
split_valid         validation sources (4)
split_test          test sources (4)
split_seed          (0)
==================  =============================================================

Relative paths resolve against the directory of the config file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .arch import BLOCKS, SKIP_MERGES, SpecError, UNetSpec
from .data import AugmentParams, SplitSpec
from .kvfile import KVSyntaxError, format_value, parse_kv
from .loss import FcmConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[tuple[Optional[int], str]], source: str = "<config>"):
        self.problems = problems
        lines = []
        for line, text in problems:
            lines.append(f"{source}:{line}: {text}" if line else f"{source}: {text}")
        super().__init__("\n".join(lines))


def _choice(*options):
    def conv(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return raw
    return conv


def _switch(raw: str) -> bool:
    low = raw.lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ValueError("expected on or off")


def _int_list(raw: str) -> tuple:
    try:
        vals = tuple(int(v) for v in raw.split(","))
    except ValueError:
        raise ValueError("expected comma-separated integers") from None
    return vals


def _path(raw: str) -> str:
    if not raw:
        raise ValueError("empty path")
    return raw


@dataclass
class RunConfig:
    mode: str = "supervised"
    data_dir: str = ""
    checkpoint: str = ""
    report: str = ""
    arch: str = "unet"
    block: str = "dense_double"
    skip_merge: str = "add"
    filters: tuple = (16, 32, 64)
    height: int = 64
    width: int = 64
    num_classes: int = 3
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-3
    class_weights: bool = True
    fcm_clusters: int = 3
    fcm_q: float = 2.0
    fcm_centroid_grad: str = "detached"
    fcm_feature: str = "rgb"
    sigmoid_correction: bool = False
    sigmoid_gain: float = 10.0
    sigmoid_cutoff: float = 0.5
    augment_copies: int = 0
    max_rotation_deg: float = 30.0
    zoom_min: float = 0.8
    zoom_max: float = 1.2
    split_train: int = 12
    split_valid: int = 4
    split_test: int = 4
    split_seed: int = 0
    base_dir: str = field(default=".", metadata={"echo": False})

    # -- derived views ---------------------------------------------------
    @property
    def output_channels(self) -> int:
        return self.num_classes if self.mode == "supervised" else self.fcm_clusters

    def unet_spec(self) -> UNetSpec:
        return UNetSpec((3, self.height, self.width), self.filters, self.block, self.skip_merge,
                        self.output_channels)

    def fcm(self) -> FcmConfig:
        return FcmConfig(self.fcm_clusters, self.fcm_q, self.fcm_centroid_grad, self.fcm_feature)

    def augment_params(self) -> AugmentParams:
        return AugmentParams(self.max_rotation_deg, (self.zoom_min, self.zoom_max))

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.split_train, self.split_valid, self.split_test, self.split_seed)

    def resolve(self, value: str) -> Optional[Path]:
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    # -- validation ------------------------------------------------------
    def semantic_problems(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.num_classes < 2:
            out.append("num_classes must be >= 2")
        if self.num_classes > 3:
            out.append("num_classes above 3 has no trimap meaning (labels are 0, 1, 2)")
        if self.lr <= 0:
            out.append("lr must be positive")
        if self.augment_copies < 0:
            out.append("augment_copies must be >= 0")
        if min(self.split_train, self.split_valid, self.split_test) < 0:
            out.append("split counts must be >= 0")
        if self.split_train < 1:
            out.append("split_train must be >= 1")
        if self.mode == "supervised" and self.split_valid < 1:
            out.append("supervised training needs split_valid >= 1 for checkpoint selection")
        if self.sigmoid_gain <= 0:
            out.append("sigmoid_gain must be positive")
        if not 0 <= self.sigmoid_cutoff <= 1:
            out.append("sigmoid_cutoff must lie in [0, 1]")
        if self.arch == "xception" and self.block != "separable_double":
            out.append("arch = xception requires block = separable_double")
        for what, build in (("architecture", self.unet_spec), ("fcm", self.fcm), ("augmentation", self.augment_params)):
            try:
                build()
            except (SpecError, ValueError) as exc:
                out.append(f"{what}: {exc}")
        if self.mode == "unsupervised" and self.fcm_clusters < self.num_classes:
            out.append(f"fcm_clusters ({self.fcm_clusters}) must be >= num_classes ({self.num_classes}) for evaluation")
        return out

    def path_problems(self) -> list[str]:
        out = []
        data = self.resolve(self.data_dir)
        if data is None:
            out.append("data_dir is required")
        elif not data.is_dir():
            out.append(f"data_dir {data} does not exist")
        for key in ("checkpoint", "report"):
            p = self.resolve(getattr(self, key))
            if p is not None and not p.parent.is_dir():
                out.append(f"{key}: directory {p.parent} does not exist")
        return out

    def check_runnable(self, mode: str) -> None:
        problems = [(None, t) for t in self.semantic_problems() + self.path_problems()]
        if self.mode != mode:
            problems.insert(0, (None, f"config mode is {self.mode!r}, expected {mode!r}"))
        if problems:
            raise ConfigError(problems)

    # -- serialisation ---------------------------------------------------
    def echo(self) -> dict:
        return {f.name: format_value(getattr(self, f.name)) for f in dataclasses.fields(self)
                if f.metadata.get("echo", True)}

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_CONVERTERS = {
    "mode": _choice("supervised", "unsupervised"),
    "data_dir": _path,
    "checkpoint": str,
    "report": str,
    "arch": _choice("unet", "xception"),
    "block": _choice(*BLOCKS),
    "skip_merge": _choice(*SKIP_MERGES),
    "filters": _int_list,
    "height": int,
    "width": int,
    "num_classes": int,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "lr": float,
    "class_weights": _switch,
    "fcm_clusters": int,
    "fcm_q": float,
    "fcm_centroid_grad": _choice("detached", "flow"),
    "fcm_feature": _choice("rgb", "intensity"),
    "sigmoid_correction": _switch,
    "sigmoid_gain": float,
    "sigmoid_cutoff": float,
    "augment_copies": int,
    "max_rotation_deg": float,
    "zoom_min": float,
    "zoom_max": float,
    "split_train": int,
    "split_valid": int,
    "split_test": int,
    "split_seed": int,
}
CONFIG_KEYS = tuple(_CONVERTERS)


def config_from_entries(entries, source: str = "<config>", base_dir=".") -> RunConfig:
    """Build a config from ``(line, key, raw)`` triples, reporting every problem at once."""
    values, problems = {}, []
    for line, key, raw in entries:
        conv = _CONVERTERS.get(key)
        if conv is None:
            problems.append((line, f"unknown key {key!r}"))
            continue
        try:
            values[key] = conv(raw)
        except ValueError as exc:
            problems.append((line, f"{key}: invalid value {raw!r} ({exc})"))
    if problems:
        raise ConfigError(problems, source)
    cfg = RunConfig(**values, base_dir=str(base_dir))
    semantic = cfg.semantic_problems()
    if semantic:
        raise ConfigError([(None, t) for t in semantic], source)
    return cfg


def parse_config(text: str, source: str = "<config>", base_dir=".") -> RunConfig:
    try:
        entries = parse_kv(text, source)
    except KVSyntaxError as exc:
        raise ConfigError(exc.problems, source) from None
    return config_from_entries(entries, source, base_dir)


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([(None, f"cannot read config: {exc}")], str(path)) from None
    try:
        entries = parse_kv(text, str(path))
    except KVSyntaxError as exc:
        raise ConfigError(exc.problems, str(path)) from None
    if overrides:
        merged = {k: (line, k, v) for line, k, v in entries}
        for k, v in overrides.items():
            merged[k] = (None, k, v)
        entries = list(merged.values())
    return config_from_entries(entries, str(path), base_dir=path.parent)


def config_from_echo(echo: dict) -> RunConfig:
    """Rebuild the config stored in a checkpoint (paths are not checked)."""
    return config_from_entries([(None, k, v) for k, v in echo.items()], "<checkpoint config>")


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.echo().items())
