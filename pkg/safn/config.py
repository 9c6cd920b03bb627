"""Run configuration: one JSON document, dotted overrides, a resolved snapshot per run.

Layout of the JSON document (every section and key optional)::

    {
      "seed": 0,
      "output_dir": "runs/demo",
      "data": {"data_dir": "data/"},
      "synthetic": {"n_pd": 570, "widths": {"clinical": 409}, "signals": {"clinical": {"effect_size": 1.5}}},
      "model": {"d_model": 64}, "loss": {...}, "optim": {...}, "cv": {...}, "mlp": {...},
      "attribution": {"top_k": 20}, "stats": {"q": 0.1},
      "ablations": ["SAFN (full)", "SAFN w/o gates"]
    }

The master ``seed`` is copied into ``synthetic.seed``, ``cv.seed`` and
``optim.seed`` unless a section sets its own.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping

from safn.baselines import MlpBaselineConfig
from safn.core import DataError, UsageError, parse_modality
from safn.data import DATA_NAME, MANIFEST_NAME
from safn.model import SafnConfig
from safn.objective import LossConfig
from safn.optim import OptimConfig
from safn.synthetic import ModalitySignal, SyntheticConfig
from safn.training import CvConfig
from safn.utils.serialization import to_jsonable

logger = logging.getLogger(__name__)

OUTPUT_ENV = "SAFN_OUTPUT_DIR"
DEFAULT_OUTPUT = "safn-output"
RESOLVED_NAME = "resolved_config.json"


@dataclass(frozen=True)
class DataPaths:
    data_dir: str | None = None
    csv: str | None = None
    manifest: str | None = None

    def resolve(self) -> tuple[Path, Path]:
        """(csv path, manifest path); explicit paths win over ``data_dir``."""
        base = Path(self.data_dir) if self.data_dir else None
        csv = Path(self.csv) if self.csv else (base / DATA_NAME if base else None)
        manifest = Path(self.manifest) if self.manifest else (base / MANIFEST_NAME if base else None)
        if csv is None or manifest is None:
            raise UsageError("No dataset given; set data.data_dir or both data.csv and data.manifest")
        return csv, manifest


@dataclass(frozen=True)
class AttributionSettings:
    top_k: int = 20
    target: Literal["probability", "logit"] = "probability"
    chunk_size: int = 32

    def __post_init__(self) -> None:
        if self.top_k < 1 or self.chunk_size < 1:
            raise UsageError("top_k and chunk_size must be positive")
        if self.target not in ("probability", "logit"):
            raise UsageError(f"Unknown attribution target '{self.target}'")


@dataclass(frozen=True)
class StatsSettings:
    q: float = 0.10
    first_visit_only: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.q < 1.0:
            raise UsageError(f"q must lie in (0, 1), got {self.q}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = DEFAULT_OUTPUT
    data: DataPaths = field(default_factory=DataPaths)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: SafnConfig = field(default_factory=SafnConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    cv: CvConfig = field(default_factory=CvConfig)
    mlp: MlpBaselineConfig = field(default_factory=MlpBaselineConfig)
    attribution: AttributionSettings = field(default_factory=AttributionSettings)
    stats: StatsSettings = field(default_factory=StatsSettings)
    ablations: tuple[str, ...] | None = None

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict[str, Any]:
        return to_jsonable(self)


_SECTIONS: dict[str, type] = {
    "data": DataPaths,
    "synthetic": SyntheticConfig,
    "model": SafnConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "cv": CvConfig,
    "mlp": MlpBaselineConfig,
    "attribution": AttributionSettings,
    "stats": StatsSettings,
}
_SEEDED = ("synthetic", "optim", "cv")
_TOP_LEVEL = {"seed", "output_dir", "ablations", *_SECTIONS}


def _field_names(cls: type) -> set[str]:
    return {f.name for f in dataclasses.fields(cls) if f.init}


def _coerce_section(name: str, values: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(values)
    if name == "synthetic":
        if "widths" in out:
            out["widths"] = {parse_modality(k): int(v) for k, v in out["widths"].items()}
        if "signals" in out:
            defaults = SyntheticConfig().signals
            signals = dict(defaults)
            for key, signal in out["signals"].items():
                modality = parse_modality(key)
                if isinstance(signal, ModalitySignal):
                    signals[modality] = signal
                    continue
                unknown = set(signal) - _field_names(ModalitySignal)
                if unknown:
                    raise UsageError(f"Unknown key(s) in synthetic.signals.{key}: {', '.join(sorted(unknown))}")
                signals[modality] = dataclasses.replace(defaults[modality], **signal)
            out["signals"] = signals
    if name == "mlp" and "hidden" in out:
        out["hidden"] = tuple(int(h) for h in out["hidden"])
    return out


def config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    """Build a validated :class:`RunConfig`; unknown keys raise :class:`UsageError`."""
    unknown = set(raw) - _TOP_LEVEL
    if unknown:
        raise UsageError(f"Unknown config key(s): {', '.join(sorted(unknown))}")
    seed = int(raw.get("seed", 0))
    sections: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        values = raw.get(name) or {}
        if not isinstance(values, Mapping):
            raise UsageError(f"Config section '{name}' must be an object")
        bad = set(values) - _field_names(cls)
        if bad:
            raise UsageError(f"Unknown key(s) in '{name}': {', '.join(sorted(bad))}")
        values = _coerce_section(name, values)
        if name in _SEEDED and "seed" not in values:
            values["seed"] = seed
        try:
            sections[name] = cls(**values)
        except TypeError as e:
            raise UsageError(f"Invalid '{name}' section: {e}") from e
    ablations = raw.get("ablations")
    return RunConfig(
        seed=seed,
        output_dir=str(raw.get("output_dir") or os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)),
        ablations=None if ablations is None else tuple(str(a) for a in ablations),
        **sections,
    )


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: Mapping[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` assignments; values parse as JSON, falling back to plain strings."""
    merged: dict[str, Any] = json.loads(json.dumps(raw))
    for item in overrides:
        path, sep, value = item.partition("=")
        if not sep or not path:
            raise UsageError(f"Override '{item}' is not of the form key=value")
        keys = path.strip().split(".")
        target = merged
        for key in keys[:-1]:
            nxt = target.setdefault(key, {})
            if not isinstance(nxt, dict):
                raise UsageError(f"Override '{item}' descends into non-object '{key}'")
            target = nxt
        target[keys[-1]] = _parse_value(value.strip())
    return merged


def load_config_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"Config file {p} does not exist")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"Config file {p} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise UsageError(f"Config file {p} must contain a JSON object")
    return data


def resolve_config(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    **flags: Any,
) -> RunConfig:
    """File, then ``--set`` overrides, then dedicated flags (``seed``, ``output_dir``, ``jobs``); later wins."""
    raw = load_config_file(path) if path is not None else {}
    raw = apply_overrides(raw, overrides)
    if flags.get("seed") is not None:
        raw["seed"] = flags["seed"]
        for section in _SEEDED:
            raw.setdefault(section, {})["seed"] = flags["seed"]
    if flags.get("output_dir") is not None:
        raw["output_dir"] = flags["output_dir"]
    if flags.get("jobs") is not None:
        raw.setdefault("cv", {})["jobs"] = flags["jobs"]
    return config_from_dict(raw)


def write_resolved_config(config: RunConfig, directory: str | Path | None = None) -> Path:
    out_dir = Path(directory) if directory is not None else config.output_path
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_NAME
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
