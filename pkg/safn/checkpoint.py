"""Versioned JSON checkpoints: model header, fitted preprocessing and the flat parameter vector."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from safn.core import DataError, Modality, parse_modality
from safn.data import DatasetSchema, FittedPreprocessor
from safn.model import ModelWiring, SafnConfig, SafnParams, build_layout
from safn.utils.serialization import JsonSerializer

logger = logging.getLogger(__name__)

FORMAT_TAG = "safn-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: SafnParams
    feature_names: dict[Modality, tuple[str, ...]] = field(default_factory=dict)
    preprocessor: FittedPreprocessor | None = None
    schema: DatasetSchema | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> SafnConfig:
        return self.params.layout.config

    @property
    def wiring(self) -> ModelWiring:
        return self.params.layout.wiring


def _preprocessor_to_dict(prep: FittedPreprocessor) -> dict[str, Any]:
    return {
        "medians": dict(prep.medians),
        "means": dict(prep.means),
        "stds": dict(prep.stds),
        "categories": {col: dict(levels) for col, levels in prep.categories.items()},
        "modality_columns": {m.value: list(cols) for m, cols in prep.modality_columns.items()},
        "categorical_encoding": prep.categorical_encoding,
    }


def _preprocessor_from_dict(data: Mapping[str, Any]) -> FittedPreprocessor:
    return FittedPreprocessor(
        medians={k: float(v) for k, v in data["medians"].items()},
        means={k: float(v) for k, v in data["means"].items()},
        stds={k: float(v) for k, v in data["stds"].items()},
        categories={col: {lvl: int(i) for lvl, i in levels.items()} for col, levels in data["categories"].items()},
        modality_columns={parse_modality(m): tuple(cols) for m, cols in data["modality_columns"].items()},
        categorical_encoding=data.get("categorical_encoding", "onehot"),
    )


def checkpoint_to_dict(checkpoint: Checkpoint) -> dict[str, Any]:
    layout = checkpoint.params.layout
    return {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "config": dataclasses.asdict(layout.config),
        "wiring": {
            "modalities": [m.value for m in layout.wiring.modalities],
            "cross_attention": layout.wiring.cross_attention,
            "gates": layout.wiring.gates,
        },
        "widths": {m.value: w for m, w in layout.widths.items()},
        "feature_names": {m.value: list(names) for m, names in checkpoint.feature_names.items()},
        "preprocessor": None if checkpoint.preprocessor is None else _preprocessor_to_dict(checkpoint.preprocessor),
        "schema": None if checkpoint.schema is None else checkpoint.schema.to_manifest(),
        "metadata": checkpoint.metadata,
        "param_names": layout.names,
        "params": checkpoint.params.flat.tolist(),
    }


def checkpoint_from_dict(data: Mapping[str, Any]) -> Checkpoint:
    if data.get("format") != FORMAT_TAG:
        raise DataError(f"Not a SAFN checkpoint (format={data.get('format')!r})")
    if data.get("version") != FORMAT_VERSION:
        raise DataError(f"Unsupported checkpoint version {data.get('version')!r}; expected {FORMAT_VERSION}")

    config = SafnConfig(**data["config"])
    wiring_data = data["wiring"]
    wiring = ModelWiring(
        modalities=tuple(parse_modality(m) for m in wiring_data["modalities"]),
        cross_attention=bool(wiring_data["cross_attention"]),
        gates=bool(wiring_data["gates"]),
    )
    widths = {parse_modality(m): int(w) for m, w in data["widths"].items()}
    layout = build_layout(config, widths, wiring)
    if list(data.get("param_names", layout.names)) != layout.names:
        raise DataError("Checkpoint parameter names do not match the rebuilt layout")
    flat = np.asarray(data["params"], dtype=np.float64)
    if flat.shape != (layout.size,):
        raise DataError(f"Checkpoint holds {flat.size} parameters, layout expects {layout.size}")

    return Checkpoint(
        params=SafnParams(layout, flat),
        feature_names={parse_modality(m): tuple(names) for m, names in data.get("feature_names", {}).items()},
        preprocessor=None if data.get("preprocessor") is None else _preprocessor_from_dict(data["preprocessor"]),
        schema=None if data.get("schema") is None else DatasetSchema.from_manifest(data["schema"]),
        metadata=dict(data.get("metadata") or {}),
    )


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    # repr-exact floats, so a reloaded checkpoint reproduces predictions bit for bit
    out.write_bytes(JsonSerializer(indent=None).dumps(checkpoint_to_dict(checkpoint)))
    logger.info("Saved checkpoint with %d parameters to %s", checkpoint.params.layout.size, out)
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    src = Path(path)
    if not src.exists():
        raise DataError(f"Checkpoint not found: {src}")
    try:
        data = JsonSerializer().loads(src.read_bytes())
    except ValueError as e:
        raise DataError(f"Checkpoint {src} is not valid JSON: {e}") from None
    return checkpoint_from_dict(data)
