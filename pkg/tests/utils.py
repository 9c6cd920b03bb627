import numpy as np

from safn.core import FUSION_ORDER, Modality
from safn.data import ModalityBatch
from safn.model import ModelWiring, SafnConfig, SafnParams, build_layout, init_params

# Widths of the gradient-check model: ct 3, clinical 2, volumes 4, demographics 2.
GRADCHECK_WIDTHS = {
    Modality.MRI_CT: 3,
    Modality.CLINICAL: 2,
    Modality.MRI_VOL: 4,
    Modality.DEMOGRAPHIC: 2,
}


def tiny_config(**overrides) -> SafnConfig:
    values = dict(d_model=8, n_heads=2, n_layers=1, dropout=0.0, ffn_multiplier=2, head_hidden=8)
    values.update(overrides)
    return SafnConfig(**values)


def random_batch(n: int, widths=GRADCHECK_WIDTHS, seed: int = 0, labels=None) -> ModalityBatch:
    rng = np.random.default_rng(seed)
    blocks = {m: rng.normal(size=(n, widths[m])) for m in FUSION_ORDER}
    if labels is None:
        labels = np.arange(n) % 2
    return ModalityBatch(
        blocks=blocks,
        labels=np.asarray(labels, dtype=np.int64),
        subject_ids=tuple(f"S{i:03d}" for i in range(n)),
        feature_names={m: tuple(f"{m.value}_{i}" for i in range(widths[m])) for m in FUSION_ORDER},
    )


def tiny_params(seed: int = 0, wiring: ModelWiring | None = None, widths=GRADCHECK_WIDTHS, **config) -> SafnParams:
    return init_params(build_layout(tiny_config(**config), widths, wiring), seed)
