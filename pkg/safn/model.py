"""The Sparse-Attention Fusion Network.

Data flow for one batch::

    mri_ct, clinical  -> tokenize -> n_layers encoder blocks -> symmetric cross-attention -> attention pool
    mri_vol, demographic -> two-layer GELU MLP
    concat (fusion order) -> sigmoid gates -> gated concat H -> LayerNorm -> MLP head -> logit

Parameters live in one flat float64 vector (:class:`SafnParams`) addressed by
name through a :class:`ParamLayout`; gradients use the same layout, which is
what the optimiser state and the finite-difference checks index into.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from safn import nn
from safn.core import FUSION_ORDER, Modality, ShapeError, UsageError
from safn.data import ModalityBatch, ModalityBundle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SafnConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    dropout: float = 0.3
    ffn_multiplier: int = 4
    head_hidden: int = 64
    cross_heads: int | None = None

    def __post_init__(self) -> None:
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 1:
            raise UsageError("d_model, n_heads and n_layers must be positive")
        if self.d_model % self.n_heads:
            raise UsageError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % self.heads_for_cross:
            raise UsageError(f"d_model={self.d_model} is not divisible by cross_heads={self.heads_for_cross}")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.ffn_multiplier < 1 or self.head_hidden < 1:
            raise UsageError("ffn_multiplier and head_hidden must be positive")

    @property
    def heads_for_cross(self) -> int:
        return self.cross_heads if self.cross_heads is not None else self.n_heads

    @property
    def ffn_width(self) -> int:
        return self.ffn_multiplier * self.d_model


@dataclass(frozen=True)
class ModelWiring:
    """Which modalities and components are present; ablations edit this."""

    modalities: tuple[Modality, ...] = FUSION_ORDER
    cross_attention: bool = True
    gates: bool = True

    def __post_init__(self) -> None:
        if not self.modalities:
            raise UsageError("At least one modality must be active")
        ordered = tuple(m for m in FUSION_ORDER if m in set(self.modalities))
        object.__setattr__(self, "modalities", ordered)

    @property
    def tokenized(self) -> tuple[Modality, ...]:
        return tuple(m for m in self.modalities if m.tokenized)

    @property
    def mlp_encoded(self) -> tuple[Modality, ...]:
        return tuple(m for m in self.modalities if not m.tokenized)

    @property
    def uses_cross_attention(self) -> bool:
        return self.cross_attention and Modality.MRI_CT in self.modalities and Modality.CLINICAL in self.modalities


def _block_entries(prefix: str, d: int, ffn: int) -> list[tuple[str, tuple[int, ...]]]:
    entries: list[tuple[str, tuple[int, ...]]] = []
    for proj in ("q", "k", "v", "o"):
        entries.append((f"{prefix}attn.w{proj}", (d, d)))
        entries.append((f"{prefix}attn.b{proj}", (d,)))
    entries += [
        (f"{prefix}ln1.g", (d,)),
        (f"{prefix}ln1.b", (d,)),
        (f"{prefix}ffn.w1", (d, ffn)),
        (f"{prefix}ffn.b1", (ffn,)),
        (f"{prefix}ffn.w2", (ffn, d)),
        (f"{prefix}ffn.b2", (d,)),
        (f"{prefix}ln2.g", (d,)),
        (f"{prefix}ln2.b", (d,)),
    ]
    return entries


@dataclass(frozen=True)
class ParamLayout:
    config: SafnConfig
    widths: Mapping[Modality, int]
    wiring: ModelWiring
    entries: tuple[tuple[str, tuple[int, ...]], ...] = field(init=False)
    offsets: Mapping[str, tuple[int, int]] = field(init=False)

    def __post_init__(self) -> None:
        widths = {Modality(m): int(w) for m, w in self.widths.items()}
        object.__setattr__(self, "widths", widths)
        cfg, wiring = self.config, self.wiring
        d = cfg.d_model
        for m in wiring.modalities:
            if widths.get(m, 0) < 1:
                raise ShapeError(f"Active modality {m.value} has no features")

        entries: list[tuple[str, tuple[int, ...]]] = []
        for m in wiring.tokenized:
            entries += [(f"{m.value}.tok.w", (widths[m], d)), (f"{m.value}.tok.b", (widths[m], d))]
            for layer in range(cfg.n_layers):
                entries += _block_entries(f"{m.value}.enc.{layer}.", d, cfg.ffn_width)
        if wiring.uses_cross_attention:
            for m in wiring.tokenized:
                entries += _block_entries(f"cross.{m.value}.", d, cfg.ffn_width)
        for m in wiring.tokenized:
            entries.append((f"{m.value}.pool.q", (d,)))
        for m in wiring.mlp_encoded:
            entries += [
                (f"{m.value}.mlp.w1", (widths[m], d)),
                (f"{m.value}.mlp.b1", (d,)),
                (f"{m.value}.mlp.w2", (d, d)),
                (f"{m.value}.mlp.b2", (d,)),
            ]
        fused = len(wiring.modalities) * d
        if wiring.gates:
            entries += [("gate.w", (len(wiring.modalities), fused)), ("gate.b", (len(wiring.modalities),))]
        entries += [
            ("head.ln.g", (fused,)),
            ("head.ln.b", (fused,)),
            ("head.w1", (fused, cfg.head_hidden)),
            ("head.b1", (cfg.head_hidden,)),
            ("head.w2", (cfg.head_hidden, 1)),
            ("head.b2", (1,)),
        ]

        offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for name, shape in entries:
            size = int(np.prod(shape))
            offsets[name] = (pos, pos + size)
            pos += size
        object.__setattr__(self, "entries", tuple(entries))
        object.__setattr__(self, "offsets", offsets)

    @property
    def size(self) -> int:
        if not self.entries:
            return 0
        return self.offsets[self.entries[-1][0]][1]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def shape_of(self, name: str) -> tuple[int, ...]:
        return dict(self.entries)[name]

    def flat_index(self, name: str, index: tuple[int, ...] = ()) -> int:
        start, _ = self.offsets[name]
        shape = self.shape_of(name)
        return start + (int(np.ravel_multi_index(index, shape)) if index else 0)

    def compatible_with(self, other: ParamLayout) -> bool:
        return self.entries == other.entries


def build_layout(
    config: SafnConfig,
    widths: Mapping[Modality, int],
    wiring: ModelWiring | None = None,
) -> ParamLayout:
    return ParamLayout(config=config, widths=dict(widths), wiring=wiring or ModelWiring())


def parameter_count(config: SafnConfig, widths: Mapping[Modality, int], wiring: ModelWiring | None = None) -> int:
    """Closed-form parameter count; must equal ``build_layout(...).size``."""
    wiring = wiring or ModelWiring()
    d, ffn, hidden = config.d_model, config.ffn_width, config.head_hidden
    block = 4 * (d * d + d) + 4 * d + (d * ffn + ffn + ffn * d + d)
    n_mod = len(wiring.modalities)
    fused = n_mod * d

    total = 0
    for m in wiring.tokenized:
        total += 2 * widths[m] * d + config.n_layers * block + d
    if wiring.uses_cross_attention:
        total += 2 * block
    for m in wiring.mlp_encoded:
        total += widths[m] * d + d + d * d + d
    if wiring.gates:
        total += n_mod * fused + n_mod
    total += 2 * fused + fused * hidden + hidden + hidden + 1
    return total


class SafnParams:
    """Named views over one flat float64 parameter (or gradient) vector."""

    def __init__(self, layout: ParamLayout, flat: np.ndarray | None = None):
        self.layout = layout
        if flat is None:
            flat = np.zeros(layout.size, dtype=np.float64)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (layout.size,):
            raise ShapeError(f"Flat vector has shape {flat.shape}, layout expects ({layout.size},)")
        self.flat = flat
        self._views = {
            name: flat[start:stop].reshape(layout.shape_of(name))
            for name, (start, stop) in layout.offsets.items()
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __contains__(self, name: str) -> bool:
        return name in self._views

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {name[len(prefix):]: view for name, view in self._views.items() if name.startswith(prefix)}

    def items(self):
        return self._views.items()

    def copy(self) -> SafnParams:
        return SafnParams(self.layout, self.flat.copy())

    def zeros_like(self) -> SafnParams:
        return SafnParams(self.layout)

    def with_flat(self, flat: np.ndarray) -> SafnParams:
        return SafnParams(self.layout, flat)


def init_params(layout: ParamLayout, seed: int) -> SafnParams:
    """Uniform(+-1/sqrt(fan_in)) for linear maps, LN scale 1 / shift 0, embeddings and pool queries Uniform(+-1/sqrt(D))."""
    rng = np.random.default_rng(seed)
    params = SafnParams(layout)
    d = layout.config.d_model
    fan_in_of: dict[str, int] = {}
    for name, shape in layout.entries:
        if len(shape) == 2 and not name.endswith(".tok.w") and not name.endswith(".tok.b"):
            fan_in_of[name] = shape[0] if name != "gate.w" else shape[1]
    for name, shape in layout.entries:
        view = params[name]
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g") and (".ln" in name or name.startswith("head.ln")):
            view[...] = 1.0
        elif name.endswith(".b") and (".ln" in name or name.startswith("head.ln")):
            view[...] = 0.0
        elif ".tok." in name or name.endswith(".pool.q"):
            bound = 1.0 / math.sqrt(d)
            view[...] = rng.uniform(-bound, bound, size=shape)
        else:
            weight_name = name if len(shape) == 2 else _weight_for_bias(name, leaf)
            bound = 1.0 / math.sqrt(fan_in_of[weight_name])
            view[...] = rng.uniform(-bound, bound, size=shape)
    return params


def _weight_for_bias(name: str, leaf: str) -> str:
    # bq -> wq, b1 -> w1, gate.b -> gate.w
    prefix = name[: len(name) - len(leaf)]
    return prefix + "w" + leaf[1:]


# ============================================================================
# FORWARD
# ============================================================================

@dataclass
class ForwardTrace:
    layout: ParamLayout
    train_mode: bool
    inputs: dict[Modality, np.ndarray]
    tokens: dict[Modality, np.ndarray]
    encoded: dict[Modality, np.ndarray]
    crossed: dict[Modality, np.ndarray]
    pooled: dict[Modality, np.ndarray]
    pool_weights: dict[Modality, np.ndarray]
    z: np.ndarray
    alpha: np.ndarray
    h: np.ndarray
    logit: np.ndarray
    prob: np.ndarray
    z_mask: np.ndarray | None = None
    _encoder_caches: dict[Modality, list[nn.BlockCache]] = field(default_factory=dict, repr=False)
    _cross_caches: dict[Modality, nn.BlockCache] = field(default_factory=dict, repr=False)
    _mlp_caches: dict[Modality, nn.MlpCache] = field(default_factory=dict, repr=False)
    _head_cache: dict[str, object] = field(default_factory=dict, repr=False)

    @property
    def modalities(self) -> tuple[Modality, ...]:
        return self.layout.wiring.modalities

    def gates_by_modality(self) -> dict[Modality, np.ndarray]:
        return {m: self.alpha[:, j] for j, m in enumerate(self.modalities)}


@dataclass
class Gradients:
    params: SafnParams
    inputs: dict[Modality, np.ndarray]


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    return (x[None], True) if x.ndim == 2 else (x, False)


def tokenize(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row f of the result is x_f * w_f + b_f. Accepts (F,) or (B, F)."""
    if x.shape[-1] != w.shape[0] or w.shape != b.shape:
        raise ShapeError(f"Feature count {x.shape[-1]} does not match {w.shape[0]} embeddings")
    return nn.tokenize_forward(np.asarray(x, dtype=np.float64), w, b)


def encoder_forward(
    tokens: np.ndarray,
    layer_params: Sequence[Mapping[str, np.ndarray]],
    config: SafnConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    x, squeeze = _as_batch(np.asarray(tokens, dtype=np.float64))
    if x.shape[-1] != config.d_model or x.shape[1] < 1:
        raise ShapeError(f"Encoder expects (F>=1, {config.d_model}) tokens, got {tokens.shape}")
    active_rng = rng if train_mode else None
    for p in layer_params:
        x, _ = nn.block_forward(x, None, p, config.n_heads, config.dropout, active_rng)
    return x[0] if squeeze else x


def cross_attention(
    queries_seq: np.ndarray,
    keyvals_seq: np.ndarray,
    block_params: Mapping[str, np.ndarray],
    config: SafnConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    q, squeeze = _as_batch(np.asarray(queries_seq, dtype=np.float64))
    kv, _ = _as_batch(np.asarray(keyvals_seq, dtype=np.float64))
    if q.shape[-1] != kv.shape[-1] or q.shape[1] < 1 or kv.shape[1] < 1:
        raise ShapeError(f"Cross-attention needs nonempty sequences of equal width, got {q.shape} and {kv.shape}")
    out, _ = nn.block_forward(q, kv, block_params, config.heads_for_cross, config.dropout, rng if train_mode else None)
    return out[0] if squeeze else out


def attention_pool(seq: np.ndarray, query: np.ndarray) -> np.ndarray:
    x, squeeze = _as_batch(np.asarray(seq, dtype=np.float64))
    if x.shape[1] < 1:
        raise ShapeError("Cannot pool an empty sequence")
    pooled, _ = nn.pool_forward(x, query)
    return pooled[0] if squeeze else pooled


def gate_and_fuse(
    z_all: Sequence[np.ndarray],
    w_g: np.ndarray,
    b_g: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """alpha = sigmoid(W_g Z + b_g); H = concat(alpha_j * Z_j). Accepts (D,) or (B, D) blocks."""
    blocks = [np.atleast_2d(np.asarray(zj, dtype=np.float64)) for zj in z_all]
    squeeze = np.ndim(z_all[0]) == 1
    z = np.concatenate(blocks, axis=1)
    if w_g.shape != (len(blocks), z.shape[1]):
        raise ShapeError(f"Gate weights have shape {w_g.shape}, expected {(len(blocks), z.shape[1])}")
    alpha = nn.sigmoid(z @ w_g.T + b_g)
    h = np.concatenate([alpha[:, j : j + 1] * blocks[j] for j in range(len(blocks))], axis=1)
    return (alpha[0], h[0]) if squeeze else (alpha, h)


def head_forward(
    h: np.ndarray,
    head_params: Mapping[str, np.ndarray],
    config: SafnConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    x = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if x.shape[1] != head_params["ln.g"].shape[0]:
        raise ShapeError(f"Head expects width {head_params['ln.g'].shape[0]}, got {x.shape[1]}")
    logit, _ = _head(x, head_params, config.dropout, rng if train_mode else None)
    return logit[0] if np.ndim(h) == 1 else logit


def _head(h: np.ndarray, p: Mapping[str, np.ndarray], rate: float, rng: np.random.Generator | None):
    normed, ln_cache = nn.layer_norm(h, p["ln.g"], p["ln.b"])
    u = nn.linear(normed, p["w1"], p["b1"])
    mask = nn.dropout_mask(rng, u.shape, rate)
    a_dropped = nn.apply_mask(nn.gelu(u), mask)
    logit = nn.linear(a_dropped, p["w2"], p["b2"])[:, 0]
    return logit, {"ln": ln_cache, "normed": normed, "u": u, "mask": mask, "a_dropped": a_dropped}


def _coerce_batch(data: ModalityBatch | ModalityBundle | Sequence[ModalityBundle]) -> dict[Modality, np.ndarray]:
    if isinstance(data, ModalityBatch):
        return {m: np.asarray(x, dtype=np.float64) for m, x in data.blocks.items()}
    if isinstance(data, ModalityBundle):
        data = [data]
    return dict(ModalityBatch.from_bundles(list(data)).blocks)


def forward(
    data: ModalityBatch | ModalityBundle | Sequence[ModalityBundle],
    params: SafnParams,
    config: SafnConfig | None = None,
    train_mode: bool = False,
    dropout_seed: int | Sequence[int] | None = None,
) -> ForwardTrace:
    layout = params.layout
    if config is not None and config != layout.config:
        raise ShapeError("Config does not match the parameter layout")
    cfg, wiring = layout.config, layout.wiring
    rng = np.random.default_rng(dropout_seed) if train_mode and cfg.dropout > 0 else None
    rate = cfg.dropout

    inputs = _coerce_batch(data)
    for m in wiring.modalities:
        x = inputs.get(m)
        if x is None or x.ndim != 2 or x.shape[1] != layout.widths[m]:
            got = None if x is None else x.shape
            raise ShapeError(f"{m.value} block has shape {got}, expected (N, {layout.widths[m]})")

    tokens: dict[Modality, np.ndarray] = {}
    encoded: dict[Modality, np.ndarray] = {}
    enc_caches: dict[Modality, list[nn.BlockCache]] = {}
    for m in wiring.tokenized:
        x = tokens[m] = nn.tokenize_forward(inputs[m], params[f"{m.value}.tok.w"], params[f"{m.value}.tok.b"])
        enc_caches[m] = []
        for layer in range(cfg.n_layers):
            x, cache = nn.block_forward(x, None, params.group(f"{m.value}.enc.{layer}."), cfg.n_heads, rate, rng)
            enc_caches[m].append(cache)
        encoded[m] = x

    crossed = dict(encoded)
    cross_caches: dict[Modality, nn.BlockCache] = {}
    if wiring.uses_cross_attention:
        pairs = ((Modality.MRI_CT, Modality.CLINICAL), (Modality.CLINICAL, Modality.MRI_CT))
        for query_m, kv_m in pairs:
            # Both directions read the pre-cross-attention encodings.
            crossed[query_m], cross_caches[query_m] = nn.block_forward(
                encoded[query_m], encoded[kv_m], params.group(f"cross.{query_m.value}."),
                cfg.heads_for_cross, rate, rng,
            )

    pooled: dict[Modality, np.ndarray] = {}
    pool_weights: dict[Modality, np.ndarray] = {}
    for m in wiring.tokenized:
        pooled[m], pool_weights[m] = nn.pool_forward(crossed[m], params[f"{m.value}.pool.q"])
    mlp_caches: dict[Modality, nn.MlpCache] = {}
    for m in wiring.mlp_encoded:
        pooled[m], mlp_caches[m] = nn.mlp_forward(inputs[m], params.group(f"{m.value}.mlp."), rate, rng)

    # gates and head both read the dropped-out pooled embeddings
    z = np.concatenate([pooled[m] for m in wiring.modalities], axis=1)
    z_mask = nn.dropout_mask(rng, z.shape, rate)
    z = nn.apply_mask(z, z_mask)
    n = z.shape[0]
    if wiring.gates:
        alpha = nn.sigmoid(z @ params["gate.w"].T + params["gate.b"])
        d = cfg.d_model
        h = np.concatenate([alpha[:, j : j + 1] * z[:, j * d : (j + 1) * d] for j in range(len(wiring.modalities))], axis=1)
    else:
        alpha = np.ones((n, len(wiring.modalities)), dtype=np.float64)
        h = z

    logit, head_cache = _head(h, params.group("head."), rate, rng)
    return ForwardTrace(
        layout=layout,
        train_mode=train_mode,
        inputs=inputs,
        tokens=tokens,
        encoded=encoded,
        crossed=crossed,
        pooled=pooled,
        pool_weights=pool_weights,
        z=z,
        alpha=alpha,
        h=h,
        logit=logit,
        prob=nn.sigmoid(logit),
        z_mask=z_mask,
        _encoder_caches=enc_caches,
        _cross_caches=cross_caches,
        _mlp_caches=mlp_caches,
        _head_cache=head_cache,
    )


# ============================================================================
# BACKWARD
# ============================================================================

def backward(
    trace: ForwardTrace,
    dlogit: np.ndarray | float,
    params: SafnParams,
    dalpha: np.ndarray | None = None,
) -> Gradients:
    """Exact gradients of a scalar objective given d objective / d logit per sample.

    ``dalpha`` (N, M) adds a direct dependence on the gate values, as the
    sparsity penalty has. Input gradients are w.r.t. the preprocessed features.
    """
    layout = params.layout
    if not layout.compatible_with(trace.layout):
        raise ShapeError("Trace was produced with a different parameter layout")
    cfg, wiring = layout.config, layout.wiring
    grads = params.zeros_like()
    n = trace.logit.shape[0]
    ds = np.broadcast_to(np.asarray(dlogit, dtype=np.float64), (n,))

    hc = trace._head_cache
    hp, hg = params.group("head."), grads.group("head.")
    da = nn.linear_backward(hc["a_dropped"], hp["w2"], ds[:, None], hg["w2"], hg["b2"])
    du = nn.gelu_backward(hc["u"], nn.apply_mask(da, hc["mask"]))
    dnormed = nn.linear_backward(hc["normed"], hp["w1"], du, hg["w1"], hg["b1"])
    dh = nn.layer_norm_backward(hc["ln"], hp["ln.g"], dnormed, hg["ln.g"], hg["ln.b"])

    d = cfg.d_model
    n_mod = len(wiring.modalities)
    if wiring.gates:
        alpha = trace.alpha
        dz = np.empty_like(trace.z)
        dalpha_total = np.zeros_like(alpha) if dalpha is None else np.array(dalpha, dtype=np.float64)
        for j in range(n_mod):
            block = slice(j * d, (j + 1) * d)
            dz[:, block] = alpha[:, j : j + 1] * dh[:, block]
            dalpha_total[:, j] += np.sum(dh[:, block] * trace.z[:, block], axis=1)
        dgate = dalpha_total * alpha * (1.0 - alpha)
        grads["gate.w"][...] += dgate.T @ trace.z
        grads["gate.b"][...] += dgate.sum(axis=0)
        dz += dgate @ params["gate.w"]
    else:
        dz = dh
    dz = nn.apply_mask(dz, trace.z_mask)

    dpooled = {m: dz[:, j * d : (j + 1) * d] for j, m in enumerate(wiring.modalities)}
    input_grads = {m: np.zeros_like(x) for m, x in trace.inputs.items()}

    for m in wiring.mlp_encoded:
        input_grads[m] = nn.mlp_backward(
            trace._mlp_caches[m], params.group(f"{m.value}.mlp."), grads.group(f"{m.value}.mlp."), dpooled[m]
        )

    dcrossed: dict[Modality, np.ndarray] = {}
    for m in wiring.tokenized:
        dcrossed[m] = nn.pool_backward(
            trace.crossed[m], params[f"{m.value}.pool.q"], trace.pool_weights[m], dpooled[m],
            grads[f"{m.value}.pool.q"],
        )

    if wiring.uses_cross_attention:
        dencoded = {m: np.zeros_like(trace.encoded[m]) for m in wiring.tokenized}
        pairs = ((Modality.MRI_CT, Modality.CLINICAL), (Modality.CLINICAL, Modality.MRI_CT))
        for query_m, kv_m in pairs:
            dq, dkv = nn.block_backward(
                trace._cross_caches[query_m], params.group(f"cross.{query_m.value}."),
                grads.group(f"cross.{query_m.value}."), dcrossed[query_m],
            )
            dencoded[query_m] += dq
            dencoded[kv_m] += dkv
    else:
        dencoded = dcrossed

    for m in wiring.tokenized:
        dx = dencoded[m]
        for layer in reversed(range(cfg.n_layers)):
            dx, _ = nn.block_backward(
                trace._encoder_caches[m][layer], params.group(f"{m.value}.enc.{layer}."),
                grads.group(f"{m.value}.enc.{layer}."), dx,
            )
        input_grads[m] = nn.tokenize_backward(
            trace.inputs[m], params[f"{m.value}.tok.w"], dx, grads[f"{m.value}.tok.w"], grads[f"{m.value}.tok.b"]
        )

    return Gradients(params=grads, inputs=input_grads)


def predict(
    params: SafnParams,
    batch: ModalityBatch,
    chunk_size: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode probabilities and gate values, computed in chunks to bound attention memory."""
    n = len(batch)
    probs = np.empty(n, dtype=np.float64)
    alphas = np.empty((n, len(params.layout.wiring.modalities)), dtype=np.float64)
    for start in range(0, n, chunk_size):
        rows = np.arange(start, min(n, start + chunk_size))
        trace = forward(batch.subset(rows), params)
        probs[rows] = trace.prob
        alphas[rows] = trace.alpha
    return probs, alphas
