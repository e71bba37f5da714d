"""Cross-encoder re-ranker with a scoring head at every layer.

A (query, document) pair is rendered as one token sequence
``[QRY] q-tokens [DOC] d-tokens [SCORE]`` and run through a stack of
pre-norm transformer layers (RMS normalization, rotary positions, causal
attention, SiLU MLP). Each layer i exposes its hidden states and the
attention weights of the final position, and owns an independent head that
projects the final hidden state to a scalar relevance score. Running with a
``ShapeConfig`` of depth n and full widths reproduces the first n layers of
the full-scale pass bit for bit, so depth customization is a pure early
exit; width customization pools hidden states between layers using the
exposed attention weights.

Normalization choice: scale-only RMS normalization (no mean centering, no
bias), matching the decoder-style backbones this architecture mirrors.
Positions are re-indexed 0..w-1 after pooling, so rotary phases are
recomputed over the compressed sequence.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .shapes import ShapeConfig, compress_layer, full_shape, plan_for_target, validate_config
from .tensor import Tensor

__all__ = [
    "QRY_TOKEN", "DOC_TOKEN", "SCORE_TOKEN", "FIRST_CONTENT_TOKEN",
    "ModelConfig", "RankerInput", "LayerState", "RerankerModel",
    "render_input", "save_checkpoint", "load_checkpoint", "params_checksum",
]

QRY_TOKEN = 0
DOC_TOKEN = 1
SCORE_TOKEN = 2
FIRST_CONTENT_TOKEN = 3


@dataclass(frozen=True)
class ModelConfig:
    """Full-scale architecture description."""

    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 64
    d_ff: int = 128
    mlp_mats: int = 2
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"need at least one layer, got {self.n_layers}")
        if self.d_model % self.n_heads:
            raise ValueError(f"head count {self.n_heads} must divide d_model {self.d_model}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("rotary positions need an even per-head dimension")
        if self.max_seq_len < 2:
            raise ValueError(f"max_seq_len must be at least 2, got {self.max_seq_len}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class RankerInput:
    """Rendered token ids; the final position is always the score token."""

    ids: tuple[int, ...]

    def __post_init__(self):
        if not self.ids or self.ids[-1] != SCORE_TOKEN:
            raise ValueError("rendered input must end with the score token")

    def __len__(self) -> int:
        return len(self.ids)


def render_input(query, doc, max_seq_len: int = 64) -> RankerInput:
    """Render ``[QRY] query [DOC] doc [SCORE]``, truncating on overflow.

    The document is truncated first, then the query; the three marker
    tokens are never dropped.
    """
    query = list(query)
    doc = list(doc)
    budget = max_seq_len - 3
    if budget < 0:
        raise ValueError(f"max_seq_len {max_seq_len} cannot hold the marker tokens")
    if len(query) + len(doc) > budget:
        doc = doc[:max(0, budget - len(query))]
        query = query[:budget - len(doc)]
    return RankerInput(tuple([QRY_TOKEN, *query, DOC_TOKEN, *doc, SCORE_TOKEN]))


@dataclass
class LayerState:
    """One executed layer's output sequence plus its pooling signal.

    ``last_token_attn`` is the final position's attention distribution over
    the layer's sequence, averaged across heads, captured before any
    compression of this layer's output.
    """

    hidden: Tensor
    last_token_attn: Tensor


def _init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, d_ff = cfg.d_model, cfg.d_ff
    resid_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)

    def mat(rows, cols, std):
        return Tensor(rng.normal(0.0, std, (rows, cols)), requires_grad=True)

    # near-orthogonal token embeddings; when the vocabulary fits the model
    # width the identity component keeps token identity axis-aligned, which
    # the attention projections pick up quickly under plain SGD
    embed = rng.normal(0.0, 0.3, (cfg.vocab_size, d))
    for t in range(cfg.vocab_size):
        embed[t, t % d] += 1.0
    params: dict[str, Tensor] = {"embed": Tensor(embed, requires_grad=True)}
    for i in range(1, cfg.n_layers + 1):
        p = f"layers.{i}."
        params[p + "attn_norm"] = T.ones(d, requires_grad=True)
        params[p + "wq"] = mat(d, d, d**-0.5)
        params[p + "wk"] = mat(d, d, d**-0.5)
        params[p + "wv"] = mat(d, d, d**-0.5)
        # residual-branch outputs start near zero so early updates stay tame
        params[p + "wo"] = mat(d, d, 0.1 * d**-0.5 * resid_scale)
        params[p + "mlp_norm"] = T.ones(d, requires_grad=True)
        params[p + "w_up"] = mat(d, d_ff, d**-0.5)
        params[p + "w_down"] = mat(d_ff, d, 0.1 * d_ff**-0.5 * resid_scale)
        h = f"heads.{i}."
        params[h + "norm"] = T.ones(d, requires_grad=True)
        params[h + "w"] = mat(d, 1, d**-0.5)
        params[h + "b"] = T.zeros(1, 1, requires_grad=True)
    return params


class RerankerModel:
    """Parameter container plus the shape-aware forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict | None = None):
        self.config = config
        self.params = params if params is not None else _init_params(config, seed)
        self._mask_cache: dict[int, np.ndarray] = {}
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- cached constants ---------------------------------------------------

    def _mask(self, w: int) -> np.ndarray:
        m = self._mask_cache.get(w)
        if m is None:
            m = np.triu(np.full((w, w), -1e30), k=1)
            self._mask_cache[w] = m
        return m

    def _rope(self, w: int) -> tuple[np.ndarray, np.ndarray]:
        tables = self._rope_cache.get(w)
        if tables is None:
            hd = self.config.head_dim
            half = hd // 2
            freqs = self.config.rope_base ** (-np.arange(half) * 2.0 / hd)
            ang = np.arange(w)[:, None] * freqs[None, :]
            ang = np.concatenate([ang, ang], axis=1)
            tables = (np.cos(ang), np.sin(ang))
            self._rope_cache[w] = tables
        return tables

    # -- forward ------------------------------------------------------------

    def _layer(self, x: Tensor, layer: int, adapters=None) -> tuple[Tensor, Tensor]:
        """Run one transformer layer; returns (output, last-token attention)."""
        cfg = self.config
        p = self.params
        pre = f"layers.{layer}."
        w = x.shape[0]
        hd = cfg.head_dim
        scale = 1.0 / np.sqrt(hd)
        cos, sin = self._rope(w)
        mask = self._mask(w)

        xn = T.rms_norm(x, p[pre + "attn_norm"], cfg.norm_eps)
        q = self._project(xn, pre, "wq", adapters)
        k = self._project(xn, pre, "wk", adapters)
        v = self._project(xn, pre, "wv", adapters)
        ctx, attn_avg = T.causal_attention(q, k, v, cfg.n_heads, cos, sin, mask, scale)
        x = x + self._project(ctx, pre, "wo", adapters)

        xn = T.rms_norm(x, p[pre + "mlp_norm"], cfg.norm_eps)
        up = T.silu(self._project(xn, pre, "w_up", adapters))
        x = x + self._project(up, pre, "w_down", adapters)
        return x, attn_avg

    def _project(self, x: Tensor, prefix: str, name: str, adapters) -> Tensor:
        out = T.matmul(x, self.params[prefix + name])
        if adapters is not None:
            delta = adapters.get(name)
            if delta is not None:
                a, b, scaling = delta
                out = out + T.scale_shift(T.matmul(T.matmul(x, a), b), scaling)
        return out

    def forward_layers(self, inp: RankerInput, shape: ShapeConfig | None = None,
                       adapters=None, prefix: list[LayerState] | None = None) -> list[LayerState]:
        """Run layers 1..shape.depth, compressing between layers as asked.

        Layer i's ``LayerState`` has sequence length ``shape.widths[i-1]``;
        compression of layer i's output happens before layer i+1 consumes
        it, planned from layer i's captured last-token attention. The
        ``adapters`` argument is an AdapterBank (or None); per-layer deltas
        are composed from the layer index and the requested factor at the
        layer's entry.

        ``prefix`` may hold LayerStates of an adapter-free full-width pass
        over the same input; layers whose entry is still uncompressed are
        then reused instead of recomputed (the values are identical by the
        depth-exit property, and gradients through shared states simply
        accumulate from both uses).
        """
        n = len(inp)
        if shape is None:
            shape = full_shape(self.config.n_layers, n)
        validate_config(shape, self.config, n)
        states: list[LayerState] = []
        start = 1
        if prefix is not None and adapters is None:
            while (start <= shape.depth and start <= len(prefix)
                   and shape.widths[start - 1] == n):
                states.append(prefix[start - 1])
                start += 1
        if start == 1:
            x = T.gather_rows(self.params["embed"], np.asarray(inp.ids))
        else:
            x = states[-1].hidden
        for i in range(start, shape.depth + 1):
            target = shape.widths[i - 1]
            if x.shape[0] != target:
                prev = states[-1]
                plan = plan_for_target(prev.last_token_attn.data, x.shape[0], target,
                                       shape.factors[i - 1])
                x = compress_layer(prev, plan)
            layer_adapters = None
            if adapters is not None:
                layer_adapters = adapters.composed_for(i, shape.factors[i - 1])
            x, attn = self._layer(x, i, layer_adapters)
            states.append(LayerState(hidden=x, last_token_attn=attn))
        return states

    def score_at_layer(self, states: list[LayerState], i: int) -> Tensor:
        """Scalar relevance score from layer i's head (1-based layer index)."""
        if not 1 <= i <= len(states):
            raise IndexError(f"layer {i} not in executed range 1..{len(states)}")
        h = states[i - 1].hidden
        last = T.narrow(h, 0, h.shape[0] - 1, h.shape[0])
        hp = f"heads.{i}."
        normed = T.rms_norm(last, self.params[hp + "norm"], self.config.norm_eps)
        return T.reshape(T.matmul(normed, self.params[hp + "w"]) + self.params[hp + "b"], 1)

    def score(self, inp: RankerInput, shape: ShapeConfig | None = None, adapters=None) -> Tensor:
        states = self.forward_layers(inp, shape, adapters)
        return self.score_at_layer(states, len(states))


# ---------------------------------------------------------------------------
# checkpoint container: JSON header + named tensor blocks

_CKPT_MAGIC = b"NRCK"


def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor],
                    extra: dict | None = None) -> None:
    names = sorted(params)
    header = json.dumps({"format": 1, "config": asdict(config), "tensors": names,
                         "extra": extra or {}}).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for name in names:
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(T._tensor_bytes(params[name]))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen].decode())
    if header.get("format") != 1:
        raise ValueError(f"unsupported checkpoint format {header.get('format')}")
    offset = 8 + hlen
    params: dict[str, Tensor] = {}
    for _ in header["tensors"]:
        (nlen,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + nlen].decode()
        offset += nlen
        t, offset = T.tensor_from_bytes(blob, offset)
        t.requires_grad = True
        params[name] = t
    cfg = ModelConfig(**header["config"])
    return cfg, params, header.get("extra", {})


def load_model(path) -> RerankerModel:
    cfg, params, _ = load_checkpoint(path)
    return RerankerModel(cfg, params=params)


def params_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()
