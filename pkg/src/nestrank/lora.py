"""Factorized low-rank compensation for compressed substructures.

Post-training attaches two collaborating families of rank-r adapters to the
frozen base model:

* vertical adapters, one per layer, compensating depth reduction;
* horizontal adapters, one per aggregation factor k = 2..M, compensating
  width reduction.

The adapter actually applied at layer l is the parameter-wise sum of the
layer's vertical adapter and the horizontal adapter for the factor
requested at l's entry (factor 1 means no compression, so the vertical
adapter alone). Each adapter contributes a delta (alpha / r) * A @ B to its
target projection, applied in factored form on the forward path; A is
[d_in, r] and B is [r, d_out].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import _CKPT_MAGIC  # same container framing as model checkpoints
from .tensor import Tensor

__all__ = [
    "LoraAdapter",
    "AdapterBank",
    "compose",
    "apply_adapter",
    "compensation_train",
    "save_bank",
    "load_bank",
]

DEFAULT_TARGETS = ("wq", "wv")
ALL_TARGETS = ("wq", "wk", "wv", "wo", "w_up", "w_down")


@dataclass
class LoraAdapter:
    """One rank-r adapter: delta(W) = (alpha / rank) * a @ b."""

    a: Tensor
    b: Tensor
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.a.data @ self.b.data)


class AdapterBank:
    """Vertical (per-layer) and horizontal (per-factor) adapter families.

    ``sum_products=False`` (the default) composes adapters by adding their
    parameter tensors, which keeps the composed update rank r. The
    alternative reading, summing the two rank-r products (update rank up to
    2r), is kept behind the flag for comparison runs.
    """

    def __init__(self, model_config, rank: int = 4, alpha: float | None = None,
                 max_factor: int = 8, targets=DEFAULT_TARGETS, seed: int = 0,
                 sum_products: bool = False):
        if rank < 1:
            raise ValueError(f"rank must be at least 1, got {rank}")
        self.rank = rank
        self.alpha = float(alpha) if alpha is not None else 2.0 * rank
        self.max_factor = max_factor
        self.targets = tuple(targets)
        self.n_layers = model_config.n_layers
        self.sum_products = sum_products
        rng = np.random.default_rng(seed)
        dims = _target_dims(model_config)
        self.vertical: dict[tuple[int, str], LoraAdapter] = {}
        self.horizontal: dict[tuple[int, str], LoraAdapter] = {}
        for layer in range(1, self.n_layers + 1):
            for t in self.targets:
                self.vertical[(layer, t)] = self._fresh(rng, dims[t])
        for k in range(2, max_factor + 1):
            for t in self.targets:
                self.horizontal[(k, t)] = self._fresh(rng, dims[t])

    def _fresh(self, rng, dims) -> LoraAdapter:
        d_in, d_out = dims
        a = Tensor(rng.normal(0.0, d_in**-0.5, (d_in, self.rank)), requires_grad=True)
        b = T.zeros(self.rank, d_out, requires_grad=True)
        return LoraAdapter(a=a, b=b, rank=self.rank, alpha=self.alpha)

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for (layer, t), ad in self.vertical.items():
            out[f"v.{layer}.{t}.a"] = ad.a
            out[f"v.{layer}.{t}.b"] = ad.b
        for (k, t), ad in self.horizontal.items():
            out[f"h.{k}.{t}.a"] = ad.a
            out[f"h.{k}.{t}.b"] = ad.b
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_all(self) -> None:
        for ad in list(self.vertical.values()) + list(self.horizontal.values()):
            ad.a.data[:] = 0.0
            ad.b.data[:] = 0.0

    # -- composition ----------------------------------------------------------

    def composed_for(self, layer: int, factor: int):
        """Per-projection (a, b, scaling) triples for one layer of a forward
        pass, or a sum-of-products variant when configured."""
        if not 1 <= layer <= self.n_layers:
            raise ValueError(f"layer {layer} outside 1..{self.n_layers}")
        if factor != 1 and not 2 <= factor <= self.max_factor:
            raise ValueError(f"factor exceeds trained compensators: {factor} > {self.max_factor}")
        out = {}
        for t in self.targets:
            v = self.vertical[(layer, t)]
            if factor == 1:
                out[t] = (v.a, v.b, v.scaling)
            elif self.sum_products:
                h = self.horizontal[(factor, t)]
                out[t] = (T.concat([v.a, h.a], axis=1), T.concat([v.b, h.b], axis=0), v.scaling)
            else:
                h = self.horizontal[(factor, t)]
                out[t] = (v.a + h.a, v.b + h.b, v.scaling)
        return out


def _target_dims(model_config) -> dict[str, tuple[int, int]]:
    d, d_ff = model_config.d_model, model_config.d_ff
    return {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "w_up": (d, d_ff), "w_down": (d_ff, d)}


def compose(bank: AdapterBank, layer: int, factor: int, target: str = "wq") -> LoraAdapter:
    """The adapter effectively applied to ``target`` at ``layer`` under a
    factor-``factor`` entry: vertical plus horizontal, parameter-wise."""
    if target not in bank.targets:
        raise ValueError(f"projection {target!r} is not adapted (targets: {bank.targets})")
    if not 1 <= layer <= bank.n_layers:
        raise ValueError(f"layer {layer} outside 1..{bank.n_layers}")
    if factor != 1 and not 2 <= factor <= bank.max_factor:
        raise ValueError(f"factor exceeds trained compensators: {factor} > {bank.max_factor}")
    v = bank.vertical[(layer, target)]
    if factor == 1:
        return LoraAdapter(a=Tensor(v.a.data.copy()), b=Tensor(v.b.data.copy()),
                           rank=v.rank, alpha=v.alpha)
    h = bank.horizontal[(factor, target)]
    return LoraAdapter(a=Tensor(v.a.data + h.a.data), b=Tensor(v.b.data + h.b.data),
                       rank=v.rank, alpha=v.alpha)


def apply_adapter(weight: Tensor, adapter: LoraAdapter) -> np.ndarray:
    """Materialized effective projection; the forward path instead computes
    x @ W + scaling * ((x @ A) @ B), which matches this within 1e-12."""
    if weight.shape != (adapter.a.shape[0], adapter.b.shape[1]):
        raise T.ShapeError(f"adapter {adapter.a.shape}x{adapter.b.shape} does not fit "
                           f"projection {weight.shape}")
    return weight.data + adapter.delta()


# ---------------------------------------------------------------------------
# compensation fine-tuning


def compensation_train(model, bank: AdapterBank, examples, cfg, log_file=None):
    """Fit the adapter bank on sampled substructures with the base frozen.

    Every step samples a substructure (depth plus width events), composes
    the per-layer adapters from its entry factors, and optimizes the
    contrastive re-ranking objective at the substructure's exit head with
    respect to bank parameters only. Base weights are left untouched.
    """
    from .distill import SGD, contrastive_loss, sample_events
    from .model import render_input
    from .shapes import ShapeSpec

    model.set_trainable(False)
    opt = SGD(bank.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            total = 0.0
            for idx in chunk:
                ex = examples[idx]
                depth = int(rng.integers(cfg.depth_min, model.config.n_layers + 1))
                events = sample_events(rng, depth, cfg.factors, cfg.max_events)
                spec = ShapeSpec(depth=depth, events=events)
                scores = []
                gt = None
                for ci, (did, tokens) in enumerate(ex.candidates):
                    inp = render_input(ex.query, tokens, model.config.max_seq_len)
                    shape = spec.resolve(len(inp))
                    states = model.forward_layers(inp, shape, adapters=bank)
                    scores.append(model.score_at_layer(states, depth))
                    if did == ex.positive_did:
                        gt = ci
                loss = contrastive_loss(T.concat(scores, axis=0), gt, cfg.tau)
                loss.backward()
                total += loss.item()
            opt.step()
            bank.zero_grad()
            step += 1
            if log_file is not None:
                log_file.write(json.dumps({"step": step, "epoch": epoch,
                                           "loss": total / len(chunk), "lr": cfg.lr}) + "\n")
    model.set_trainable(True)
    return bank


# ---------------------------------------------------------------------------
# bank checkpoints: same container framing as model checkpoints


def save_bank(path, bank: AdapterBank) -> None:
    params = bank.parameters()
    names = sorted(params)
    manifest = sorted(
        [{"family": "v", "index": layer, "projection": t, "rank": bank.rank}
         for (layer, t) in bank.vertical]
        + [{"family": "h", "index": k, "projection": t, "rank": bank.rank}
           for (k, t) in bank.horizontal],
        key=lambda e: (e["family"], e["index"], e["projection"]))
    header = json.dumps({
        "format": 1, "kind": "adapter-bank",
        "rank": bank.rank, "alpha": bank.alpha, "max_factor": bank.max_factor,
        "targets": list(bank.targets), "n_layers": bank.n_layers,
        "sum_products": bank.sum_products,
        "manifest": manifest, "tensors": names,
    }).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for name in names:
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(T._tensor_bytes(params[name]))


def load_bank(path, model_config) -> AdapterBank:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen].decode())
    if header.get("kind") != "adapter-bank":
        raise ValueError(f"{path} is not an adapter bank checkpoint")
    bank = AdapterBank(model_config, rank=header["rank"], alpha=header["alpha"],
                       max_factor=header["max_factor"], targets=tuple(header["targets"]),
                       sum_products=header.get("sum_products", False))
    params = bank.parameters()
    offset = 8 + hlen
    for _ in header["tensors"]:
        (nlen,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + nlen].decode()
        offset += nlen
        t, offset = T.tensor_from_bytes(blob, offset)
        params[name].data[:] = t.data
    return bank
