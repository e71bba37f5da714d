"""Runtime shape configuration, width compression and compute accounting.

A full-scale model of N layers can be cut down at inference time along two
axes: depth (score from layer n's head instead of layer N's) and width
(merge groups of hidden states between layers, so deeper layers see shorter
sequences). This module owns the bookkeeping for both:

* ``ShapeConfig``: a resolved per-input substructure request, with explicit
  non-increasing widths and the requested aggregation factor per layer.
* ``ShapeSpec``: a portable request (explicit widths or compression events)
  that resolves against a concrete input length.
* ``plan_compression`` / ``compress_layer``: split a sequence into
  consecutive size-k groups, pick the groups whose summed last-token
  attention weight is lowest, and merge each picked group into one row via
  attention-softmax pooling.
* ``flops_estimate``: multiply-add cost model and savings ratio.

Group-size subtlety: the final position is the scoring token of a rendered
input and is never merged away (its group is excluded from pooling, which is
the default ``protect_last=True``). Exact targets like "halve 8 to 4" are
therefore sometimes unreachable with the literal requested factor; the
planner then derives the smallest group size that reaches the target
exactly. The *requested* factor is still recorded on the ShapeConfig, since
it is the user-facing knob that downstream consumers (adapter selection)
key on.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, concat, matmul, narrow, reshape, softmax

__all__ = [
    "ShapeError",
    "ShapeConfig",
    "ShapeSpec",
    "CompressionPlan",
    "FlopsReport",
    "full_shape",
    "validate_config",
    "plan_compression",
    "compress_layer",
    "feasible_group_size",
    "event_target_width",
    "flops_estimate",
    "parse_shape_file",
    "parse_point",
    "point_label",
]


class ShapeError(ValueError):
    """A shape request violates a structural constraint."""


@dataclass(frozen=True)
class ShapeConfig:
    """Resolved substructure: depth, per-layer entry widths, requested factors.

    ``widths[i]`` is the sequence length entering layer i+1 (0-based list);
    ``widths[0]`` equals the raw input length. ``factors[i]`` is the
    requested aggregation factor for the compression producing that entry
    width (1 where no compression happens, so ``factors[0]`` is always 1).
    """

    depth: int
    widths: tuple[int, ...]
    factors: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.factors:
            derived = [1]
            for i in range(1, len(self.widths)):
                prev, cur = self.widths[i - 1], self.widths[i]
                derived.append(1 if cur == prev else (feasible_group_size(prev, cur) or 0))
            object.__setattr__(self, "factors", tuple(derived))

    @property
    def is_full_width(self) -> bool:
        return all(w == self.widths[0] for w in self.widths)

    def digest(self) -> str:
        raw = f"d{self.depth}:w{','.join(map(str, self.widths))}"
        return hashlib.sha256(raw.encode()).hexdigest()[:10]


def full_shape(depth: int, input_len: int) -> ShapeConfig:
    return ShapeConfig(depth, (input_len,) * depth, (1,) * depth)


@dataclass(frozen=True)
class CompressionPlan:
    """One layer's pooling plan over consecutive groups.

    ``groups`` are (start, stop) index spans covering the sequence in order;
    ``selected`` are indices into ``groups`` to be pooled; the rest pass
    through unchanged. ``group_size`` is the span size used for grouping
    (the last group may be smaller).
    """

    length: int
    group_size: int
    groups: tuple[tuple[int, int], ...]
    selected: frozenset[int]
    result_len: int

    @property
    def is_identity(self) -> bool:
        return not self.selected


@dataclass(frozen=True)
class FlopsReport:
    total: float
    full_total: float
    savings: float
    per_layer: tuple[dict, ...]


# ---------------------------------------------------------------------------
# validation


def validate_config(shape: ShapeConfig, model, input_len: int) -> None:
    """Raise ShapeError naming the violated constraint; accept otherwise."""
    n = shape.depth
    if n < 1:
        raise ShapeError(f"depth must be at least 1, got {n}")
    if n > model.n_layers:
        raise ShapeError(f"depth exceeds model: {n} > {model.n_layers}")
    if len(shape.widths) != n:
        raise ShapeError(f"expected {n} widths, got {len(shape.widths)}")
    if shape.widths[0] != input_len:
        raise ShapeError(
            f"first width must equal the input length: {shape.widths[0]} != {input_len}")
    for i, w in enumerate(shape.widths):
        if w > model.max_seq_len:
            raise ShapeError(f"width {w} at layer {i + 1} exceeds model maximum {model.max_seq_len}")
        if w < 1:
            raise ShapeError(f"width at layer {i + 1} must be at least 1, got {w}")
    for prev, cur in zip(shape.widths, shape.widths[1:]):
        if cur > prev:
            raise ShapeError(f"widths must be non-increasing, got {prev} -> {cur}")
    for i in range(1, n):
        a, b = shape.widths[i - 1], shape.widths[i]
        if b < a and feasible_group_size(a, b) is None:
            raise ShapeError(f"width transition {a} -> {b} at layer {i + 1} is not reachable "
                             "without merging the final position")


# ---------------------------------------------------------------------------
# grouping and planning


def _group_spans(length: int, k: int) -> list[tuple[int, int]]:
    return [(s, min(s + k, length)) for s in range(0, length, k)]


def _selectable(groups, protect_last: bool) -> list[int]:
    """Groups eligible for pooling: full-size spans, minus the final-token
    group when it is protected. A short trailing group is pass-through."""
    k = groups[0][1] - groups[0][0]
    out = []
    last = len(groups) - 1
    for gi, (s, e) in enumerate(groups):
        if e - s < max(k, 2):
            continue
        if protect_last and gi == last:
            continue
        out.append(gi)
    return out


def feasible_group_size(length: int, target: int) -> int | None:
    """Smallest group size k >= 2 that reaches ``target`` exactly while
    keeping the final position out of every pooled group."""
    diff = length - target
    if diff == 0:
        return 1
    if diff < 0 or target < 1:
        return None
    for k in range(2, length + 1):
        if diff % (k - 1):
            continue
        m = diff // (k - 1)
        groups = _group_spans(length, k)
        if m <= len(_selectable(groups, protect_last=True)):
            return k
    return None


def event_target_width(width: int, factor: int) -> int:
    """Entry width produced by a factor-k compression event: ceil(w/k),
    clamped so the final position always survives as its own row."""
    if width <= 2:
        return width
    return max(2, math.ceil(width / factor))


def plan_compression(attn, current_len: int, target_len: int, k: int,
                     protect_last: bool = True) -> CompressionPlan:
    """Plan which size-``k`` groups to pool so ``current_len`` shrinks toward
    ``target_len``.

    Groups are consecutive spans of ``k`` positions (last possibly smaller).
    Pooling one full group removes k-1 positions; the planner pools the
    ceil((current-target)/(k-1)) groups with the lowest summed attention
    weights, breaking ties toward the earlier group. When the exact target
    is not a multiple of k-1 away, the achieved ``result_len`` is reported
    on the plan. With ``protect_last`` (the default) the group containing
    the final position is never pooled.
    """
    a = np.asarray(attn, dtype=np.float64).reshape(-1)
    if a.size != current_len:
        raise ShapeError(f"attention length {a.size} does not match sequence length {current_len}")
    if k < 2:
        raise ShapeError(f"aggregation factor must be at least 2, got {k}")
    if target_len > current_len:
        raise ShapeError(f"target length {target_len} exceeds current length {current_len}")
    groups = tuple(_group_spans(current_len, k))
    if target_len == current_len:
        return CompressionPlan(current_len, k, groups, frozenset(), current_len)
    candidates = _selectable(groups, protect_last)
    m = math.ceil((current_len - target_len) / (k - 1))
    if m > len(candidates):
        raise ShapeError(
            f"target {target_len} is below the minimum achievable length "
            f"{current_len - len(candidates) * (k - 1)} for factor {k}")
    sums = [(float(np.sum(a[s:e])), gi) for gi, (s, e) in enumerate(groups) if gi in set(candidates)]
    sums.sort(key=lambda t: (t[0], t[1]))
    selected = frozenset(gi for _, gi in sums[:m])
    return CompressionPlan(current_len, k, groups, selected, current_len - m * (k - 1))


def plan_for_target(attn, current_len: int, target_len: int,
                    requested_factor: int | None = None) -> CompressionPlan:
    """Plan an exact-width transition, preferring the requested factor's
    group size but falling back to the smallest feasible one."""
    diff = current_len - target_len
    if diff == 0:
        return plan_compression(attn, current_len, current_len, max(requested_factor or 2, 2))
    k = None
    if requested_factor and requested_factor >= 2 and diff % (requested_factor - 1) == 0:
        m = diff // (requested_factor - 1)
        if m <= len(_selectable(_group_spans(current_len, requested_factor), True)):
            k = requested_factor
    if k is None:
        k = feasible_group_size(current_len, target_len)
    if k is None or k == 1:
        raise ShapeError(f"width transition {current_len} -> {target_len} is not reachable "
                         "without merging the final position")
    return plan_compression(attn, current_len, target_len, k)


def compress_layer(state, plan: CompressionPlan) -> Tensor:
    """Merge each selected group of hidden rows into one pooled row.

    Pooling weights are the softmax of the group's last-token attention
    weights, so every output row is a convex combination of its group's
    input rows. Pass-through spans are copied unchanged and order is
    preserved.
    """
    hidden, attn = state.hidden, state.last_token_attn
    if hidden.shape[0] != plan.length or attn.shape[0] != plan.length:
        raise ShapeError(f"plan length {plan.length} does not match state length {hidden.shape[0]}")
    pieces = []
    run_start = None
    for gi, (s, e) in enumerate(plan.groups):
        if gi in plan.selected:
            if run_start is not None:
                pieces.append(narrow(hidden, 0, run_start, s))
                run_start = None
            w = softmax(narrow(attn, 0, s, e), axis=0)
            pieces.append(matmul(reshape(w, 1, e - s), narrow(hidden, 0, s, e)))
        elif run_start is None:
            run_start = s
    if run_start is not None:
        pieces.append(narrow(hidden, 0, run_start, plan.length))
    out = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
    assert out.shape[0] == plan.result_len
    return out


# ---------------------------------------------------------------------------
# portable shape requests


@dataclass(frozen=True)
class ShapeSpec:
    """Portable substructure request, resolvable against any input length.

    Either explicit ``widths`` (absolute targets, min-clamped per input) or
    ``events`` as (layer, factor) pairs: compress layer j's output by
    factor k before layer j+1 consumes it.
    """

    depth: int
    widths: tuple[int, ...] = ()
    events: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def resolve(self, input_len: int) -> ShapeConfig:
        if self.widths:
            widths = [input_len]
            for w in self.widths[1:]:
                widths.append(max(1, min(w, widths[-1])))
            return ShapeConfig(self.depth, tuple(widths))
        by_layer = dict(self.events)
        widths = [input_len]
        factors = [1]
        for layer in range(1, self.depth):
            w = widths[-1]
            k = by_layer.get(layer, 0)
            if k >= 2:
                t = event_target_width(w, k)
                widths.append(t)
                factors.append(k if t < w else 1)
            else:
                widths.append(w)
                factors.append(1)
        return ShapeConfig(self.depth, tuple(widths), tuple(factors))


_POINT_RE = re.compile(r"^d(\d+)((?:\+l\d+k\d+)*)$")


def parse_point(text: str) -> ShapeSpec:
    """Parse a compact grid-point label like ``d4+l2k2`` (depth 4, factor-2
    compression of layer 2's output)."""
    m = _POINT_RE.match(text.strip())
    if not m:
        raise ShapeError(f"bad shape point {text!r}; expected d<depth>[+l<layer>k<factor>...]")
    depth = int(m.group(1))
    events = []
    for ev in re.findall(r"\+l(\d+)k(\d+)", m.group(2)):
        layer, k = int(ev[0]), int(ev[1])
        if k < 2:
            raise ShapeError(f"factor must be at least 2 in {text!r}")
        events.append((layer, k))
    return ShapeSpec(depth=depth, events=tuple(events))


def point_label(spec: ShapeSpec) -> str:
    if spec.widths:
        return f"d{spec.depth}:w" + ",".join(map(str, spec.widths))
    return f"d{spec.depth}" + "".join(f"+l{j}k{k}" for j, k in spec.events)


def parse_shape_file(path) -> ShapeSpec:
    """Read a one-shape text file.

    Accepted keys, one per line: ``depth: n`` and then either
    ``widths: w1,w2,...,wn`` or one or more ``compress: layer=j factor=k``
    lines. Blank lines and ``#`` comments are skipped. Errors cite the
    offending line number.
    """
    depth = None
    widths: tuple[int, ...] = ()
    events: list[tuple[int, int]] = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise ShapeError(f"{path}:{lineno}: expected 'key: value', got {line!r}")
            key, value = (part.strip() for part in line.split(":", 1))
            if key == "depth":
                try:
                    depth = int(value)
                except ValueError:
                    raise ShapeError(f"{path}:{lineno}: depth must be an integer") from None
            elif key == "widths":
                try:
                    widths = tuple(int(v) for v in value.split(","))
                except ValueError:
                    raise ShapeError(f"{path}:{lineno}: widths must be comma-separated integers") from None
            elif key == "compress":
                m = re.match(r"^layer=(\d+)\s+factor=(\d+)$", value)
                if not m:
                    raise ShapeError(f"{path}:{lineno}: expected 'compress: layer=j factor=k'")
                events.append((int(m.group(1)), int(m.group(2))))
            else:
                raise ShapeError(f"{path}:{lineno}: unknown key {key!r}")
    if depth is None:
        raise ShapeError(f"{path}: missing 'depth' entry")
    if widths and events:
        raise ShapeError(f"{path}: give either widths or compress entries, not both")
    if widths and len(widths) != depth:
        raise ShapeError(f"{path}: depth is {depth} but {len(widths)} widths given")
    return ShapeSpec(depth=depth, widths=widths, events=tuple(events))


# ---------------------------------------------------------------------------
# cost model


def _layer_cost(w: int, model) -> dict:
    d, d_ff = model.d_model, model.d_ff
    attention = 2.0 * w * w * d + 4.0 * w * d * d
    mlp = 2.0 * w * d * d_ff * model.mlp_mats
    head = float(d)
    return {"width": w, "attention": attention, "mlp": mlp, "head": head,
            "total": attention + mlp + head}


def flops_estimate(shape: ShapeConfig, model, input_len: int) -> FlopsReport:
    """Multiply-add cost of running ``shape`` versus the full-scale model.

    Per layer: attention costs 2 w^2 d + 4 w d^2 and the MLP costs
    2 w d d_ff per projection matrix, both at the layer's entry width w.
    Each executed layer carries one scoring-head evaluation (cost d), since
    the architecture exposes a score at every layer it runs. Softmax and
    normalization work is not counted. Savings = 1 - cost/full_cost.
    """
    validate_config(shape, model, input_len)
    per_layer = tuple(_layer_cost(w, model) for w in shape.widths)
    total = sum(c["total"] for c in per_layer)
    full = _layer_cost(input_len, model)["total"] * model.n_layers
    return FlopsReport(total=total, full_total=full, savings=1.0 - total / full,
                       per_layer=per_layer)
