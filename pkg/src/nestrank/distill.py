"""Contrastive training and cascaded self-distillation.

The full-width pass of the model doubles as a committee of teachers: each
pre-declared committee layer's head produces a score distribution over the
candidates. Every step also runs a sampled student, a full-depth pass whose
widths follow randomly drawn compression events, so each prefix depth d
defines one student substructure scored by head d. Students learn from the
committee members that dominate them (deeper, at least as wide everywhere):
the teacher's softmax probability of the ground-truth candidate weights the
student's cross-entropy at that candidate. Teacher probabilities are
constants (no gradient flows into the committee through them); the
committee itself is anchored to the labels by a plain contrastive loss on
the final full-scale head.

Width schedules are sampled step-like: events (layer j, factor k) only ever
shrink widths with depth, so every drawn schedule is a valid shape request.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import render_input
from .shapes import ShapeConfig, ShapeSpec, full_shape, parse_point
from .tensor import Tensor

__all__ = [
    "SubStructure",
    "TrainBatch",
    "TeacherCommittee",
    "TrainConfig",
    "SGD",
    "contrastive_loss",
    "kd_loss",
    "is_super",
    "select_teachers",
    "sample_events",
    "sample_student",
    "self_distill_step",
    "train",
    "parse_train_config",
]

# A substructure is exactly a resolved shape request: depth, widths and the
# requested per-layer factors, with is_full_width derivable.
SubStructure = ShapeConfig


@dataclass(frozen=True)
class TrainBatch:
    """One listwise training unit: a query, its candidate documents (exactly
    one positive), and the softmax temperature used for its losses."""

    query: tuple[int, ...]
    docs: tuple[tuple[int, ...], ...]
    gt: int
    tau: float = 1.0

    def __post_init__(self):
        if not 0 <= self.gt < len(self.docs):
            raise IndexError(f"ground-truth index {self.gt} outside 0..{len(self.docs) - 1}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


@dataclass(frozen=True)
class TeacherCommittee:
    """Pre-declared full-width teacher layers, sorted, final layer included."""

    layers: tuple[int, ...]

    def __post_init__(self):
        if tuple(sorted(set(self.layers))) != self.layers:
            raise ValueError(f"committee layers must be sorted and unique: {self.layers}")

    def validate(self, n_layers: int) -> None:
        if not self.layers or self.layers[-1] != n_layers:
            raise ValueError(f"committee must include the final layer {n_layers}: {self.layers}")
        if self.layers[0] < 1:
            raise ValueError(f"committee layers must be at least 1: {self.layers}")


@dataclass
class TrainConfig:
    committee: tuple[int, ...] = (2, 4, 8)
    factors: tuple[int, ...] = (2, 4, 8)
    tau: float = 0.5
    lr: float = 0.2
    momentum: float = 0.9
    epochs: int = 1
    seed: int = 7
    batch_size: int = 1
    negatives: int = 15
    teacher_mode: str = "close"
    max_events: int = 2
    method: str = "self-distill"  # or "direct", "fixed-shape"
    fixed_shape: str = ""
    kd_weight: float = 1.0


# ---------------------------------------------------------------------------
# losses


def _as_vector(scores) -> Tensor:
    if isinstance(scores, Tensor):
        return scores if scores.ndim == 1 else T.reshape(scores, scores.size)
    parts = [s if isinstance(s, Tensor) else Tensor([float(s)]) for s in scores]
    return T.concat([T.reshape(p, p.size) for p in parts], axis=0)


def contrastive_loss(scores, gt: int, tau: float = 1.0) -> Tensor:
    """Cross-entropy of the temperature-scaled softmax over candidates at
    the ground-truth index."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    vec = _as_vector(scores)
    if vec.size < 1:
        raise ValueError("need at least one candidate score")
    if not 0 <= gt < vec.size:
        raise IndexError(f"ground-truth index {gt} outside 0..{vec.size - 1}")
    return T.cross_entropy(vec * (1.0 / tau), gt)


def teacher_weight(teacher_scores, gt: int, tau: float = 1.0) -> float:
    """Teacher softmax probability of the ground truth, as a constant."""
    t = np.asarray([s.item() if isinstance(s, Tensor) else float(s) for s in teacher_scores]
                   if not isinstance(teacher_scores, Tensor) else teacher_scores.data,
                   dtype=np.float64).reshape(-1)
    t = t / tau
    t = t - t.max()
    e = np.exp(t)
    return float(e[gt] / e.sum())


def kd_loss(teacher_scores, student_scores, gt: int, tau: float = 1.0) -> Tensor:
    """One distillation term: the teacher's ground-truth probability times
    the student's contrastive loss. The teacher side carries no gradient."""
    s = _as_vector(student_scores)
    t_len = (teacher_scores.size if isinstance(teacher_scores, Tensor)
             else len(teacher_scores))
    if t_len != s.size:
        raise ValueError(f"candidate counts differ: teacher {t_len} vs student {s.size}")
    w = teacher_weight(teacher_scores, gt, tau)
    return contrastive_loss(s, gt, tau) * w


# ---------------------------------------------------------------------------
# dominance and teacher selection


def is_super(teacher: SubStructure, student: SubStructure,
             committee: TeacherCommittee | None = None, mode: str = "all") -> bool:
    """Whether ``teacher`` dominates ``student``: at least as deep and at
    least as wide at every layer the student runs.

    With ``mode='close'`` and a committee, a dominating teacher counts only
    if it is the shallowest committee member still covering the student's
    depth.
    """
    if teacher.depth < student.depth:
        return False
    if any(teacher.widths[i] < student.widths[i] for i in range(student.depth)):
        return False
    if mode == "close":
        if committee is None:
            raise ValueError("close mode needs the committee for the minimality rule")
        covering = [l for l in committee.layers if l >= student.depth]
        return bool(covering) and teacher.depth == covering[0]
    if mode == "all":
        return True
    raise ValueError(f"unknown teacher mode {mode!r}")


def select_teachers(committee: TeacherCommittee, student_depth: int, mode: str) -> tuple[int, ...]:
    covering = [l for l in committee.layers if l >= student_depth]
    if not covering:
        return ()
    if mode == "close":
        return (covering[0],)
    if mode == "all":
        return tuple(covering)
    raise ValueError(f"unknown teacher mode {mode!r}")


# ---------------------------------------------------------------------------
# student sampling


def sample_events(rng, n_layers: int, factors, max_events: int = 2) -> tuple[tuple[int, int], ...]:
    """Draw compression events as (layer, factor) pairs on layers 1..n-1."""
    factors = tuple(factors)
    if not factors:
        raise ValueError("factor set must not be empty")
    if n_layers < 2 or max_events < 1:
        return ()
    count = int(rng.integers(0, max_events + 1))
    if count == 0:
        return ()
    layers = sorted(rng.choice(np.arange(1, n_layers), size=min(count, n_layers - 1),
                               replace=False).tolist())
    return tuple((int(l), int(factors[rng.integers(0, len(factors))])) for l in layers)


def sample_student(rng, input_len: int, n_layers: int, factors,
                   max_events: int = 2) -> SubStructure:
    """Sample a step-like full-depth width schedule.

    An empty event draw yields the full-width student, whose distillation
    terms degenerate to self-consistency with the committee.
    """
    events = sample_events(rng, n_layers, factors, max_events)
    return ShapeSpec(depth=n_layers, events=events).resolve(input_len)


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Stochastic gradient descent with dampened momentum, fixed step size.

    The velocity is an exponential moving average of clipped gradients
    (v = mu v + (1 - mu) g), so with clipping active the parameter movement
    per step is bounded by lr regardless of momentum. ``clip`` bounds the
    global gradient norm; transformers under plain SGD see occasional
    gradient spikes that otherwise force a far smaller learning rate.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9,
                 clip: float = 1.0):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        scale = 1.0
        if self.clip:
            sq = 0.0
            for p in self.params.values():
                if p.grad is not None:
                    sq += float(np.dot(p.grad.reshape(-1), p.grad.reshape(-1)))
            norm = np.sqrt(sq)
            if norm > self.clip:
                scale = self.clip / norm
        mu = self.momentum
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= mu
            v += ((1.0 - mu) * scale) * p.grad
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# the training step


def _score_all_layers(model, states) -> list[Tensor]:
    return [model.score_at_layer(states, i) for i in range(1, len(states) + 1)]


def query_losses(model, batch: TrainBatch, committee: TeacherCommittee,
                 events, cfg: TrainConfig) -> tuple[Tensor, dict]:
    """Forward both roles for one query and assemble the step loss.

    The teacher pass is full width; its committee-layer score vectors give
    the constant distillation weights and its final-layer vector carries the
    label-anchored contrastive loss. The student pass follows the sampled
    event schedule (reusing the teacher pass when the draw is empty) and is
    scored at every depth.
    """
    n_layers = model.config.n_layers
    m = len(batch.docs)
    teacher_vecs: dict[int, list[Tensor]] = {l: [] for l in committee.layers}
    student_vecs: list[list[Tensor]] = [[] for _ in range(n_layers)]
    for doc in batch.docs:
        inp = render_input(batch.query, doc, model.config.max_seq_len)
        t_states = model.forward_layers(inp, full_shape(n_layers, len(inp)))
        student_shape = ShapeSpec(depth=n_layers, events=events).resolve(len(inp))
        s_states = t_states if student_shape.is_full_width \
            else model.forward_layers(inp, student_shape, prefix=t_states)
        s_scores = _score_all_layers(model, s_states)
        for d in range(n_layers):
            student_vecs[d].append(s_scores[d])
        for l in committee.layers:
            if s_states is t_states:
                teacher_vecs[l].append(s_scores[l - 1])
            else:
                teacher_vecs[l].append(model.score_at_layer(t_states, l))

    anchor = contrastive_loss(T.concat(teacher_vecs[n_layers], axis=0), batch.gt, batch.tau)
    kd_terms = []
    for d in range(1, n_layers + 1):
        student_vec = T.concat(student_vecs[d - 1], axis=0)
        for l in select_teachers(committee, d, cfg.teacher_mode):
            w = teacher_weight([t.item() for t in teacher_vecs[l]], batch.gt, batch.tau)
            kd_terms.append(contrastive_loss(student_vec, batch.gt, batch.tau) * w)
    kd = kd_terms[0] if len(kd_terms) == 1 else sum(kd_terms[1:], start=kd_terms[0])
    loss = anchor + kd * cfg.kd_weight
    return loss, {"anchor": anchor.item(), "kd": kd.item(), "candidates": m}


def direct_losses(model, batch: TrainBatch, events, cfg: TrainConfig) -> tuple[Tensor, dict]:
    """Label-only variant: every student depth trains on the ground truth
    directly, with the same sampling and the same full-scale anchor."""
    n_layers = model.config.n_layers
    student_vecs: list[list[Tensor]] = [[] for _ in range(n_layers)]
    anchor_scores: list[Tensor] = []
    for doc in batch.docs:
        inp = render_input(batch.query, doc, model.config.max_seq_len)
        student_shape = ShapeSpec(depth=n_layers, events=events).resolve(len(inp))
        t_states = model.forward_layers(inp, full_shape(n_layers, len(inp)))
        s_states = t_states if student_shape.is_full_width \
            else model.forward_layers(inp, student_shape, prefix=t_states)
        s_scores = _score_all_layers(model, s_states)
        for d in range(n_layers):
            student_vecs[d].append(s_scores[d])
        anchor_scores.append(model.score_at_layer(t_states, n_layers))
    anchor = contrastive_loss(T.concat(anchor_scores, axis=0), batch.gt, batch.tau)
    terms = [contrastive_loss(T.concat(student_vecs[d], axis=0), batch.gt, batch.tau)
             for d in range(n_layers)]
    kd = sum(terms[1:], start=terms[0])
    loss = anchor + kd * cfg.kd_weight
    return loss, {"anchor": anchor.item(), "kd": kd.item(), "candidates": len(batch.docs)}


def fixed_shape_losses(model, batch: TrainBatch, spec: ShapeSpec) -> tuple[Tensor, dict]:
    """Specialized training of one fixed substructure: contrastive loss at
    its exit head only (the prune-and-finetune analogue)."""
    scores = []
    for doc in batch.docs:
        inp = render_input(batch.query, doc, model.config.max_seq_len)
        states = model.forward_layers(inp, spec.resolve(len(inp)))
        scores.append(model.score_at_layer(states, spec.depth))
    loss = contrastive_loss(T.concat(scores, axis=0), batch.gt, batch.tau)
    return loss, {"anchor": loss.item(), "kd": 0.0, "candidates": len(batch.docs)}


def self_distill_step(model, opt: SGD, batch: TrainBatch, committee: TeacherCommittee,
                      rng, cfg: TrainConfig) -> dict:
    """One full training step: sample a schedule, build the loss, update."""
    events = sample_events(rng, model.config.n_layers, cfg.factors, cfg.max_events)
    loss, parts = query_losses(model, batch, committee, events, cfg)
    loss.backward()
    opt.step()
    opt.zero_grad()
    parts["loss"] = loss.item()
    parts["events"] = list(events)
    return parts


# ---------------------------------------------------------------------------
# the training loop


def _example_batch(example, cfg: TrainConfig) -> TrainBatch:
    docs = tuple(tuple(tokens) for _, tokens in example.candidates)
    gt = next(i for i, (did, _) in enumerate(example.candidates) if did == example.positive_did)
    return TrainBatch(query=tuple(example.query), docs=docs, gt=gt, tau=cfg.tau)


def train(model, examples, cfg: TrainConfig, log_file=None) -> None:
    """Run the configured training method over the example stream.

    Batches of ``batch_size`` queries accumulate gradients in a fixed order
    before each optimizer step. Progress is logged as one JSON record per
    step with the loss components and the learning rate.
    """
    committee = TeacherCommittee(tuple(cfg.committee))
    committee.validate(model.config.n_layers)
    fixed = parse_point(cfg.fixed_shape) if cfg.method == "fixed-shape" else None
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            agg = {"loss": 0.0, "anchor": 0.0, "kd": 0.0}
            for idx in chunk:
                batch = _example_batch(examples[idx], cfg)
                if cfg.method == "self-distill":
                    events = sample_events(rng, model.config.n_layers, cfg.factors, cfg.max_events)
                    loss, parts = query_losses(model, batch, committee, events, cfg)
                elif cfg.method == "direct":
                    events = sample_events(rng, model.config.n_layers, cfg.factors, cfg.max_events)
                    loss, parts = direct_losses(model, batch, events, cfg)
                elif cfg.method == "fixed-shape":
                    loss, parts = fixed_shape_losses(model, batch, fixed)
                else:
                    raise ValueError(f"unknown training method {cfg.method!r}")
                loss.backward()
                agg["loss"] += loss.item()
                agg["anchor"] += parts["anchor"]
                agg["kd"] += parts["kd"]
            opt.step()
            opt.zero_grad()
            step += 1
            if log_file is not None:
                n = len(chunk)
                log_file.write(json.dumps({
                    "step": step, "epoch": epoch, "loss": agg["loss"] / n,
                    "anchor": agg["anchor"] / n, "kd": agg["kd"] / n, "lr": cfg.lr,
                }) + "\n")


# ---------------------------------------------------------------------------
# config file


def parse_train_config(path) -> TrainConfig:
    """Read a key = value training config; unknown keys are errors."""
    from .bench import parse_kv_file

    raw = parse_kv_file(path)
    cfg = TrainConfig()
    casts = {
        "committee": lambda v: tuple(int(x) for x in v.split(",")),
        "factors": lambda v: tuple(int(x) for x in v.split(",")),
        "tau": float, "lr": float, "momentum": float, "kd_weight": float,
        "epochs": int, "seed": int, "batch_size": int, "negatives": int,
        "max_events": int, "teacher_mode": str, "method": str, "fixed_shape": str,
    }
    for key, value in raw.items():
        if key not in casts:
            raise ValueError(f"{path}: unknown training config key {key!r}")
        setattr(cfg, key, casts[key](value))
    return cfg
