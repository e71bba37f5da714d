"""Synthetic retrieval task, ranking metrics, compression sweeps and the
relative-performance ablation protocol.

The task plants relevance: each query is a short token pattern, the one
positive document contains that pattern contiguously at a random offset
among neutral noise, and every negative carries a decoy pattern corrupted
at a controlled Hamming distance. Negatives come in three difficulty
grades, all with the decoy's displaced tokens handled so that the lexical
first-stage retriever (plain query-token set overlap) sees what it should:

* poisoned decoys: the substituted positions draw from a reserved decoy
  sub-vocabulary that never appears in positives, and the displaced pattern
  tokens are re-inserted into the noise. Set overlap with the query ties
  the positive, so the lexical baseline is blind, while the model can learn
  the poison markers directly.
* visible decoys: substitutions from the neutral pool without re-insertion,
  so the doc is missing pattern tokens and even the lexical baseline
  demotes it. These keep the baseline clearly above random.
* overloaded decoys: the pattern survives intact but extra tokens from the
  pattern vocabulary (not in this query) are scattered through the noise.
  Full overlap keeps the baseline blind; demoting these requires weighing
  the doc's pattern-vocabulary content against the query itself, a deeper
  capability than marker spotting.
* twins: substitutions from the neutral pool with re-insertion, leaving a
  bag of tokens indistinguishable from the positive. Twins cap the
  attainable ranking quality and preserve headroom between model variants.

The pattern, neutral and decoy vocabularies are disjoint. Grade counts,
decoy distance and the vocabulary split are the difficulty knobs.

Sweeps walk a grid of substructure requests (height-only, width-only or
joint), evaluate each on the held-out split and emit one frozen-schema CSV
row per grid point plus the first-stage baseline row.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from .model import render_input
from .shapes import ShapeSpec, flops_estimate, parse_point, point_label

__all__ = [
    "TaskConfig", "Example", "EvalResult", "SweepSpec",
    "generate_examples", "write_examples", "read_examples",
    "first_stage_retrieve", "rerank", "mrr_at_k", "ndcg_at_k",
    "evaluate", "run_sweep", "run_sweeps", "write_sweep_csv",
    "rel_perf", "write_relperf_csv", "parse_kv_file",
    "parse_task_config", "parse_sweep_file", "file_sha256", "write_manifest",
]

SWEEP_SCHEMA = "1"
SWEEP_COLUMNS = ("schema_version", "config_id", "mode", "depth", "widths_digest",
                 "flops_savings", "mrr_at_10", "ndcg_at_10", "wallclock_ms", "error")
RELPERF_SCHEMA = "1"
RELPERF_COLUMNS = ("schema_version", "variant", "mrr_at_10", "rel_perf_pct")


# ---------------------------------------------------------------------------
# key = value config files


def parse_kv_file(path) -> dict[str, str]:
    """Parse a ``key = value`` text file; errors cite line numbers."""
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class TaskConfig:
    vocab_size: int = 64
    query_len: tuple[int, int] = (4, 6)
    doc_len: tuple[int, int] = (12, 18)
    candidates: int = 16
    decoy_hamming: tuple[int, ...] = (1, 2)
    twin_negatives: int = 0
    visible_negatives: int = 3
    overloaded_negatives: int = 0
    overload_extra: tuple[int, ...] = (1, 2)
    pattern_vocab: int = 20
    decoy_vocab: int = 12
    train_queries: int = 2000
    eval_queries: int = 200
    seed: int = 12345


def parse_task_config(path) -> TaskConfig:
    raw = parse_kv_file(path)
    cfg = TaskConfig()
    casts = {
        "vocab_size": int, "candidates": int, "train_queries": int,
        "eval_queries": int, "seed": int, "twin_negatives": int,
        "visible_negatives": int, "overloaded_negatives": int,
        "pattern_vocab": int, "decoy_vocab": int,
        "query_len": lambda v: tuple(int(x) for x in v.split(",")),
        "doc_len": lambda v: tuple(int(x) for x in v.split(",")),
        "decoy_hamming": lambda v: tuple(int(x) for x in v.split(",")),
        "overload_extra": lambda v: tuple(int(x) for x in v.split(",")),
    }
    for key, value in raw.items():
        if key not in casts:
            raise ValueError(f"{path}: unknown task config key {key!r}")
        setattr(cfg, key, casts[key](value))
    return cfg


@dataclass
class Example:
    qid: int
    query: tuple[int, ...]
    candidates: tuple[tuple[int, tuple[int, ...]], ...]  # (did, tokens)
    positive_did: int


def _vocab_split(cfg: TaskConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint (pattern, neutral, decoy) pools; ids 0..2 are markers."""
    content = np.arange(3, cfg.vocab_size)
    neutral_size = content.size - cfg.pattern_vocab - cfg.decoy_vocab
    if cfg.pattern_vocab < max(cfg.query_len) + max(cfg.overload_extra):
        raise ValueError("pattern_vocab too small for queries plus overload tokens")
    if neutral_size < 2 or cfg.decoy_vocab < max(cfg.decoy_hamming):
        raise ValueError("vocabulary split leaves too few neutral or decoy tokens")
    return (content[:cfg.pattern_vocab],
            content[cfg.pattern_vocab:cfg.pattern_vocab + neutral_size],
            content[cfg.pattern_vocab + neutral_size:])


def _plant(rng, block: np.ndarray, dlen: int, noise_pool: np.ndarray,
           reinsert: np.ndarray | None) -> tuple[int, ...]:
    doc = noise_pool[rng.integers(0, noise_pool.size, size=dlen)]
    offset = int(rng.integers(0, dlen - block.size + 1))
    doc[offset:offset + block.size] = block
    if reinsert is not None and reinsert.size:
        outside = np.concatenate([np.arange(0, offset),
                                  np.arange(offset + block.size, dlen)])
        take = min(reinsert.size, outside.size)
        if take:
            slots = rng.choice(outside, size=take, replace=False)
            doc[slots] = reinsert[:take]
    return tuple(int(t) for t in doc)


def generate_examples(cfg: TaskConfig, split: str = "train") -> list[Example]:
    """Deterministically regenerate the split from (seed, params)."""
    if split == "train":
        rng = np.random.default_rng(cfg.seed)
        count = cfg.train_queries
    elif split == "eval":
        rng = np.random.default_rng(cfg.seed + 1)
        count = cfg.eval_queries
    else:
        raise ValueError(f"unknown split {split!r}")
    pattern_pool, neutral, poison = _vocab_split(cfg)
    qmin, qmax = cfg.query_len
    dmin, dmax = cfg.doc_len
    if dmin < qmax + max(cfg.overload_extra):
        raise ValueError("doc_len range must cover the pattern plus overload tokens")
    fixed = cfg.twin_negatives + cfg.visible_negatives + cfg.overloaded_negatives
    if fixed >= cfg.candidates:
        raise ValueError("grade counts exceed the negative budget")
    grades = (["twin"] * cfg.twin_negatives + ["visible"] * cfg.visible_negatives
              + ["overloaded"] * cfg.overloaded_negatives
              + ["poisoned"] * (cfg.candidates - 1 - fixed))
    examples = []
    for qid in range(count):
        qlen = int(rng.integers(qmin, qmax + 1))
        pattern = rng.choice(pattern_pool, size=qlen, replace=False)
        spare = np.setdiff1d(pattern_pool, pattern)
        docs = [_plant(rng, pattern, int(rng.integers(dmin, dmax + 1)), neutral, None)]
        for grade in grades:
            dlen = int(rng.integers(dmin, dmax + 1))
            if grade == "overloaded":
                g = int(cfg.overload_extra[rng.integers(0, len(cfg.overload_extra))])
                extra = rng.choice(spare, size=min(g, spare.size), replace=False)
                docs.append(_plant(rng, pattern, dlen, neutral, extra))
                continue
            h = min(int(cfg.decoy_hamming[rng.integers(0, len(cfg.decoy_hamming))]), qlen)
            decoy = pattern.copy()
            spots = rng.choice(qlen, size=h, replace=False)
            removed = decoy[spots].copy()
            source = poison if grade == "poisoned" else neutral
            decoy[spots] = rng.choice(source, size=h, replace=False)
            reinsert = None if grade == "visible" else rng.permutation(removed)
            docs.append(_plant(rng, decoy, dlen, neutral, reinsert))
        order = rng.permutation(len(docs))
        cands = tuple((did, docs[src]) for did, src in enumerate(order))
        positive_did = int(np.argwhere(order == 0)[0][0])
        examples.append(Example(qid=qid, query=tuple(int(t) for t in pattern),
                                candidates=cands, positive_did=positive_did))
    return examples


def write_examples(path, examples) -> None:
    with open(path, "w") as f:
        for ex in examples:
            f.write(json.dumps({
                "qid": ex.qid,
                "query_tokens": list(ex.query),
                "candidates": [{"did": did, "tokens": list(tokens)}
                               for did, tokens in ex.candidates],
                "positive_did": ex.positive_did,
            }) + "\n")


def read_examples(path) -> list[Example]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(Example(
                qid=rec["qid"], query=tuple(rec["query_tokens"]),
                candidates=tuple((c["did"], tuple(c["tokens"])) for c in rec["candidates"]),
                positive_did=rec["positive_did"]))
    return out


# ---------------------------------------------------------------------------
# first stage and re-ranking


def first_stage_retrieve(example: Example, top_m: int | None = None):
    """Weak lexical retriever: order candidates by query-token overlap count
    (set intersection), ties broken toward the lower document id."""
    qset = set(example.query)
    scored = [(-len(qset & set(tokens)), did, (did, tokens))
              for did, tokens in example.candidates]
    scored.sort(key=lambda t: (t[0], t[1]))
    ranked = [c for _, _, c in scored]
    return ranked if top_m is None else ranked[:top_m]


def rerank(model, example: Example, spec: ShapeSpec, bank=None):
    """Score every candidate at the request's exit head; returns candidates
    ordered by descending score (ties toward the lower id) plus the scores."""
    from .tensor import no_grad

    scores = {}
    with no_grad():
        for did, tokens in example.candidates:
            inp = render_input(example.query, tokens, model.config.max_seq_len)
            states = model.forward_layers(inp, spec.resolve(len(inp)), adapters=bank)
            scores[did] = model.score_at_layer(states, spec.depth).item()
    ranked = sorted(example.candidates, key=lambda c: (-scores[c[0]], c[0]))
    return ranked, scores


# ---------------------------------------------------------------------------
# metrics


def mrr_at_k(ranks, k: int = 10) -> float:
    """Mean reciprocal rank truncated at k; ``None`` means not retrieved."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("mrr over an empty rank list")
    total = 0.0
    for r in ranks:
        if r is not None:
            if r < 1:
                raise ValueError(f"ranks are 1-based, got {r}")
            if r <= k:
                total += 1.0 / r
    return total / len(ranks)


def ndcg_at_k(relevance_lists, k: int = 10) -> float:
    """Binary-relevance NDCG with log2 discounting, 0 when nothing relevant."""
    lists = list(relevance_lists)
    if not lists:
        raise ValueError("ndcg over an empty list")
    total = 0.0
    for rels in lists:
        rels = list(rels)
        dcg = sum(rel / math.log2(i + 2) for i, rel in enumerate(rels[:k]))
        ideal = sorted(rels, reverse=True)
        idcg = sum(rel / math.log2(i + 2) for i, rel in enumerate(ideal[:k]))
        total += dcg / idcg if idcg > 0 else 0.0
    return total / len(lists)


def _ranked_metrics(ranked_ids, positive_ids, k: int = 10) -> tuple[float, float]:
    ranks = []
    rel_lists = []
    for ids, pos in zip(ranked_ids, positive_ids):
        try:
            rank = ids.index(pos) + 1
        except ValueError:
            rank = None
        ranks.append(rank)
        rel_lists.append([1 if did == pos else 0 for did in ids])
    return mrr_at_k(ranks, k), ndcg_at_k(rel_lists, k)


# ---------------------------------------------------------------------------
# evaluation and sweeps


@dataclass
class EvalResult:
    config_id: str
    mode: str
    depth: int
    widths_digest: str
    flops_savings: float | None
    mrr_at_10: float
    ndcg_at_10: float
    wallclock_ms: float
    error: str = ""

    def row(self) -> list[str]:
        return [SWEEP_SCHEMA, self.config_id, self.mode, str(self.depth), self.widths_digest,
                "" if self.flops_savings is None else f"{self.flops_savings:.6f}",
                f"{self.mrr_at_10:.6f}", f"{self.ndcg_at_10:.6f}",
                f"{self.wallclock_ms:.3f}", self.error]


@dataclass
class SweepSpec:
    """One sweep: a mode label and its grid of substructure requests."""

    mode: str
    points: tuple[ShapeSpec, ...]
    seed: int = 0
    candidates: int = 16

    def __post_init__(self):
        if self.mode not in ("height", "width", "joint"):
            raise ValueError(f"unknown sweep mode {self.mode!r}")


def parse_sweep_file(path) -> SweepSpec:
    """Sweep spec text: ``mode = height|width|joint``, optional ``seed`` and
    ``candidates``, then one ``point = d<depth>[+l<layer>k<factor>...]`` line
    per grid point. Errors cite line numbers."""
    mode = None
    seed = 0
    candidates = 16
    points: list[ShapeSpec] = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key == "mode":
                mode = value
            elif key == "seed":
                seed = int(value)
            elif key == "candidates":
                candidates = int(value)
            elif key == "point":
                try:
                    points.append(parse_point(value))
                except ValueError as e:
                    raise ValueError(f"{path}:{lineno}: {e}") from None
            else:
                raise ValueError(f"{path}:{lineno}: unknown sweep key {key!r}")
    if mode is None:
        raise ValueError(f"{path}: missing 'mode' entry")
    if not points:
        raise ValueError(f"{path}: no grid points")
    return SweepSpec(mode=mode, points=tuple(points), seed=seed, candidates=candidates)


def evaluate(model, examples, spec: ShapeSpec, bank=None, clock=None) -> tuple[float, float, float, float]:
    """Metrics plus mean FLOPs savings for one substructure request.

    Savings are averaged over every rendered candidate length in the split,
    since widths resolve per input. Returns (mrr, ndcg, savings, millis).
    """
    clock = clock or time.perf_counter
    t0 = clock()
    ranked_ids = []
    positives = []
    savings = []
    for ex in examples:
        ranked, _ = rerank(model, ex, spec, bank)
        ranked_ids.append([did for did, _ in ranked])
        positives.append(ex.positive_did)
        for _, tokens in ex.candidates:
            n = len(render_input(ex.query, tokens, model.config.max_seq_len))
            savings.append(flops_estimate(spec.resolve(n), model.config, n).savings)
    millis = (clock() - t0) * 1000.0
    mrr, ndcg = _ranked_metrics(ranked_ids, positives)
    return mrr, ndcg, float(np.mean(savings)), millis


def baseline_result(examples, clock=None) -> EvalResult:
    clock = clock or time.perf_counter
    t0 = clock()
    ranked_ids = [[did for did, _ in first_stage_retrieve(ex)] for ex in examples]
    millis = (clock() - t0) * 1000.0
    mrr, ndcg = _ranked_metrics(ranked_ids, [ex.positive_did for ex in examples])
    return EvalResult(config_id="first_stage", mode="baseline", depth=0, widths_digest="-",
                      flops_savings=None, mrr_at_10=mrr, ndcg_at_10=ndcg,
                      wallclock_ms=millis)


def run_sweep(spec: SweepSpec, model, examples, bank=None, clock=None) -> list[EvalResult]:
    """Evaluate every grid point; a point that fails validation becomes an
    error row and the sweep continues."""
    results = []
    for point in spec.points:
        label = f"{spec.mode}:{point_label(point)}"
        digest = hashlib.sha256(point_label(point).encode()).hexdigest()[:10]
        try:
            mrr, ndcg, savings, millis = evaluate(model, examples, point, bank, clock)
            results.append(EvalResult(config_id=label, mode=spec.mode, depth=point.depth,
                                      widths_digest=digest, flops_savings=savings,
                                      mrr_at_10=mrr, ndcg_at_10=ndcg, wallclock_ms=millis))
        except (ValueError, IndexError) as e:
            results.append(EvalResult(config_id=label, mode=spec.mode, depth=point.depth,
                                      widths_digest=digest, flops_savings=None,
                                      mrr_at_10=0.0, ndcg_at_10=0.0, wallclock_ms=0.0,
                                      error=str(e)))
    return results


def run_sweeps(specs, model, examples, bank=None, clock=None) -> list[EvalResult]:
    """Baseline row first, then every sweep's rows in grid order."""
    rows = [baseline_result(examples, clock)]
    for spec in specs:
        rows.extend(run_sweep(spec, model, examples, bank, clock))
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(r.row())


# ---------------------------------------------------------------------------
# relative performance


def rel_perf(light: float, upper: float, baseline: float) -> float:
    """Percent of the upper bound's improvement over the first-stage
    baseline that the lightweight variant retains."""
    light, upper, baseline = float(light), float(upper), float(baseline)
    if upper <= baseline:
        raise ValueError(f"degenerate upperbound: upper {upper} <= baseline {baseline}")
    return 100.0 * (light - baseline) / (upper - baseline)


def write_relperf_csv(path, baseline: float, upper: float, variants: dict[str, float]) -> None:
    """Rows: baseline, upperbound, then each variant with its rel_perf."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RELPERF_COLUMNS)
        w.writerow([RELPERF_SCHEMA, "baseline", f"{baseline:.6f}", "0.0"])
        w.writerow([RELPERF_SCHEMA, "upperbound", f"{upper:.6f}", "100.0"])
        for name, mrr in variants.items():
            w.writerow([RELPERF_SCHEMA, name, f"{mrr:.6f}",
                        f"{rel_perf(mrr, upper, baseline):.1f}"])


# ---------------------------------------------------------------------------
# run manifests


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, seed, configs: dict, checkpoints: dict) -> None:
    """Record what produced a run: seed, config contents, checkpoint hashes."""
    payload = {
        "seed": seed,
        "configs": configs,
        "checkpoint_sha256": {name: file_sha256(p) for name, p in checkpoints.items()},
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
