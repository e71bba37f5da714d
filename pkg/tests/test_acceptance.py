"""Acceptance suite: every criterion runs at its stated tolerance and
prints one PASS/FAIL line.

The expensive pipeline (harness-default data, one self-distillation epoch,
one compensation epoch, the ablation trainings and the three sweeps) runs
once as a session fixture shared by the criteria that need trained
artifacts. Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import time

import numpy as np
import pytest

import nestrank.tensor as T
from nestrank import (
    ModelConfig,
    RerankerModel,
    ShapeSpec,
    full_shape,
    params_checksum,
    render_input,
)
from nestrank.bench import (
    SweepSpec,
    TaskConfig,
    baseline_result,
    evaluate,
    generate_examples,
    run_sweeps,
    rel_perf,
    write_sweep_csv,
)
from nestrank.distill import (
    TrainConfig,
    contrastive_loss,
    kd_loss,
    sample_events,
    train,
)
from nestrank.lora import AdapterBank, compensation_train
from nestrank.shapes import compress_layer, feasible_group_size, plan_compression
from nestrank.tensor import Tensor


def report(name: str, ok: bool, detail: str = "") -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}" + (f" :: {detail}" if detail else ""))
    assert ok, f"{name}: {detail}"


class CompCfg:
    rank = 4
    alpha = 8.0
    max_factor = 8
    lr = 0.05
    momentum = 0.9
    epochs = 1
    seed = 11
    batch_size = 1
    depth_min = 2
    max_events = 2
    factors = (2, 4, 8)
    tau = 0.5


LIGHTWEIGHT = ShapeSpec(depth=4, events=((2, 2),))  # halve width at N/4, exit at N/2


def _eight_shapes(n_layers: int) -> list[ShapeSpec]:
    """Deterministic sample of substructures, skewed toward aggressive
    compression where the adapters have real headroom."""
    rng = np.random.default_rng(2024)
    shapes = [LIGHTWEIGHT, ShapeSpec(depth=2, events=((1, 2),))]
    while len(shapes) < 8:
        depth = int(rng.integers(2, n_layers + 1))
        events = sample_events(rng, depth, (2, 4, 8), max_events=2)
        if not events:
            continue
        shapes.append(ShapeSpec(depth=depth, events=events))
    return shapes


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Full training pipeline at the harness defaults."""
    root = tmp_path_factory.mktemp("acceptance")
    task = TaskConfig()
    train_ex = generate_examples(task, "train")
    eval_ex = generate_examples(task, "eval")
    mcfg = ModelConfig()
    tcfg = TrainConfig()

    window = 0.0  # the timed train + compensate + sweep budget

    t0 = time.perf_counter()
    model = RerankerModel(mcfg, seed=tcfg.seed)
    train(model, train_ex, tcfg)
    window += time.perf_counter() - t0

    shapes8 = _eight_shapes(mcfg.n_layers)
    pre = [evaluate(model, eval_ex, s, clock=lambda: 0.0)[0] for s in shapes8]

    checksum_before = params_checksum(model.params)
    ccfg = CompCfg()
    bank = AdapterBank(mcfg, rank=ccfg.rank, alpha=ccfg.alpha,
                       max_factor=ccfg.max_factor, seed=ccfg.seed)
    t0 = time.perf_counter()
    compensation_train(model, bank, train_ex, ccfg)
    window += time.perf_counter() - t0
    checksum_after = params_checksum(model.params)

    post = [evaluate(model, eval_ex, s, bank, clock=lambda: 0.0)[0] for s in shapes8]

    n = mcfg.n_layers
    sweep_specs = [
        SweepSpec(mode="height", points=tuple(ShapeSpec(depth=d) for d in (8, 6, 4, 2))),
        SweepSpec(mode="width", points=tuple(ShapeSpec(depth=n, events=((l, k),))
                                             for l in (5, 2) for k in (2, 4, 8))),
        SweepSpec(mode="joint", points=(LIGHTWEIGHT,
                                        ShapeSpec(depth=6, events=((2, 2),)),
                                        ShapeSpec(depth=4, events=((1, 4),)),
                                        ShapeSpec(depth=2, events=((1, 2),)))),
    ]
    t0 = time.perf_counter()
    sweep_rows = run_sweeps(sweep_specs, model, eval_ex, bank)
    window += time.perf_counter() - t0
    sweep_csv = root / "sweep.csv"
    write_sweep_csv(sweep_csv, sweep_rows)

    # ablation variants reuse the same data and budgets
    direct_cfg = TrainConfig(method="direct")
    direct_model = RerankerModel(mcfg, seed=direct_cfg.seed)
    train(direct_model, train_ex, direct_cfg)

    upper_cfg = TrainConfig(method="fixed-shape", fixed_shape="d4+l2k2")
    upper_model = RerankerModel(mcfg, seed=upper_cfg.seed)
    train(upper_model, train_ex, upper_cfg)

    base_row = baseline_result(eval_ex, clock=lambda: 0.0)
    light_default = evaluate(model, eval_ex, LIGHTWEIGHT, bank, clock=lambda: 0.0)[0]
    light_no_comp = evaluate(model, eval_ex, LIGHTWEIGHT, clock=lambda: 0.0)[0]
    light_no_sd = evaluate(direct_model, eval_ex, LIGHTWEIGHT, clock=lambda: 0.0)[0]
    light_upper = evaluate(upper_model, eval_ex, LIGHTWEIGHT, clock=lambda: 0.0)[0]

    committee_mrrs = {}
    for layer in tcfg.committee:
        committee_mrrs[layer] = evaluate(model, eval_ex, ShapeSpec(depth=layer),
                                         clock=lambda: 0.0)[0]

    return {
        "root": root, "task": task, "model": model, "bank": bank,
        "model_cfg": mcfg, "train_cfg": tcfg,
        "train_ex": train_ex, "eval_ex": eval_ex,
        "window_seconds": window,
        "pre": pre, "post": post, "shapes8": shapes8,
        "checksum_before": checksum_before, "checksum_after": checksum_after,
        "sweep_rows": sweep_rows, "sweep_csv": sweep_csv,
        "baseline_mrr": base_row.mrr_at_10,
        "light": {"default": light_default, "no_comp": light_no_comp,
                  "no_sd": light_no_sd, "upper": light_upper},
        "committee_mrrs": committee_mrrs,
    }


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness


def _fd_matches(build, leaves, rng, coords_per_leaf=None, h=1e-5):
    loss = build()
    loss.backward()
    grads = [(leaf, None if leaf.grad is None else leaf.grad.copy()) for leaf in leaves]
    for leaf in leaves:
        leaf.grad = None
    for leaf, g in grads:
        flat = leaf.data.reshape(-1)
        if coords_per_leaf is None:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=min(coords_per_leaf, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = build().item()
            flat[i] = orig - h
            dn = build().item()
            flat[i] = orig
            num = (up - dn) / (2.0 * h)
            got = 0.0 if g is None else g.reshape(-1)[i]
            if abs(got - num) > max(1e-4 * abs(num), 1e-6):
                return False, f"grad {got} vs fd {num}"
    return True, ""


def test_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(41)
    ops = ["mul", "add", "tanh", "sigmoid", "exp", "softmax", "rms", "silu", "matmul"]
    for g in range(50):
        shape = (int(rng.integers(2, 4)), int(rng.integers(2, 5)))
        a = Tensor(rng.uniform(-2, 2, shape), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, shape), requires_grad=True)
        gain = Tensor(rng.uniform(0.5, 1.5, shape[1]), requires_grad=True)
        sq = Tensor(rng.uniform(-1, 1, (shape[1], shape[1])), requires_grad=True)
        picks = [ops[i] for i in rng.integers(0, len(ops), size=4)]

        def build():
            t = a
            for op in picks:
                t = {"mul": lambda t: t * b, "add": lambda t: t + b,
                     "tanh": T.tanh, "sigmoid": T.sigmoid,
                     "exp": lambda t: T.exp(t * 0.3),
                     "softmax": lambda t: T.softmax(t, axis=-1),
                     "rms": lambda t: T.rms_norm(t, gain),
                     "silu": T.silu,
                     "matmul": lambda t: T.matmul(t, sq)}[op](t)
            return T.tsum(t)

        ok, detail = _fd_matches(build, [a, b, gain, sq], rng)
        if not ok:
            report("gradient correctness", False, f"graph {g}: {detail}")

    # the full toy model's layer scores at three depths
    mcfg = ModelConfig()
    model = RerankerModel(mcfg, seed=13)
    inp = render_input(list(range(10, 15)), list(range(20, 32)), mcfg.max_seq_len)
    shape = ShapeSpec(depth=mcfg.n_layers, events=((2, 2),)).resolve(len(inp))
    for depth in (2, 5, 8):
        def build():
            states = model.forward_layers(inp, shape)
            return model.score_at_layer(states, depth)

        leaves = list(model.params.values())
        ok, detail = _fd_matches(build, leaves, rng, coords_per_leaf=2)
        if not ok:
            report("gradient correctness", False, f"score depth {depth}: {detail}")
    elapsed = time.perf_counter() - t0
    report("gradient correctness", elapsed < 60.0,
           f"50 graphs + 3 layer scores vs central differences in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: depth-exit consistency


def test_depth_exit_consistency():
    mcfg = ModelConfig()
    model = RerankerModel(mcfg, seed=17)
    rng = np.random.default_rng(17)
    for _ in range(20):
        q = rng.integers(3, mcfg.vocab_size, size=rng.integers(2, 7)).tolist()
        d = rng.integers(3, mcfg.vocab_size, size=rng.integers(4, 20)).tolist()
        inp = render_input(q, d, mcfg.max_seq_len)
        full = model.forward_layers(inp)
        full_scores = [model.score_at_layer(full, n) for n in range(1, mcfg.n_layers + 1)]
        for n in range(1, mcfg.n_layers + 1):
            sub = model.forward_layers(inp, full_shape(n, len(inp)))
            for a, b in zip(sub, full[:n]):
                if not (np.array_equal(a.hidden.data, b.hidden.data)
                        and np.array_equal(a.last_token_attn.data, b.last_token_attn.data)):
                    report("depth-exit consistency", False, "hidden states differ")
            if model.score_at_layer(sub, n).item() != full_scores[n - 1].item():
                report("depth-exit consistency", False, f"score differs at depth {n}")
    report("depth-exit consistency", True,
           "20 inputs x all depths bit-identical to the full pass")


# ---------------------------------------------------------------------------
# criterion 3: pooling correctness


def test_pooling_correctness():
    from nestrank.model import LayerState

    rng = np.random.default_rng(23)
    checked = 0
    while checked < 1000:
        n = int(rng.integers(4, 30))
        target = int(rng.integers(2, n))
        k = feasible_group_size(n, target)
        if k is None or k == 1:
            continue
        h = rng.normal(size=(n, int(rng.integers(2, 8))))
        attn = rng.dirichlet(np.full(n, 0.7))
        plan = plan_compression(attn, n, target, k)
        state = LayerState(hidden=Tensor(h), last_token_attn=Tensor(attn))
        out = compress_layer(state, plan).data
        if out.shape[0] != plan.result_len or plan.result_len != target:
            report("pooling correctness", False, "length mismatch")
        if not np.array_equal(out[-1], h[-1]):
            report("pooling correctness", False, "final position merged")
        row = 0
        for gi, (s, e) in enumerate(plan.groups):
            if gi in plan.selected:
                w = np.exp(attn[s:e] - attn[s:e].max())
                w /= w.sum()
                if abs(w.sum() - 1.0) > 1e-6 or (w < 0).any():
                    report("pooling correctness", False, "weights not a distribution")
                lo, hi = h[s:e].min(axis=0), h[s:e].max(axis=0)
                if not ((out[row] >= lo - 1e-9).all() and (out[row] <= hi + 1e-9).all()):
                    report("pooling correctness", False, "row outside convex bounds")
                row += 1
            else:
                row += e - s
        checked += 1
    report("pooling correctness", True,
           "1k randomized pooling calls: weights, bounds, lengths, final token")


# ---------------------------------------------------------------------------
# criterion 4: distillation degenerate equivalence


def test_kd_degenerate_equivalence():
    rng = np.random.default_rng(29)
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(2, 16))
        gt = int(rng.integers(0, m))
        student = rng.normal(scale=3.0, size=m)
        teacher = np.full(m, -1e6)
        teacher[gt] = 0.0
        tau = float(rng.uniform(0.25, 2.0))
        a = kd_loss(teacher, Tensor(student), gt, tau).item()
        b = contrastive_loss(Tensor(student), gt, tau).item()
        worst = max(worst, abs(a - b))
    report("distillation degenerate equivalence", worst <= 1e-12,
           f"1k vectors, max |kd - contrastive| = {worst:.2e}")


# ---------------------------------------------------------------------------
# criteria 5 and 6: the scaled-down robustness and ablation experiments


def _row(rows, config_id):
    for r in rows:
        if r.config_id == config_id:
            return r
    raise KeyError(config_id)


def test_compression_robustness(pipeline):
    rows = pipeline["sweep_rows"]
    full = _row(rows, "height:d8")
    half = _row(rows, "height:d4")
    joint = _row(rows, "joint:d4+l2k2")
    ok_time = pipeline["window_seconds"] < 900.0
    rel_half = (full.mrr_at_10 - half.mrr_at_10) / full.mrr_at_10
    rel_joint = (full.mrr_at_10 - joint.mrr_at_10) / full.mrr_at_10
    ok = (ok_time and rel_half <= 0.10 and rel_joint <= 0.10
          and half.flops_savings >= 0.5 and joint.flops_savings >= 0.5)
    report("compression robustness", ok,
           f"full={full.mrr_at_10:.3f} half-depth={half.mrr_at_10:.3f} "
           f"(drop {rel_half:.1%}, savings {half.flops_savings:.1%}) "
           f"lightweight={joint.mrr_at_10:.3f} (drop {rel_joint:.1%}, "
           f"savings {joint.flops_savings:.1%}), pipeline {pipeline['window_seconds']:.0f}s")


def test_ablation_ordering(pipeline):
    light = pipeline["light"]
    base = pipeline["baseline_mrr"]
    upper = light["upper"]
    rp = {name: rel_perf(light[name], upper, base)
          for name in ("default", "no_comp", "no_sd")}
    ok = rp["default"] >= rp["no_comp"] >= rp["no_sd"]
    report("ablation ordering", ok,
           f"rel_perf default={rp['default']:.1f}% >= no_compensation={rp['no_comp']:.1f}% "
           f">= no_self_distillation={rp['no_sd']:.1f}% "
           f"(mrr: {light['default']:.3f}/{light['no_comp']:.3f}/{light['no_sd']:.3f}, "
           f"upper {upper:.3f}, baseline {base:.3f})")


# ---------------------------------------------------------------------------
# criterion 7: aggregate score dominance


def test_aggregate_dominance(pipeline):
    mrrs = pipeline["committee_mrrs"]
    layers = sorted(mrrs)
    values = [mrrs[l] for l in layers]
    ok = all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
    report("aggregate dominance", ok,
           "held-out MRR@10 by committee layer: "
           + ", ".join(f"L{l}={mrrs[l]:.3f}" for l in layers))


# ---------------------------------------------------------------------------
# criterion 8: compensation safety


def test_compensation_safety(pipeline):
    frozen = pipeline["checksum_before"] == pipeline["checksum_after"]

    model = pipeline["model"]
    mcfg = pipeline["model_cfg"]
    zero_bank = AdapterBank(mcfg, rank=4, max_factor=8, seed=99)
    zero_bank.zero_all()
    inp = render_input([10, 11, 12], list(range(20, 34)), mcfg.max_seq_len)
    shape = ShapeSpec(depth=4, events=((2, 2),)).resolve(len(inp))
    with T.no_grad():
        plain = model.forward_layers(inp, shape)[-1].hidden.data
        zeroed = model.forward_layers(inp, shape, adapters=zero_bank)[-1].hidden.data
    neutral = np.allclose(plain, zeroed, atol=1e-12)

    pre, post = np.array(pipeline["pre"]), np.array(pipeline["post"])
    mean_ok = post.mean() >= pre.mean() - 0.002
    improved = int((post > pre).sum())
    ok = frozen and neutral and mean_ok
    report("compensation safety", ok,
           f"base checksum unchanged={frozen}, zero-adapter neutral={neutral}, "
           f"mean MRR pre={pre.mean():.3f} post={post.mean():.3f} "
           f"(improved on {improved}/8 shapes)")


def test_compensation_improves_half_the_shapes(pipeline):
    pre, post = np.array(pipeline["pre"]), np.array(pipeline["post"])
    improved = int((post > pre).sum())
    report("compensation improves half the shapes", improved >= 4,
           f"strict improvements on {improved}/8 sampled shapes")


# ---------------------------------------------------------------------------
# criterion 9: determinism


def test_determinism(pipeline, tmp_path):
    model = pipeline["model"]
    bank = pipeline["bank"]
    eval_ex = pipeline["eval_ex"][:50]
    specs = [SweepSpec(mode="height", points=(ShapeSpec(depth=8), ShapeSpec(depth=4))),
             SweepSpec(mode="joint", points=(LIGHTWEIGHT,))]
    blobs = []
    for name in ("a.csv", "b.csv"):
        rows = run_sweeps(specs, model, eval_ex, bank, clock=lambda: 0.0)
        write_sweep_csv(tmp_path / name, rows)
        blobs.append((tmp_path / name).read_bytes())
    identical = blobs[0] == blobs[1]

    # with a real clock only the timing column may differ
    stable_cols = []
    for name in ("c.csv", "d.csv"):
        rows = run_sweeps(specs, model, eval_ex, bank)
        stable_cols.append([r.row()[:8] + [r.row()[9]] for r in rows])
    clocked_ok = stable_cols[0] == stable_cols[1]
    report("determinism", identical and clocked_ok,
           f"fixed-clock CSVs byte-identical={identical}, "
           f"real-clock non-timing columns identical={clocked_ok}")
