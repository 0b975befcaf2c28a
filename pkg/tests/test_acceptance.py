"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in an "acceptance criteria" section at the end of the
pytest run. The desk-scale experiments use ``configs/synthetic.toml``.
"""
import gc
import math
import time
import weakref
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import record_acceptance
from gradcases import CASES, TOL, run_case
from incprompt.backbone import BackboneConfig, PromptSchedule, attention, pooled_feature
from incprompt.config import load_config
from incprompt.data import TaskStream
from incprompt.errors import NoNegativeAvailable
from incprompt.experiment import build_stream, run_experiment, run_sweep
from incprompt.key_learner import KeyLearner, KeyLossConfig, key_loss, l1_reg, match_task, mine_negative, triplet_loss
from incprompt.prompter import TaskPrompter, divide, join, prompted_attention
from incprompt.trainer import (
    INCPrompt,
    TrainConfig,
    compute_metrics,
    evaluate,
    run_baseline,
    run_incprompt,
    task_loss,
    total_loss,
    train_task,
)

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synthetic.toml"
SEEDS = (0, 1, 2)


def verdict(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} ({detail})"
    record_acceptance(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    return load_config(CONFIG, output_dir=str(tmp_path_factory.mktemp("acceptance")))


# 1 -------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    worst, counts = {}, {}
    for name, fn in CASES.items():
        errs = run_case(fn, n=20)
        counts[name], worst[name] = len(errs), max(errs, default=math.inf)
    elapsed = time.perf_counter() - start
    ok = all(c >= 20 for c in counts.values()) and max(worst.values()) <= TOL and elapsed < 60
    detail = f"max rel err {max(worst.values()):.1e} <= {TOL:g} over {min(counts.values())}+ instances x " \
             f"{len(CASES)} cases, {elapsed:.1f}s < 60s"
    verdict(1, "analytic gradients match central differences", ok, detail)


# 2 -------------------------------------------------------------------------

def _np_key(x, learner):
    Wq, Wk, Wv = (p.detach().numpy() for p in (learner.W_q, learner.W_k, learner.W_v))
    q, k, v = x @ Wq, x @ Wk, x @ Wv
    s = q @ k.transpose(0, 2, 1) / np.sqrt(q.shape[-1])
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    return (a @ v).mean(1)


def _np_losses(model, emb, free, labels, task_id, start, active):
    """Straight-line cross-entropy + key loss, batch-mean, from the model's weights."""
    x = free.numpy()
    feat = x.mean(1)
    keys = [_np_key(x, l) for l in model.learners]
    K_a = keys[task_id]
    others = np.stack(keys[:task_id])
    cos = (others * feat).sum(-1) / (np.linalg.norm(others, axis=-1) * np.linalg.norm(feat, axis=-1))
    K_n = others[cos.argmax(0), np.arange(len(x))]
    kcfg = model.key_cfg
    hinge = np.maximum(0.0, ((feat - K_a) ** 2).sum(-1) - ((feat - K_n) ** 2).sum(-1) + kcfg.margin)
    L_key = kcfg.lambda_reg * np.abs(K_a).sum() + hinge.sum()

    with torch.no_grad():
        logits = model.classify(emb, model.prompters[task_id](free.mean(1)), active, start).numpy()
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    L_task = -logp[np.arange(len(labels)), labels.numpy()].sum()
    return (L_task + L_key) / len(labels)


def _oracle_model(seed):
    torch.manual_seed(seed)
    bcfg = BackboneConfig(image_size=8, patch_size=4, embed_dim=8, num_layers=2, num_heads=2)
    model = INCPrompt(bcfg, PromptSchedule.from_depth(2, 2), KeyLossConfig(0.5, 0.05), 6,
                      TrainConfig(dtype="float64"))
    for _ in range(3):
        model.add_task()
        with torch.no_grad():
            for prm in (*model.learners[-1].parameters(), *model.prompters[-1].parameters()):
                prm.normal_(0, 0.5)
    return model


def test_criterion_2_equivalence_oracles():
    g = torch.Generator().manual_seed(0)
    att_err = 0.0
    for n, d in ((1, 1), (3, 4), (5, 8)):
        q, k, v = (torch.randn(n, d, generator=g, dtype=torch.float64) for _ in range(3))
        empty = torch.zeros(0, d, dtype=torch.float64)
        att_err = max(att_err, (prompted_attention(q, k, v, empty, empty) - attention(q, k, v)).abs().max().item())

    P = torch.randn(4, 3, 2, 5, 8, generator=g, dtype=torch.float64)
    round_trip = torch.equal(join(*divide(P)), P)

    loss_err = 0.0
    for seed in range(10):
        model = _oracle_model(seed)
        bg = torch.Generator().manual_seed(100 + seed)
        images = torch.randn(4, 8, 8, 1, generator=bg, dtype=torch.float64)
        labels = torch.randint(4, 6, (4,), generator=bg)
        emb, free = model.prompt_free(images)
        with torch.no_grad():
            got = total_loss(*model.batch_losses(emb, free, labels, 2, start=4, active=6)).item()
        loss_err = max(loss_err, abs(got - _np_losses(model, emb, free, labels, 2, 4, 6)))

    ok = att_err <= 1e-6 and round_trip and loss_err <= 1e-10
    verdict(2, "equivalence oracles", ok,
            f"L_p=0 attention diff {att_err:.1e} <= 1e-6, divide/join bitwise={round_trip}, "
            f"total_loss vs recomputation {loss_err:.1e} <= 1e-10 on 10 batches")


# 3 -------------------------------------------------------------------------

def _t(*rows):
    return torch.tensor(rows, dtype=torch.float64)


def _learner_with_values(rows):
    """One-token learners: the key of token t is ``t @ W_v`` (singleton attention)."""
    m = KeyLearner(0, len(rows[0]), init_std=1.0).double()
    with torch.no_grad():
        m.W_v.copy_(_t(*rows))
    return m


def hand_values():
    cases = []

    def add(name, got, expected, tol=1e-12):
        got = torch.as_tensor(got, dtype=torch.float64)
        expected = torch.as_tensor(expected, dtype=torch.float64)
        cases.append((name, got.shape == expected.shape and bool((got - expected).abs().max() <= tol)))

    # attention and pooling
    add("singleton attention returns V", attention(_t([1, 0]), _t([1, 0]), _t([3, -2])), _t([3, -2]))
    w = 1 / (1 + math.exp(-1 / math.sqrt(2)))
    add("softmax([1/sqrt2, 0]) weights", attention(_t([1, 0]), _t([1, 0], [0, 1]), _t([1, 0], [0, 1])),
        _t([w, 1 - w]))
    add("... rounded to 4 places", round(w, 4), 0.6698, 0)
    add("identical K rows -> uniform weights", attention(_t([2, 1]), _t([1, 1], [1, 1]), _t([1, 0], [0, 3])),
        _t([0.5, 1.5]))
    tok = _t([1, 1], [3, 3]).unsqueeze(0)
    add("mean pooling", pooled_feature(tok, "mean"), _t([2, 2]))
    add("cls pooling", pooled_feature(tok, "cls"), _t([1, 1]))
    add("single token pools to itself", pooled_feature(_t([4, 5]).unsqueeze(0), "mean"), _t([4, 5]))

    # key learner
    ident = KeyLearner(0, 2).double()
    with torch.no_grad():
        for p in ident.parameters():
            p.copy_(torch.eye(2))
    add("identity projections, one token -> key = token", ident(_t([0.3, -0.7]).unsqueeze(0)), _t([0.3, -0.7]))
    add("zero W_v -> zero key", KeyLearner(0, 3).double()(torch.randn(2, 4, 3, dtype=torch.float64)),
        torch.zeros(2, 3))

    c9 = [0.9, math.sqrt(1 - 0.81)]
    c1 = [0.1, math.sqrt(1 - 0.01)]
    a, b, c = _learner_with_values([[1, 0], [0, 1]]), _learner_with_values([c9, [0, 0]]), \
        _learner_with_values([c1, [0, 0]])
    a.task_id, b.task_id, c.task_id = 0, 1, 2
    x = _t([1, 0]).unsqueeze(0)
    add("hard negative is the cos 0.9 key", mine_negative(0, x, [a, c, b]), _t(c9))
    try:
        mine_negative(0, x, [a])
        cases.append(("no other learner -> no negative", False))
    except NoNegativeAvailable:
        cases.append(("no other learner -> no negative", True))

    one = torch.zeros(1, 2, dtype=torch.float64)
    add("perfect anchor hinge", triplet_loss(one, one, _t([1, 1]), 0.5), 0.0)
    K = _t([0.3, 0.2])
    add("K_n = K_a -> margin", triplet_loss(_t([1, 5]), K, K, 0.5), 0.5)
    add("hand hinge, margin 1", triplet_loss(_t([0, 0]), _t([1, 0]), _t([0, 2]), 1.0), 0.0)
    add("hand hinge, margin 4", triplet_loss(_t([0, 0]), _t([1, 0]), _t([0, 2]), 4.0), 1.0)
    add("L1 of [1,-2,0.5]", l1_reg(_t([1, -2, 0.5])), 3.5)
    add("L1 of zero", l1_reg(torch.zeros(3)), 0.0)
    add("L1 of a batch", l1_reg(_t([1, 1], [-1, -1])), 4.0)
    K_a = _t([1, -2, 0.5])
    K_n = _t([math.sqrt(4.75), 0, 0])  # 5.25 - 4.75 + 0.5 = triplet 1
    add("key loss 0.1 * 3.5 + 1", key_loss(torch.zeros(1, 3, dtype=torch.float64), K_a, K_n,
                                           KeyLossConfig(0.5, 0.1)), 1.35, 1e-12)
    add("first-task key loss", key_loss(torch.zeros(1, 3), K_a, None, KeyLossConfig(0.5, 0.1)), 0.35, 1e-12)
    solo = KeyLearner(4, 2)
    add("one learner -> its task id", match_task(torch.randn(3, 2, 2), [solo]), torch.full((3,), 4))
    basis = [_learner_with_values([[0, 0, 0], list(e), [0, 0, 0]]) for e in torch.eye(3).tolist()]
    for i, l in enumerate(basis):
        l.task_id = i
    add("aligned basis key wins", match_task(_t([0, 1, 0]).unsqueeze(0), basis), torch.tensor([1]))

    # prompter and prompted attention
    p = TaskPrompter(0, 4, PromptSchedule((0,), 2)).double()
    with torch.no_grad():
        for prm in p.parameters():
            prm.zero_()
    add("zero prompter -> zero prompt", p(torch.randn(2, 4, dtype=torch.float64)), torch.zeros(2, 1, 2, 2, 4))
    P = torch.cat([torch.ones(1, 3, 2), 2 * torch.ones(1, 3, 2)])
    add("divide: key half", divide(P)[0], torch.ones(3, 2))
    add("divide: value half", divide(P)[1], 2 * torch.ones(3, 2))
    e1, e2 = _t([1, 0]), _t([0, 1])
    add("equal-logit prompted attention", prompted_attention(e1, e1, e1, e1, e2), _t([0.5, 0.5]))
    q, k, v = _t([1, 2]), _t([0.5, -1], [2, 0]), _t([1, 1], [-3, 2])
    pk = torch.full((2, 2), -1e6, dtype=torch.float64)
    add("masked-out prompt", prompted_attention(q, k, v, pk, 100 * torch.ones(2, 2, dtype=torch.float64)),
        attention(q, k, v), 1e-4)

    # losses and metrics
    add("cross-entropy at uniform logits", task_loss(torch.zeros(1, 2), torch.tensor([0])), -math.log(0.5), 1e-6)
    add("cross-entropy, perfect prediction", task_loss(_t([1000, -1000]), torch.tensor([0])), 0.0)
    add("cross-entropy of [2,1] at class 1", task_loss(_t([2, 1]), torch.tensor([1])), math.log(1 + math.e))
    one_, k35 = torch.tensor(1.0, dtype=torch.float64), torch.tensor(0.35, dtype=torch.float64)
    add("total loss (1, 0.35)", total_loss(one_, k35), 1.35, 1e-15)
    add("total loss (0, 0)", total_loss(torch.tensor(0.0), torch.tensor(0.0)), 0.0, 0)
    m = compute_metrics([[0.9]])
    add("single-task metrics", [m.avg_acc, m.forgetting], [0.9, 0.0])
    m = compute_metrics([[1.0, np.nan], [0.6, 1.0]])
    add("two-task metrics avg/forgetting", [m.avg_acc, m.forgetting], [0.8, 0.4])
    add("monotone columns -> no forgetting",
        compute_metrics([[0.5, np.nan], [0.7, 0.9]]).forgetting, 0.0, 0)
    return cases


def test_criterion_3_hand_values():
    cases = hand_values()
    failed = [name for name, ok in cases if not ok]
    verdict(3, "hand-computed examples", not failed,
            f"{len(cases) - len(failed)}/{len(cases)} exact" + (f"; failed: {', '.join(failed)}" if failed else ""))


# 4 -------------------------------------------------------------------------

class InstrumentedStream(TaskStream):
    """Logs every raw training-data read and hands out clones it can track."""

    def __init__(self, stream):
        super().__init__([stream.task(t) for t in range(stream.num_tasks)], stream.spec)
        self.reads: list[int] = []
        self.handles: dict[int, list] = {}

    def train_split(self, task_id):
        x, y = super().train_split(task_id)
        x, y = x.clone(), y.clone()
        self.reads.append(task_id)
        self.handles.setdefault(task_id, []).extend([weakref.ref(x), weakref.ref(y)])
        return x, y


def test_criterion_4_protocol(cfg):
    stream = InstrumentedStream(build_stream(cfg))
    torch.manual_seed(cfg.seed)
    state = INCPrompt(cfg.backbone, cfg.schedule, cfg.key, stream.num_classes, cfg.train)
    cursor, gen = stream.cursor(), torch.Generator().manual_seed(cfg.seed)

    snapshots, changed, leaked, late_reads = {}, [], [], []
    for t in range(stream.num_tasks):
        train_task(state, stream, cursor, t, gen)
        gc.collect()
        leaked += [(t, s) for s in range(t + 1) for r in stream.handles.get(s, []) if r() is not None]
        if stream.reads != list(range(t + 1)):
            late_reads.append((t, list(stream.reads)))
        evaluate(state, stream, t)
        for s, snap in snapshots.items():
            now = {k: v for k, v in state.state_dict().items() if k.startswith((f"learners.{s}.", f"prompters.{s}."))}
            if any(not torch.equal(v, now[k]) for k, v in snap.items()):
                changed.append((s, t))
        snapshots[t] = {k: v.clone() for k, v in state.state_dict().items()
                        if k.startswith((f"learners.{t}.", f"prompters.{t}."))}
    reads_after_eval = stream.reads == list(range(stream.num_tasks))

    # (c) predictions depend on the image only: pool every test set, shuffle, compare
    last = stream.num_tasks - 1
    xs = [stream.test_split(j)[0] for j in range(stream.num_tasks)]
    per_task = [state.predict(x, stream.seen_classes(last)) for x in xs]
    pooled = torch.cat(xs)
    perm = torch.randperm(len(pooled), generator=torch.Generator().manual_seed(1))
    pred, sel = state.predict(pooled[perm], stream.seen_classes(last))
    inv = torch.empty_like(perm)
    inv[perm] = torch.arange(len(perm))
    ok_c = torch.equal(pred[inv], torch.cat([p for p, _ in per_task])) and \
        torch.equal(sel[inv], torch.cat([s for _, s in per_task]))

    ok = not changed and not leaked and not late_reads and reads_after_eval and ok_c
    verdict(4, "protocol invariants", ok,
            f"(a) earlier modules bitwise frozen: {not changed}; "
            f"(b) reads {stream.reads}, no live past-task data: {not leaked and not late_reads}; "
            f"(c) task-id-free eval, shuffle-invariant: {ok_c}")


# 5 and 6 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def seed_runs(cfg):
    stream = build_stream(cfg)
    out = {}
    for seed in SEEDS:
        start = time.perf_counter()
        _, inc = run_incprompt(stream, cfg.backbone, cfg.schedule, cfg.key, cfg.train, seed)
        ft = run_baseline(stream, "ftseq", cfg.backbone, cfg.train, seed)
        out[seed] = (inc, ft, time.perf_counter() - start)
    return out


def test_criterion_5_forgetting_reduction(seed_runs):
    rows, ok = [], True
    for seed, (inc, ft, _) in seed_runs.items():
        good = inc.avg_acc >= ft.avg_acc + 0.10 and inc.forgetting <= 0.5 * ft.forgetting
        ok &= good
        rows.append(f"seed {seed}: acc {inc.avg_acc:.3f} vs {ft.avg_acc:.3f}, "
                    f"forgetting {inc.forgetting:.3f} vs {ft.forgetting:.3f}")
    total = sum(r[2] for r in seed_runs.values())
    ok &= total < 600
    verdict(5, "INCPrompt beats FT-seq by >= 0.10 acc and halves forgetting", ok,
            "; ".join(rows) + f"; {total:.0f}s")


def test_criterion_6_key_matching(seed_runs):
    worst = 1.0
    for inc, _, _ in seed_runs.values():
        h = inc.selection_histogram.astype(float)
        worst = min(worst, float((np.diag(h) / h.sum(1)).min()))
    verdict(6, "key matching picks the true task", worst >= 0.7,
            f"min per-task diagonal fraction {worst:.3f} >= 0.7 over seeds {SEEDS}")


# 7 -------------------------------------------------------------------------

def test_criterion_7_ablation_shapes(cfg):
    lengths = run_sweep(cfg, "prompt_length", [0, 2, 4, 8, 16])
    acc = {v: a for v, a, _, _ in lengths}
    gap_hi, gap_lo = acc[16] - acc[8], acc[4] - acc[2]

    depths = run_sweep(cfg, "prompt_depth", [1, 2, 3, 4])
    csv_path = Path(cfg.output_dir) / "sweep_prompt_depth" / "sweep.csv"
    lines = csv_path.read_text().splitlines()
    values = [int(line.split(",")[0]) for line in lines[1:]]
    depth_ok = lines[0] == "axis_value,avg_acc,forgetting,seed" and values == [1, 2, 3, 4] and len(depths) == 4

    ok = gap_hi < gap_lo and depth_ok
    verdict(7, "ablation shapes", ok,
            f"length acc {', '.join(f'{k}:{v:.3f}' for k, v in acc.items())}; "
            f"acc(16)-acc(8)={gap_hi:+.3f} < acc(4)-acc(2)={gap_lo:+.3f}; "
            f"depth sweep rows {values}, acc {', '.join(f'{a:.3f}' for _, a, _, _ in depths)}")


# 8 -------------------------------------------------------------------------

def test_criterion_8_reproducibility(cfg):
    a = Path(cfg.output_dir) / "repro_a"
    b = Path(cfg.output_dir) / "repro_b"
    run_experiment(cfg, a)
    run_experiment(cfg, b)
    same = (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    verdict(8, "identical config and seed give byte-identical summary CSV", same,
            f"{len((a / 'summary.csv').read_bytes())} bytes compared")
