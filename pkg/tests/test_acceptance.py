"""Acceptance criteria 1-9, each printing one PASS/FAIL line.

Criteria 6 and 7 train real models (about an hour on one core in total).
"""

import time

import numpy as np
import pytest

from dam import functional as F
from dam.ablation import ABLATIONS, run_ablation
from dam.affinity import AffinityStack, compute_affinity
from dam.census import conv_parameter_count, count_parameters
from dam.checkpoint import Checkpoint, load_checkpoint
from dam.cli import run
from dam.config import RunConfig, acceptance_config, dumps
from dam.decoder import DAM, Conv2Block, dam_forward
from dam.gradcheck import MODEL_TOL, OP_TOL, gradcheck_suite
from dam.harness import evaluate, evaluate_model, evaluate_predictor, prepare_backbone, train
from dam.hsfm import B3DNetwork, b3d_enhance, hysteretic_filter
from dam.rng import CounterRNG
from dam.synthset import sample_episode
from dam.tensor import Tensor

from oracles import affinity_naive, conv2_block_count, conv2d_naive, conv3d_naive, filter_naive, plain_two_conv_count


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# 1 -----------------------------------------------------------------------------------

def test_criterion_1_gradient_suite(criterion):
    report = gradcheck_suite("all", trials=5, seed=0)
    print("\n".join(report.lines()))
    worst_op = max(v for k, v in report.errors.items() if k != "full_model")
    ok = report.passed and report.seconds < 120
    criterion(1, ok, f"{len(report.errors) - 1} ops max rel err {worst_op:.1e} (tol {OP_TOL:.0e}), "
                     f"full model {report.errors['full_model']:.1e} (tol {MODEL_TOL:.0e}), {report.seconds:.1f}s")
    assert ok, report.failures


# 2 -----------------------------------------------------------------------------------

def _oracle_errors(n=100, seed=0):
    r = np.random.default_rng(seed)
    worst = {"compute_affinity": 0.0, "conv2d": 0.0, "conv3d": 0.0, "hysteretic_filter": 0.0}
    for _ in range(n):
        c, h, w = r.integers(1, 17), r.integers(1, 9), r.integers(1, 9)
        fs, fq = r.normal(size=(c, h, w)), r.normal(size=(c, h, w))
        norm = bool(r.integers(0, 2))
        got = compute_affinity(T(fs), T(fq), norm).data
        worst["compute_affinity"] = max(worst["compute_affinity"], np.abs(got - affinity_naive(fs, fq, norm)).max())

        cin, cout = r.integers(1, 5), r.integers(1, 5)
        h, w = r.integers(1, 17), r.integers(1, 17)
        kh, kw = r.integers(1, min(h, 5) + 1), r.integers(1, min(w, 5) + 1)
        pad, stride = (int(r.integers(0, 3)), int(r.integers(0, 3))), (int(r.integers(1, 3)), int(r.integers(1, 3)))
        x, wt, b = r.normal(size=(cin, h, w)), r.normal(size=(cout, cin, kh, kw)), r.normal(size=cout)
        got = F.conv2d(T(x), T(wt), T(b), pad, stride).data
        worst["conv2d"] = max(worst["conv2d"], np.abs(got - conv2d_naive(x, wt, b, pad, stride)).max())

        cin, cout = r.integers(1, 4), r.integers(1, 4)
        d, h, w = r.integers(1, 9), r.integers(1, 9), r.integers(1, 9)
        k = tuple(int(r.choice([1, 3])) for _ in range(3))
        x, wt, b = r.normal(size=(cin, d, h, w)), r.normal(size=(cout, cin) + k), r.normal(size=cout)
        got = F.conv3d(T(x), T(wt), T(b)).data
        worst["conv3d"] = max(worst["conv3d"], np.abs(got - conv3d_naive(x, wt, b)).max())

        c, h, w = r.integers(1, 5), r.integers(1, 9), r.integers(1, 9)
        s, m = r.normal(size=(c, h * w, h * w)), r.random(h * w)
        got = hysteretic_filter(T(s), m, (h, w)).data
        worst["hysteretic_filter"] = max(worst["hysteretic_filter"], np.abs(got - filter_naive(s, m, (h, w))).max())
    return worst


def test_criterion_2_oracle_equivalence(criterion):
    worst = _oracle_errors()
    ok = all(v <= 1e-5 for v in worst.values())
    criterion(2, ok, "100 instances each, max abs err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# 3 -----------------------------------------------------------------------------------

def test_criterion_3_symmetric_stacks(criterion):
    r = np.random.default_rng(3)
    worst = 0.0
    for trial in range(50):
        c, h, w = r.integers(1, 4), r.integers(2, 6), r.integers(2, 6)
        a = r.normal(size=(c, h * w, h * w)).astype(np.float32)
        stack = AffinityStack(Tensor(a + a.transpose(0, 2, 1)), 3, (h, w))
        net = B3DNetwork(c, CounterRNG(trial), depth_kernel=int(r.choice([1, 3])))
        net.train(bool(trial % 2))
        out = b3d_enhance(stack, net).data
        worst = max(worst, np.abs(out - out.transpose(0, 2, 1)).max())
    ok = worst <= 1e-5
    criterion(3, ok, f"50 trials, max |S_enh - S_enh^T| {worst:.1e}")
    assert ok


# 4 -----------------------------------------------------------------------------------

def test_criterion_4_filter_linearity_and_zero_mask(criterion):
    r = np.random.default_rng(4)
    lin = zero = 0.0
    for _ in range(100):
        c, h, w = r.integers(1, 5), r.integers(1, 9), r.integers(1, 9)
        n = h * w
        s1, s2 = r.normal(size=(c, n, n)), r.normal(size=(c, n, n))
        m1, m2 = r.random(n), (r.random(n) > 0.5).astype(float)
        a, b = r.normal(size=2)

        def f(s, m):
            return hysteretic_filter(T(s), m, (h, w)).data

        lin = max(lin,
                  np.abs(f(s1, a * m1 + b * m2) - (a * f(s1, m1) + b * f(s1, m2))).max(),
                  np.abs(f(a * s1 + b * s2, m1) - (a * f(s1, m1) + b * f(s2, m1))).max())
        zero = max(zero, np.abs(f(s1, np.zeros(n))).max())
    ok = lin <= 1e-6 and zero <= 1e-6
    criterion(4, ok, f"100 trials, linearity err {lin:.1e}, zero-mask output {zero:.1e}")
    assert ok


# 5 -----------------------------------------------------------------------------------

def test_criterion_5_parameter_frugality(criterion):
    conv2 = conv_parameter_count(Conv2Block(32, CounterRNG(0)))
    baseline = plain_two_conv_count(32)
    total = count_parameters(DAM(RunConfig())).total
    ok = conv2 == conv2_block_count(32) == 3248 and baseline == 18496 and total < 1_000_000
    criterion(5, ok, f"conv2 block {conv2:,} vs baseline {baseline:,} ({1 - conv2 / baseline:.0%} fewer), "
                     f"learnable head total {total:,}")
    assert ok


# 6 -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def acceptance_backbone():
    cfg = acceptance_config()
    t0 = time.time()
    bb = prepare_backbone(cfg.backbone, cfg.data.image_size)
    return bb, time.time() - t0


@pytest.mark.slow
def test_criterion_6_learning(criterion, acceptance_backbone):
    cfg = acceptance_config()
    bb, pretrain_s = acceptance_backbone
    _, trained = train(cfg, bb)
    runtime = pretrain_s + trained.wall_time
    d, tc = cfg.data, cfg.train
    untrained = evaluate_model(DAM(cfg, bb), d.fold, "test", tc.eval_episodes, d.kshot, tc.eval_seed)
    all_fg = evaluate_predictor(lambda ep: np.ones_like(ep.query[1]), d.fold, "test", tc.eval_episodes,
                                d.kshot, tc.eval_seed, d.image_size)
    ok = (trained.miou >= 0.50 and trained.miou >= untrained.miou + 0.15
          and trained.miou >= all_fg.miou + 0.10 and runtime < 30 * 60)
    per_cat = ", ".join(f"{k}:{v:.3f}" for k, v in trained.per_category_iou.items())
    criterion(6, ok, f"mIoU {trained.miou:.4f} (per category {per_cat}; FB-IoU {trained.fbiou:.4f}), "
                     f"untrained {untrained.miou:.4f}, all-foreground {all_fg.miou:.4f}, "
                     f"backbone pretrain accuracy {bb.pretrain_accuracy:.3f}, "
                     f"runtime {runtime / 60:.1f} min")
    assert bb.pretrain_accuracy > 1 / 12
    assert ok


# 7 -----------------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("name", list(ABLATIONS))
def test_criterion_7_ablation_directions(criterion, acceptance_backbone, name):
    res = run_ablation(acceptance_config(), name, [0, 1, 2], backbone=acceptance_backbone[0])
    print(res.table())
    raw = ", ".join(f"seed {s}: {a:.4f} vs {b:.4f}" for s, a, b in zip(res.seeds, res.better_miou, res.worse_miou))
    ok = res.verdict != "fail"
    field = ABLATIONS[name][0]
    criterion(7, ok, f"{field}={res.better} >= {field}={res.worse}: {res.verdict} "
                     f"(wins {res.wins}/3, mean diff {res.mean_margin:+.4f}; {raw})")
    assert ok


# 8 -----------------------------------------------------------------------------------

def test_criterion_8_determinism(criterion, tmp_path):
    cfg = RunConfig()
    cfg.train.episodes = 48
    cfg.train.eval_episodes = 20
    ini = tmp_path / "run.ini"
    ini.write_text(dumps(cfg))
    blobs = []
    for name in ("a", "b"):
        assert run(["train", "--config", str(ini), "--out", str(tmp_path / name)]) == 0
        blobs.append((tmp_path / name / "model.damc").read_bytes())
    identical = blobs[0] == blobs[1]

    ckpt = load_checkpoint(str(tmp_path / "a" / "model.damc"))
    _, direct = train(cfg)
    again = evaluate(Checkpoint.from_bytes(ckpt.to_bytes()), num_episodes=cfg.train.eval_episodes)
    preserved = (again.miou, again.fbiou, again.per_category_iou) == (direct.miou, direct.fbiou,
                                                                      direct.per_category_iou)
    ok = identical and preserved
    criterion(8, ok, f"checkpoints byte-identical: {identical} ({len(blobs[0]):,} bytes); "
                     f"round-trip mIoU {again.miou:.6f} vs {direct.miou:.6f}")
    assert ok


# 9 -----------------------------------------------------------------------------------

def test_criterion_9_kshot_consistency(criterion):
    checked = mismatched = 0
    for src in ("query", "support"):
        cfg = RunConfig()
        cfg.ablation.skip_source = src
        model = DAM(cfg)
        for mode in (True, False):
            model.train(mode)
            for seed in range(5):
                ep = sample_episode(0, "test", 1, seed)
                five = type(ep)(ep.supports * 5, ep.query, ep.category, ep.seed)
                checked += 1
                mismatched += not np.array_equal(dam_forward(ep, model).data, dam_forward(five, model).data)
    ok = mismatched == 0
    criterion(9, ok, f"{checked} episodes (train/eval mode, query/support skips), "
                     f"{mismatched} differ from the one-shot output")
    assert ok
