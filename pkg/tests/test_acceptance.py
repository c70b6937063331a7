"""Acceptance criteria 1-10, one PASS/FAIL line each (printed in the session summary).

Toy experiments (5-7) share one synthetic two-shape dataset.  Training uses
learning rate 1e-3 and 64x64 aggregated maps; the 256x256 default gives the
same maps up to interpolation and only costs time on one CPU core.
"""
import filecmp
import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch
import yaml

from conceptloc.attention import (AttentionLayerConfig, AttentionRecord, aggregate_maps,
                                  cross_attention, identifier_map)
from conceptloc.backbone import build_backbone, snapshot, weight_change_rate
from conceptloc.conditioning import strip_identifiers
from conceptloc.datasets import generate_priors, load_manifest, make_two_shape_dataset
from conceptloc.evaluation import (DistanceProvider, MockEmbeddingProvider, clip_i, clip_t, kid,
                                   lpips_diversity)
from conceptloc.guidance import guidance_loss, hard_guidance_loss, soft_guidance_loss
from conceptloc.trainer import TrainConfig, Trainer, localization_stats

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.acceptance

LR = 1e-3
ATTN_SIZE = 64
LOCALIZATION_STEPS = 800
DELTA_STEPS = 1000
IDENT = "<v1>"


def report(n, ok, detail):
    ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


# --------------------------------------------------------------------------
# oracles (independent of the package code)

def hard_oracle(a, s):
    h, w = len(a), len(a[0])
    return sum((s[i][j] - a[i][j]) ** 2 for i in range(h) for j in range(w)) / (h * w)


def soft_oracle(a, s):
    h, w = len(a), len(a[0])
    return sum((s[i][j] - a[i][j]) ** 2 * (1.0 if s[i][j] == 0 else 0.0)
               for i in range(h) for j in range(w)) / (h * w)


def kid_oracle(x, y):
    m, n, d = len(x), len(y), len(x[0])

    def k(a, b):
        return (sum(a[i] * b[i] for i in range(d)) / d + 1.0) ** 3

    xx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    yy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    xy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
    return xx + yy - 2 * xy


# --------------------------------------------------------------------------
# 1-4: properties

def test_01_loss_oracles():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for n in (4, 8, 17):
        for _ in range(200):
            a = rng.random((n, n))
            s = rng.random((n, n)) * (rng.random((n, n)) < 0.5)
            s[rng.integers(n), rng.integers(n)] = 1.0
            al, sl = a.tolist(), s.tolist()
            worst = max(worst, abs(float(hard_guidance_loss(a, s)) - hard_oracle(al, sl)),
                        abs(float(soft_guidance_loss(a, s)) - soft_oracle(al, sl)))
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-9 and elapsed < 5.0,
           f"max |diff| {worst:.2e} (< 1e-9) over 2x600 cases, {elapsed:.2f}s (< 5s)")


def _attn_loss_from_logits(logits, grids, seg, size, mode, token):
    records = []
    for k, (lg, grid) in enumerate(zip(logits, grids)):
        cfg = AttentionLayerConfig(f"l{k}", 1, lg.shape[0], 1)
        records.append(AttentionRecord(cfg, lg.softmax(-1), grid))
    return guidance_loss(identifier_map(records, token, size), seg, mode)


def test_02_gradient_finite_differences():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst = 0.0
    for cfg in range(20):
        heads = int(rng.integers(1, 4))
        tokens = int(rng.integers(2, 6))
        token = int(rng.integers(tokens))
        base = int(rng.choice([2, 4]))
        grids = [(base * 2 // f, base * 2 // f) for f in (1, 2, 4)][: int(rng.integers(1, 4))]
        size = int(rng.choice([4, 8, 9]))
        mode = "hard" if cfg % 2 == 0 else "soft"
        seg = torch.tensor(rng.random((size, size)) * (rng.random((size, size)) < 0.5))
        seg[0, 0] = 1.0
        logits = [torch.tensor(rng.normal(size=(heads, g[0] * g[1], tokens)) * 2, requires_grad=True)
                  for g in grids]
        loss = _attn_loss_from_logits(logits, grids, seg, size, mode, token)
        grads = torch.autograd.grad(loss, logits)
        analytic = torch.cat([g.flatten() for g in grads])
        numeric = []
        h = 1e-6
        with torch.no_grad():
            for lg in logits:
                flat = lg.view(-1)
                for i in range(flat.numel()):
                    old = float(flat[i])
                    flat[i] = old + h
                    up = float(_attn_loss_from_logits(logits, grids, seg, size, mode, token))
                    flat[i] = old - h
                    down = float(_attn_loss_from_logits(logits, grids, seg, size, mode, token))
                    flat[i] = old
                    numeric.append((up - down) / (2 * h))
        numeric = torch.tensor(numeric, dtype=torch.float64)
        rel = float((analytic - numeric).norm() / max(float(numeric.norm()), 1e-300))
        worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    report(2, worst < 1e-4 and elapsed < 60.0,
           f"max relative error {worst:.2e} (< 1e-4) on 20 configs, {elapsed:.1f}s (< 60s)")


def test_03_normalization():
    rng = np.random.default_rng(11)
    worst_row, bounded = 0.0, True
    for _ in range(1000):
        heads = int(rng.integers(1, 5))
        dq, dc, p, l = (int(v) for v in rng.integers(1, 17, size=4))
        d = heads * int(rng.integers(1, 9))
        scale = float(rng.choice([0.1, 1.0, 10.0]))
        f32 = lambda *s: torch.tensor(rng.normal(size=s) * scale, dtype=torch.float32)  # noqa: E731
        _, w = cross_attention(f32(p, dq), f32(l, dc), f32(d, dq), f32(d, dc), f32(d, dc), heads=heads)
        worst_row = max(worst_row, float((w.sum(-1) - 1).abs().max()))
        side = int(math.isqrt(p)) or 1
        if side * side == p:
            cfg = AttentionLayerConfig("x", 1, heads, 1)
            agg = identifier_map([AttentionRecord(cfg, w, (side, side))], int(rng.integers(l)), 16)
            bounded &= bool((agg.values >= 0).all() and (agg.values <= 1).all())
    rand_maps = [torch.rand(s, s) for s in (16, 8, 4)]
    agg = aggregate_maps(rand_maps, 256).values
    bounded &= bool((agg >= 0).all() and (agg <= 1).all())
    report(3, worst_row < 1e-5 and bounded,
           f"max |row sum - 1| {worst_row:.2e} (< 1e-5) over 1000 calls; aggregated maps in [0,1]: {bounded}")


# --------------------------------------------------------------------------
# toy experiments

@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_shapes")
    make_two_shape_dataset(root, n_images=5, seed=0)
    bb = build_backbone({})
    for cls in ("square", "circle"):
        generate_priors(bb, cls, count=8, seed=0, out_root=root)
    return root, load_manifest(root / "manifest.json")


def _trainer(toy_data, **kw):
    root, manifest = toy_data
    cfg = dict(steps=max(kw.get("steps", 1), 1), learning_rate=LR, priors=str(root),
               concepts=["red_square"], attn_size=ATTN_SIZE)
    cfg.update(kw)
    tr = Trainer(TrainConfig(**cfg), manifest)
    tr.init_identifiers()
    return tr


def _stats(tr):
    return localization_stats(tr.model, tr.data, IDENT, attn_size=ATTN_SIZE)


def test_04_freezing(toy_data):
    kinds = ("W_Q", "W_K", "W_V")
    expected = {"KV": {"W_K", "W_V"}, "QV": {"W_Q", "W_V"}, "QKV": set(kinds)}
    details, ok = [], True
    for sel, trained in expected.items():
        tr = _trainer(toy_data, selector=sel, steps=50)
        before = snapshot(tr.model)
        for _ in range(50):
            tr.train_step()
        after = snapshot(tr.model)
        rep = weight_change_rate(before, after)
        for kind in kinds:
            vals = list(rep.deltas[kind].values())
            keys = [k for k in before if k.startswith(kind + "/")]
            if kind in trained:
                ok &= all(v > 0 for v in vals)
            else:
                ok &= all(v == 0 for v in vals) and all(torch.equal(before[k], after[k]) for k in keys)
        details.append(f"{sel}:" + "/".join(f"{rep.mean(k):.3g}" for k in kinds))
        tr.close()
    report(4, ok, "mean delta Q/K/V after 50 steps " + "  ".join(details))


@pytest.fixture(scope="module")
def localization(toy_data):
    out = {}
    start = time.perf_counter()
    for mode in ("hard", "none", "soft"):
        tr = _trainer(toy_data, guidance_mode=mode, steps=LOCALIZATION_STEPS)
        s0 = _stats(tr)
        for _ in range(LOCALIZATION_STEPS):
            tr.train_step()
        out[mode] = (s0, _stats(tr))
        tr.close()
    out["elapsed"] = time.perf_counter() - start
    return out


def test_05_hard_localization(localization):
    s0, hard = localization["hard"]
    _, ctrl = localization["none"]
    elapsed = localization["elapsed"]
    ok = hard["ratio"] >= 2.0 and ctrl["ratio"] < 1.5 and elapsed <= 900
    report(5, ok,
           f"in/out ratio after {LOCALIZATION_STEPS} steps: hard {hard['ratio']:.2f} (>= 2, "
           f"step 0 {s0['ratio']:.2f}), no-guidance {ctrl['ratio']:.2f} (< 1.5); "
           f"3 runs in {elapsed:.0f}s (<= 900s)")


def test_06_soft_suppression(localization):
    s0, soft = localization["soft"]
    _, hard = localization["hard"]
    out_frac = soft["out_mask"] / s0["out_mask"]
    soft_rise = soft["in_mask"] - s0["in_mask"]
    hard_rise = hard["in_mask"] - s0["in_mask"]
    ok = out_frac <= 0.5 and soft_rise < 0.5 * hard_rise
    report(6, ok,
           f"soft out-of-mask {s0['out_mask']:.4f} -> {soft['out_mask']:.4f} ({out_frac:.0%}, <= 50%); "
           f"in-mask change soft {soft_rise:+.4f} vs hard {hard_rise:+.4f} (soft < half of hard)")


def test_07_weight_change_ordering(toy_data):
    wins, rows = 0, []
    for seed in range(5):
        tr = _trainer(toy_data, selector="QKV", steps=DELTA_STEPS, seed=seed,
                      backbone={"init_seed": seed})
        before = snapshot(tr.model)
        for _ in range(DELTA_STEPS):
            tr.train_step()
        rep = weight_change_rate(before, snapshot(tr.model))
        q, k, v = (rep.mean(x) for x in ("W_Q", "W_K", "W_V"))
        wins += v > q
        rows.append(f"s{seed} V={v:.3f} Q={q:.3f} K={k:.3f}")
        tr.close()
    report(7, wins >= 4, f"mean delta(W_V) > mean delta(W_Q) in {wins}/5 seeds (>= 4): " + "; ".join(rows))


# --------------------------------------------------------------------------
# 8-9: metrics

def test_08_kid():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        worst = max(worst, abs(kid(x, y) - kid_oracle(x.tolist(), y.tolist())))
    same, wins = [], 0
    for _ in range(200):
        x, y, y_shift = rng.normal(size=(50, 8)), rng.normal(size=(50, 8)), rng.normal(0.5, size=(50, 8))
        k_same = kid(x, y)
        same.append(k_same)
        wins += kid(x, y_shift) > k_same
    mean, se = float(np.mean(same)), float(np.std(same, ddof=1) / math.sqrt(len(same)))
    ok = worst < 1e-10 and abs(mean) <= 3 * se and wins >= 190
    report(8, ok, f"oracle |diff| {worst:.1e} (< 1e-10); same-dist mean {mean:.2e} vs 3SE {3 * se:.2e}; "
                  f"shifted larger in {wins}/200 (>= 190)")


class _Pairs(DistanceProvider):
    def __init__(self, table):
        self.table = table

    def distance(self, a, b):
        return self.table[frozenset((a, b))]


class _FixedText(MockEmbeddingProvider):
    def __init__(self, vec):
        super().__init__()
        self.vec = np.asarray(vec, dtype=float)

    def embed_texts(self, texts):
        return self.vec[None]


def test_09_metric_identities():
    checks = {}
    checks["clip_i identical = 1"] = clip_i([[0.2, 0.7]], [[0.2, 0.7]]) == pytest.approx(1.0)
    checks["clip_i {[1,0]} vs {[1,0],[0,1]} = 0.5"] = clip_i([[1, 0]], [[1, 0], [0, 1]]) == pytest.approx(0.5)
    checks["clip_i orthogonal = 0"] = clip_i([[1, 0]], [[0, 1]]) == 0.0
    v = np.array([0.4, -1.0, 2.5])
    checks["clip_t equal = 1"] = clip_t(v[None], "a <v> dog", ["<v>"], _FixedText(v)) == pytest.approx(1.0)
    checks["clip_t opposite = -1"] = clip_t(-v[None], "a <v> dog", ["<v>"], _FixedText(v)) == pytest.approx(-1.0)
    img = np.full((8, 8, 3), 77, dtype=np.uint8)
    from conceptloc.evaluation import MockPerceptualDistance

    checks["diversity identical = 0"] = lpips_diversity([img, img.copy()], MockPerceptualDistance()) == 0
    table = {frozenset((0, 1)): 0.2, frozenset((0, 2)): 0.4, frozenset((1, 2)): 0.6}
    checks["diversity {0.2,0.4,0.6} = 0.4"] = lpips_diversity([0, 1, 2], _Pairs(table)) == pytest.approx(0.4)
    checks["strip 'photo of a <v> dog'"] = strip_identifiers("photo of a <v> dog", ["<v>"]) == "photo of a dog"
    checks["strip two identifiers"] = strip_identifiers("<v1> pot and <v2> penbag", ["<v1>", "<v2>"]) == "pot and penbag"
    emb = MockEmbeddingProvider()
    imgs = np.random.default_rng(0).normal(size=(2, emb.dim))
    checks["clip_t ignores identifier"] = (clip_t(imgs, "photo of a <v> dog", ["<v>"], emb)
                                           == clip_t(imgs, "photo of a dog", [], emb))
    failed = [k for k, ok in checks.items() if not ok]
    report(9, not failed, f"{len(checks) - len(failed)}/{len(checks)} identities hold"
                          + (f"; failed: {failed}" if failed else ""))


# --------------------------------------------------------------------------
# 10: end-to-end determinism

def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "conceptloc.cli", *args], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def test_10_end_to_end_determinism(toy_data, tmp_path):
    root, _ = toy_data
    cfg = {"manifest": str(root / "manifest.json"), "priors": str(root), "steps": 20,
           "learning_rate": LR, "attn_size": ATTN_SIZE, "checkpoint_every": 20}
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    for run in ("a", "b"):
        d = tmp_path / run
        _cli("train", "--config", str(tmp_path / "cfg.yaml"), "--seed", "3", "--out", str(d / "train"))
        _cli("sample", "--checkpoint", str(d / "train" / "checkpoints" / "step_000020"), "--seed", "3",
             "--n", "3", "--prompts", "2", "--out", str(d / "samples"))
        _cli("eval", "--run", str(d / "samples"), "--manifest", cfg["manifest"], "--out", str(d / "eval"))
    a, b = tmp_path / "a", tmp_path / "b"
    images = sorted(p.relative_to(a) for p in (a / "samples").rglob("*.png"))
    reports = [p.relative_to(a) for p in (a / "eval").iterdir() if p.suffix in (".csv", ".md")]
    same_images = all(filecmp.cmp(a / p, b / p, shallow=False) for p in images)
    same_reports = all(filecmp.cmp(a / p, b / p, shallow=False) for p in reports)
    same_model = filecmp.cmp(a / "train/checkpoints/step_000020/model.pt",
                             b / "train/checkpoints/step_000020/model.pt", shallow=False)
    ok = bool(images) and len(reports) == 2 and same_images and same_reports and same_model
    report(10, ok, f"{len(images)} images identical: {same_images}; {len(reports)} reports identical: "
                   f"{same_reports}; final weights identical: {same_model}")
