"""End-to-end acceptance checks, one verdict line per criterion.

The training criteria share one dense checkpoint and two up-cycled runs built
through the command-line interface with default settings. Expect roughly a
quarter of an hour on one CPU core.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from mote.analytics import RoutingTrace, analyze, read_loads_csv, top_pathways
from mote.checkpoint import load_checkpoint, read_manifest
from mote.packing import pack_int2, ternary_gemm_accumulate, ternary_gemm_packed, unpack_int2
from mote.quant import (
    QuantizedWeights,
    dequantize,
    quantize_activations_int8,
    quantize_weights_binary_bwn,
    quantize_weights_ternary,
    round_clip,
    rtn_quantize,
)
from mote.model import RoutingRecord
from mote.train import balance_loss
from mote.upcycle import memory_report_preset

import test_train

pytestmark = pytest.mark.slow

UNIFORM = math.log(256)
STEPS = 2000


def cli(*argv) -> dict:
    proc = subprocess.run([sys.executable, "-m", "mote.cli", *map(str, argv)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return json.loads(proc.stdout.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def dense(work):
    res = cli("pretrain-dense", "--out", work / "dense")
    ev = cli("eval", "--ckpt", work / "dense", "--run-dir", work / "runs")
    return {"path": work / "dense", "eval": ev, **res}


@pytest.fixture(scope="module")
def upcycled(work, dense):
    out = {}
    for init in ("ffn", "random"):
        cli("upcycle", "--dense", dense["path"], "--out", work / f"mote-{init}", "--experts", 4, "--init", init)
        out[init] = work / f"mote-{init}"
    return out


@pytest.fixture(scope="module")
def trained(work, upcycled):
    out = {}
    for init, path in upcycled.items():
        res = cli("train-moe", "--ckpt", path, "--out", work / f"trained-{init}", "--steps", STEPS)
        out[init] = {"path": work / f"trained-{init}", **res}
    return out


# --- 1 -------------------------------------------------------------------------


def test_c1_memory_accounting(report):
    table = {"0.5b": (0.9, 2.3, 2.55), "1.5b": (3.2, 8.6, 2.69), "3b": (6.8, 18.1, 2.66)}
    t0 = time.perf_counter()
    reps = {k: memory_report_preset(k) for k in table}
    elapsed = time.perf_counter() - t0
    ok = elapsed < 1.0
    parts = []
    for k, (mote, base, ratio) in table.items():
        r = reps[k]
        ok &= abs(r.mote_gib - mote) <= 0.1 + 1e-9 and abs(r.moe_llava_gib - base) <= 0.1 + 1e-9
        ok &= abs(r.ratio - ratio) <= 0.15
        parts.append(f"{k} {r.mote_gib}/{r.moe_llava_gib} GiB ratio {r.ratio}")
    assert report("C1 memory accounting", ok, "; ".join(parts) + f"; {elapsed * 1e3:.1f} ms")


# --- 2 -------------------------------------------------------------------------


def test_c2_quantizer_suite(report):
    checks = [
        round_clip(0.7, -1, 1) == 1 and round_clip(-3.2, -1, 1) == -1 and round_clip(0.5, -1, 1) == 1,
        round_clip(-0.5, -1, 1) == -1 and round_clip(1.49, -1, 1) == 1,
        round_clip(63.5, -128, 127) == 64 and round_clip(-200, -128, 127) == -128,
    ]
    q = quantize_weights_ternary([[0.4, -0.2], [0.1, 0.3]])
    checks.append(abs(q.scale - 0.25) < 1e-15 and q.codes.tolist() == [[1, -1], [0, 1]])
    z = quantize_weights_ternary(np.zeros((3, 2)))
    checks.append(z.scale == 1e-5 and not z.codes.any())
    a = quantize_activations_int8([[0.5, -1.0, 0.25]])
    checks.append(a.scales[0] == 1.0 and a.codes.tolist() == [[64, -127, 32]])
    b = quantize_weights_binary_bwn([[0.4, -0.2]])
    checks.append(abs(b.scale - 0.3) < 1e-15 and b.codes.tolist() == [[1, -1]])
    codes, scales = rtn_quantize(np.array([[1.0, -0.5]]), 8)
    checks.append(codes.tolist() == [[127, -64]] and abs(scales[0] - 1 / 127) < 1e-15)
    checks.append(dequantize(QuantizedWeights(np.array([[1, -1]], np.int8), 0.25)).tolist() == [[0.25, -0.25]])
    examples_ok = all(checks)

    rng = np.random.default_rng(0)
    cov_ok = bound_ok = True
    for _ in range(1000):
        w = rng.normal(size=(rng.integers(1, 17), rng.integers(1, 17))) * rng.uniform(1e-2, 10)
        c = rng.uniform(1e-2, 1e2)
        qa, qb = quantize_weights_ternary(w), quantize_weights_ternary(c * w)
        stable = np.abs(np.abs(w) / qa.scale - 0.5) > 1e-9
        cov_ok &= np.array_equal(qa.codes[stable], qb.codes[stable])
        cov_ok &= abs(qb.scale - c * qa.scale) <= 1e-12 * c * qa.scale
        for bits in (4, 8):
            codes, scales = rtn_quantize(w, bits)
            bound_ok &= bool(np.all(np.abs(w - scales[:, None] * codes) <= scales[:, None] / 2 * (1 + 1e-12)))
    ok = examples_ok and cov_ok and bound_ok
    detail = f"{sum(checks)}/{len(checks)} examples exact; covariance {cov_ok}; RTN bound {bound_ok} on 1000 matrices"
    assert report("C2 quantizer suite", ok, detail)


# --- 3 -------------------------------------------------------------------------


def test_c3_packed_path(report):
    rng = np.random.default_rng(1)
    roundtrip = all(
        np.array_equal(unpack_int2(pack_int2(c)), c)
        for c in (rng.integers(-1, 2, size=(rng.integers(1, 33), rng.integers(1, 70))).astype(np.int8)
                  for _ in range(1000))
    )
    worst = 0.0
    identical = True
    for i in range(200):
        t, k, m = rng.integers(1, 65, size=3)
        wq = quantize_weights_ternary(rng.normal(size=(m, k)))
        aq = quantize_activations_int8(rng.normal(size=(t, k)))
        p = pack_int2(wq.codes, wq.scale)
        acc1 = ternary_gemm_accumulate(p, aq, workers=1)
        identical &= np.array_equal(acc1, ternary_gemm_accumulate(p, aq, workers=4))
        ref = dequantize(aq) @ dequantize(wq).T
        got = ternary_gemm_packed(p, aq, workers=3)
        # exact outputs lie on a grid of alpha * beta / 127, so a floor far below that step only
        # touches entries whose exact value is 0 and whose float reference is pure rounding noise
        floor = 1e-6 * wq.scale * aq.scales[:, None]
        worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), floor))))
    ok = roundtrip and identical and worst <= 1e-5
    detail = f"roundtrip {roundtrip}; accumulators identical across workers {identical}; max rel err {worst:.2e}"
    assert report("C3 packed path", ok, detail)


# --- 4 -------------------------------------------------------------------------


def test_c4_gradients(report):
    ste_ok = True
    for precision in ("ternary", "binary"):
        for seed in range(5):
            try:
                test_train.test_ste_matches_surrogate(precision, seed)
            except AssertionError:
                ste_ok = False
    t0 = time.perf_counter()
    model, tokens, mask = test_train._fd_model()
    model.set_quant_active(False)
    try:
        worst_off = test_train.fd_check(model, tokens, mask, [n for n, _ in model.named_parameters()])
    except AssertionError as e:
        worst_off = float("inf")
        print(e)
    model, tokens, mask = test_train._fd_model(1)
    model.set_quant_active(True)
    try:
        worst_on = test_train.fd_check(model, tokens, mask,
                                       ["lm_head.weight", "norm.weight", "layers.1.moe.router.weight"])
    except AssertionError as e:
        worst_on = float("inf")
        print(e)
    elapsed = time.perf_counter() - t0
    ok = ste_ok and worst_off <= 1e-4 and worst_on <= 1e-4 and elapsed < 120
    detail = (f"STE surrogate {ste_ok}; finite differences max rel err {worst_off:.1e} (quantizers off), "
              f"{worst_on:.1e} (on); {elapsed:.0f} s")
    assert report("C4 gradient correctness", ok, detail)


# --- 5 -------------------------------------------------------------------------


def _frozen_vs_changed(before, after):
    a, b = load_checkpoint(before), load_checkpoint(after)
    sa, sb = dict(a.named_parameters()), dict(b.named_parameters())
    frozen_same = [n for n in sa if ".moe." not in n and torch.equal(sa[n], sb[n])]
    frozen_total = [n for n in sa if ".moe." not in n]
    moe_changed = [n for n in sa if ".moe." in n and not torch.equal(sa[n], sb[n])]
    moe_total = [n for n in sa if ".moe." in n]
    return len(frozen_same) == len(frozen_total), len(moe_changed) == len(moe_total), len(frozen_total), len(moe_total)


def test_c5_freeze_contract(report, work, upcycled):
    cli("train-moe", "--ckpt", upcycled["ffn"], "--out", work / "trained-200", "--steps", 200)
    same, changed, nf, nm = _frozen_vs_changed(upcycled["ffn"], work / "trained-200")
    flags = {t["name"]: t["frozen"] for t in read_manifest(work / "trained-200")["tensors"]}
    flags_ok = all(v == (".moe." not in k) for k, v in flags.items())
    ok = same and changed and flags_ok
    detail = f"{nf} inherited tensors bit-identical {same}; {nm} router/expert tensors all changed {changed}"
    assert report("C5 freeze contract", ok, detail)


# --- 6 -------------------------------------------------------------------------


def test_c6_balance(report, trained):
    n, e = 64, 4
    uniform = RoutingRecord(torch.full((1, n, e), 0.25, dtype=torch.float64), (torch.arange(n) % e)[None, :, None])
    col = torch.zeros(1, n, e, dtype=torch.float64)
    col[..., 0] = 1
    collapse = RoutingRecord(col, torch.zeros(1, n, 1, dtype=torch.long))
    lu, lc = balance_loss([uniform]).item(), balance_loss([collapse]).item()
    loads = trained["ffn"]["expert_loads"]
    mins = [min(row) for row in loads]
    ok = abs(lu - 1) <= 1e-6 and abs(lc - 4) <= 1e-6 and min(mins) >= 0.10
    detail = (f"uniform {lu:.6f}, collapse {lc:.6f}; min expert load per layer after {STEPS} steps "
              + ", ".join(f"{m:.3f}" for m in mins))
    assert report("C6 balance behavior", ok, detail)


# --- 7 -------------------------------------------------------------------------


def test_c7_learning_signal(report, dense, trained):
    ffn, rnd = trained["ffn"]["eval_loss"], trained["random"]["eval_loss"]
    below = 1 - ffn / UNIFORM
    ok = below >= 0.30 and ffn <= rnd
    detail = (f"uniform {UNIFORM:.3f}, dense {dense['eval']['eval_loss']:.4f}, ffn_copy {ffn:.4f} "
              f"({below:.0%} below uniform), random {rnd:.4f}")
    assert report("C7 learning signal", ok, detail)


# --- 8 -------------------------------------------------------------------------


def test_c8_recipe_ablation(report, work, upcycled):
    results = {}
    for frac in (0.2, 0.6, 1.0):
        out = work / f"ablation-{frac}"
        res = cli("train-moe", "--ckpt", upcycled["ffn"], "--out", out, "--steps", 300, "--ternary-fraction", frac)
        lines = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        first_on = next(m["step"] for m in lines if m["quant_active"])
        results[frac] = (res["eval_loss"], first_on, set(lines[0]))
    keys_match = len({frozenset(k) for _, _, k in results.values()}) == 1
    finite = all(math.isfinite(v) for v, _, _ in results.values())
    schedule = [results[f][1] for f in (0.2, 0.6, 1.0)] == [240, 120, 0]
    ok = keys_match and finite and schedule
    detail = ", ".join(f"fraction {f}: eval {v:.4f}" for f, (v, _, _) in results.items()) + " (300 steps, reported only)"
    assert report("C8 recipe ablation", ok, detail)


# --- 9 -------------------------------------------------------------------------


def test_c9_ptq(report, work, trained):
    src = trained["ffn"]["path"]
    res = cli("ptq-shared", "--ckpt", src, "--out", work / "ptq8", "--bits", 8)
    before = trained["ffn"]["eval_loss"]
    after = cli("eval", "--ckpt", work / "ptq8", "--run-dir", work / "runs")["eval_loss"]
    rel = abs(after - before) / before
    ok = rel <= 0.01 and res["max_bound_slack"] <= 1 + 1e-6
    detail = f"eval {before:.5f} -> {after:.5f} ({rel:.3%}); max RTN bound slack {res['max_bound_slack']:.4f}"
    assert report("C9 PTQ shared experts", ok, detail)


# --- 10 ------------------------------------------------------------------------


def test_c10_analytics(report, work, trained):
    trace_path = work / "trace.npz"
    cli("eval", "--ckpt", trained["ffn"]["path"], "--trace-out", trace_path, "--run-dir", work / "runs")
    res = cli("analyze", "--trace", trace_path, "--out", work / "analysis")
    trace = RoutingTrace.load(trace_path)
    payload = json.loads((work / "analysis" / "routing.json").read_text())
    csv_loads = read_loads_csv(work / "analysis" / "routing.csv")
    rows_ok = all(np.allclose(m.sum(axis=1), 1.0, atol=1e-12) for m in csv_loads.values())
    json_ok = all(r["fraction"] == csv_loads[r["modality"]][r["layer"], r["expert"]] for r in payload["loads"])
    exact = analyze(trace)
    roundtrip = all(np.array_equal(exact["loads"][m], csv_loads[m]) for m in exact["loads"])
    conserve = all(
        sum(c for _, c in pr.pathways) + pr.unreturned_tokens == pr.total_tokens
        for pr in (top_pathways(trace, m, 10) for m in ("all", "text", "visual"))
    )
    tv = res["tv_text_vs_visual"]
    ok = rows_ok and json_ok and roundtrip and conserve
    detail = (f"rows sum to 1 {rows_ok}; pathways conserve tokens {conserve}; exports lossless {roundtrip and json_ok}; "
              f"TV(text, visual) per layer " + ", ".join(f"{v:.3f}" for v in tv))
    assert report("C10 analytics", ok, detail)
