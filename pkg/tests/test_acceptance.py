"""Acceptance gate: one PASS/FAIL line per criterion.

Run directly (``python tests/test_acceptance.py``) or through pytest; the
lines are also repeated in pytest's terminal summary.
"""
from __future__ import annotations

import dataclasses
import functools
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
import oracles  # noqa: E402

from mgrnet import DatasetSpec, ModelConfig, PipelineOptions, Scenario, gen_bank, init_params, split_bank  # noqa: E402
from mgrnet import autodiff as ad  # noqa: E402
from mgrnet.experiment import preset  # noqa: E402
from mgrnet.graph import distance_matrix, local_adjacency, recon_adjacency  # noqa: E402
from mgrnet.losses import margin_loss, recon_feature_loss  # noqa: E402
from mgrnet.reasoning import gcn_layer  # noqa: E402
from mgrnet.retrieval import Embeddings, evaluate, evaluate_embeddings, map_cmc, reconstruction_mse  # noqa: E402
from mgrnet.sgns import global_affinity, select_poor_nodes, swap_nodes  # noqa: E402
from mgrnet.attention import attention_weights, mha_global  # noqa: E402
from mgrnet.training import TrainConfig, finite_difference_check, train  # noqa: E402

SEEDS = range(5)
CASES = 100
LINES: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> bool:
    LINES[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(LINES[n])
    return ok


# ---------------------------------------------------------------- 1
def criterion_1() -> bool:
    cfg = ModelConfig(P=6, D=8, H=2, L_lgr=2, L_grmm=2, k=2, num_classes=3)
    bank = gen_bank(DatasetSpec(num_identities=3, samples_per_identity=2, P=6, D=8, seed=0))
    tcfg = TrainConfig(batch_size=6, identities_per_batch=3)
    t0 = time.perf_counter()
    res = finite_difference_check(init_params(cfg, 0), bank.tokens, bank.identities, tcfg, step=1e-5)
    dt = time.perf_counter() - t0
    ok = res.max_rel_error <= 1e-4 and dt < 30
    return report(1, ok, f"max rel err {res.max_rel_error:.2e} (<=1e-4) over {res.num_checked} entries in {dt:.1f}s (<30s)")


# ---------------------------------------------------------------- 2
def criterion_2() -> bool:
    worst = {"distance_matrix": 0.0, "gcn_layer": 0.0, "mha_global": 0.0, "margin_loss": 0.0, "map_cmc": 0.0}
    discrete_ok = {"select_poor_nodes": True, "map_cmc_rank": True}
    for case in range(CASES):
        r = np.random.default_rng([2024, case])
        n, d = int(r.integers(2, 7)), int(r.integers(1, 5))
        X = r.normal(size=(n, d))
        worst["distance_matrix"] = max(worst["distance_matrix"], np.abs(distance_matrix(X) - oracles.pdist(X)).max())
        adj, th = r.random((n, n)), r.normal(size=(d, int(r.integers(1, 4))))
        worst["gcn_layer"] = max(worst["gcn_layer"], np.abs(gcn_layer(adj, X, th) - oracles.gcn(adj, X, th)).max())
        H = int(r.integers(1, 4))
        D = H * int(r.integers(1, 3))
        W = [r.normal(size=(D, D)) for _ in range(3)]
        cls, pt = r.normal(size=D), r.normal(size=(n, D))
        tau = math.sqrt(D / H)
        worst["mha_global"] = max(
            worst["mha_global"], np.abs(mha_global(cls, pt, *W, H, tau) - oracles.mha(cls, pt, *W, H, tau)).max()
        )
        # coarse values so ties occur
        sadj = r.integers(0, 4, size=(n, n)) / 4.0
        sW = r.integers(0, 4, size=n) / 4.0
        k, widen = int(r.integers(0, n + 1)), int(r.integers(1, 4))
        discrete_ok["select_poor_nodes"] &= select_poor_nodes(sadj, sW, k, widen).tolist() == oracles.poor_nodes(sadj, sW, k, widen)
        labels = r.integers(0, 3, size=n)
        m = float(ad.value(margin_loss(X, labels, 0.3)))
        worst["margin_loss"] = max(worst["margin_loss"], abs(m - oracles.triplet(X, labels, 0.3)))
        groups = r.integers(0, 2, size=n)
        Z = r.integers(-2, 3, size=(n, 2)).astype(float)
        got = evaluate_embeddings(Embeddings(labels, groups, Z))
        ap, first = oracles.retrieval(oracles.pdist(Z), labels, groups)
        keep = ~np.isnan(ap)
        want = float(np.mean(ap[keep])) if keep.any() else 0.0
        worst["map_cmc"] = max(worst["map_cmc"], abs(got.mAP - want))
        if keep.any():
            discrete_ok["map_cmc_rank"] &= all(got.cmc[kk] == float(np.mean(first[keep] < kk)) for kk in (1, 5, 10))
    ok = max(worst.values()) <= 1e-12 and all(discrete_ok.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return report(2, ok, f"{CASES} instances each; max abs err {detail} (<=1e-12); discrete outputs exact: {all(discrete_ok.values())}")


# ---------------------------------------------------------------- 3
def _invariants(case: int) -> list[str]:
    r = np.random.default_rng([77, case])
    bad = []
    n = int(r.integers(2, 7))
    d = np.abs(distance_matrix(r.normal(size=(n, 3)) * r.uniform(0.1, 10)))
    alpha, beta = r.normal(), r.uniform(0.01, 3)
    A = local_adjacency(d, alpha, beta)
    if not (np.all((A > 0) & (A < 1)) and np.array_equal(A, A.T)):
        bad.append("adjacency range/symmetry")
    d2 = d + r.uniform(0, 1, size=d.shape)
    if np.any(local_adjacency(d2, alpha, beta) > A):
        bad.append("adjacency monotone")
    if np.any(recon_adjacency(d2, beta) > recon_adjacency(d, beta)):
        bad.append("recon adjacency monotone")
    Hh = int(r.integers(1, 4))
    D = 2 * Hh
    attn, _ = attention_weights(
        r.normal(size=D) * 10, r.normal(size=(n, D)) * 10, r.normal(size=(D, D)), r.normal(size=(D, D)), Hh, 1.0
    )
    if not np.allclose(np.asarray(attn).sum(-1), 1.0, atol=1e-12):
        bad.append("softmax row sums")
    W = global_affinity(r.normal(size=D), r.normal(size=(n, D)))
    if not math.isclose(float(np.sum(1 - W)), 1.0, abs_tol=1e-12):
        bad.append("global softmax sum")
    patches = r.uniform(0.5, 2, size=(3, n, 2)) * r.choice([-1, 1], size=(3, n, 2))
    k = int(r.integers(0, n + 1))
    poor = [select_poor_nodes(r.random((n, n)), r.random(n), k, 1) for _ in range(3)]
    out = swap_nodes(*patches, *poor)
    for j, m in enumerate("RNT"):
        keep = [i for i in range(n) if i not in poor[j]]
        if not np.array_equal(out[j][keep], patches[j][keep]):
            bad.append("non-poor immutability")
        if len(out[3].actions[m]) != k or len(poor[j]) != k:
            bad.append("swap count")
    rel = r.random((int(r.integers(1, 5)), int(r.integers(1, 15)))) < 0.3
    cmc = map_cmc(rel).cmc
    if not cmc[1] <= cmc[5] <= cmc[10]:
        bad.append("CMC monotone")
    x, y = r.normal(size=(n, 3)), r.normal(size=(n, 3))
    labels = r.integers(0, 3, size=n)
    if recon_feature_loss(x, y) < 0 or float(ad.value(margin_loss(x, labels, 0.3))) < 0:
        bad.append("loss nonnegative")
    if recon_feature_loss(x, x) != 0:
        bad.append("loss zero at identity")
    return bad


def criterion_3() -> bool:
    failures = {}
    for case in range(CASES):
        for b in _invariants(case):
            failures[b] = failures.get(b, 0) + 1
    return report(3, not failures, f"{CASES} cases per invariant; failures {failures or 'none'}")


# ---------------------------------------------------------------- shared training
@functools.lru_cache(maxsize=None)
def trained(preset_name: str, seed: int, k: int | None = None):
    cfg = preset(preset_name).with_overrides(seed=seed, k=k)
    tr, te = split_bank(gen_bank(cfg.data), cfg.holdout_per_identity)
    t0 = time.perf_counter()
    params, _ = train(tr, cfg.train, cfg.model, cfg.pipeline)
    return cfg, params, te, time.perf_counter() - t0


# ---------------------------------------------------------------- 4
def criterion_4() -> bool:
    rows = []
    for s in SEEDS:
        cfg, params, te, dt = trained("toy", s)
        m = evaluate(te, params, Scenario(), cfg.pipeline).mAP
        m0 = evaluate(te, init_params(cfg.model, s), Scenario(), cfg.pipeline).mAP
        rows.append((m, m - m0, dt))
    rows = np.array(rows)
    ok = rows[:, 0].min() >= 0.90 and rows[:, 1].min() >= 0.30 and rows[:, 2].max() < 120
    return report(
        4,
        ok,
        f"min trained mAP {rows[:, 0].min():.3f} (>=0.90), min gain {rows[:, 1].min():.3f} (>=0.30), "
        f"max train time {rows[:, 2].max():.1f}s (<120s), 5 seeds",
    )


# ---------------------------------------------------------------- 5
def criterion_5() -> bool:
    diffs = []
    for s in SEEDS:
        cfg2, p2, te, _ = trained("corruption", s, 2)
        cfg0, p0, _, _ = trained("corruption", s, 0)
        diffs.append(evaluate(te, p2, Scenario(), cfg2.pipeline).mAP - evaluate(te, p0, Scenario(), cfg0.pipeline).mAP)
    gain = float(np.mean(diffs))
    return report(5, gain >= 0.02, f"mean mAP(k=2) - mAP(k=0) = {gain:+.4f} (>=+0.02); per seed {np.round(diffs, 3).tolist()}")


# ---------------------------------------------------------------- 6
def criterion_6() -> bool:
    gaps, mse = [], []
    sc = Scenario.parse("N")
    for s in SEEDS:
        cfg, params, te, _ = trained("ablation", s)
        g = evaluate(te, params, sc, cfg.pipeline).mAP
        z = evaluate(te, params, sc, dataclasses.replace(cfg.pipeline, recovery="zero")).mAP
        gaps.append(g - z)
        mse.append((reconstruction_mse(te, params, sc, "grmm"), reconstruction_mse(te, params, sc, "zero")))
    gap = float(np.mean(gaps))
    mg, mz = np.mean(mse, axis=0)
    ok = gap >= 0.02 and mg < mz
    return report(6, ok, f"M(N) mean mAP gain over zero padding {gap:+.4f} (>=+0.02); recon MSE {mg:.3f} vs {mz:.3f} (strictly below)")


# ---------------------------------------------------------------- 7
def criterion_7() -> bool:
    violations = []
    for s in SEEDS:
        cfg, params, te, _ = trained("ablation", s)
        m = {code: evaluate(te, params, Scenario.parse(code), cfg.pipeline).mAP for code in ("ALL", "R", "N", "T", "RN", "RT", "NT")}
        one = [m["R"], m["N"], m["T"]]
        two = [m["RN"], m["RT"], m["NT"]]
        if not (m["ALL"] >= max(one) and min(one) >= max(two)):
            violations.append(f"seed {s}: all {m['ALL']:.3f} one {np.round(one, 3).tolist()} two {np.round(two, 3).tolist()}")
    return report(7, not violations, f"{5 - len(violations)}/5 seeds monotone" + ("; " + " | ".join(violations) if violations else ""))


# ---------------------------------------------------------------- 8
def criterion_8(tmp: Path) -> bool:
    from mgrnet import cli

    blobs = []
    for sub in ("first", "second"):
        out = tmp / sub
        cfg = preset("toy").with_overrides(seed=11, output_dir=str(out))
        out.mkdir(parents=True, exist_ok=True)
        cli.cmd_train(cfg, out)
        cli.cmd_eval(cfg, out, [Scenario(), Scenario.parse("N")])
        blobs.append([(out / f).read_bytes() for f in ("metrics_ALL.json", "metrics_M-N.json", "params.mgrp")])
    same = blobs[0] == blobs[1]
    return report(8, same, f"metrics and params byte-identical across two runs: {same}")


# ---------------------------------------------------------------- pytest entry points
def test_criterion_1_gradient_check():
    assert criterion_1(), LINES[1]


def test_criterion_2_oracle_equivalence():
    assert criterion_2(), LINES[2]


def test_criterion_3_invariants():
    assert criterion_3(), LINES[3]


def test_criterion_4_toy_end_to_end():
    assert criterion_4(), LINES[4]


def test_criterion_5_sgns_benefit():
    assert criterion_5(), LINES[5]


def test_criterion_6_grmm_benefit():
    assert criterion_6(), LINES[6]


def test_criterion_7_missing_modality_monotonicity():
    assert criterion_7(), LINES[7]


def test_criterion_8_determinism(tmp_path):
    assert criterion_8(tmp_path), LINES[8]


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        results = [criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_6(), criterion_7(), criterion_8(Path(d))]
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)
