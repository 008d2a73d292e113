"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL`` line that is printed in the pytest
terminal summary (and directly when this file is run as a script).
"""

import math
import time

import numpy as np
import pytest

from suparc.autodiff import Tensor
from suparc.cli import run
from suparc.evaluation import compute_metrics, geometry_score, pca_project
from suparc.gradcheck import CHECKS, run_gradchecks
from suparc.losses import (
    arccos_loss,
    mae_loss,
    pair_label,
    suparc_loss,
    supervised_ntxent,
    total_loss,
    triplet_modalities_loss,
)
from suparc.model import EncoderConfig
from suparc.training import ABLATION_ROWS, format_ablation_table, untrained_metrics

RESULTS: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_criterion_01_gradient_oracle():
    started = time.perf_counter()
    results = run_gradchecks(trials=100, seed=0, groups={"op", "loss"})
    elapsed = time.perf_counter() - started
    losses = {r.name for r in results if r.group == "loss"}
    needed = {"supervised_ntxent", "arccos_loss", "suparc_loss", "triplet_modalities"}
    n_ops = sum(1 for g, _ in CHECKS.values() if g == "op")
    worst = max(results, key=lambda r: r.max_error)
    ok = (
        all(r.passed and r.trials >= 100 for r in results)
        and needed <= losses
        and sum(r.group == "op" for r in results) == n_ops
        and elapsed < 120
    )
    failed = [r.name for r in results if not r.passed]
    report(1, "gradient oracle", ok,
           f"{len(results)} checks x 100 trials, worst {worst.name} rel_err={worst.max_error:.2e} "
           f"(tol 1e-4), failed={failed}, {elapsed:.1f}s (< 120s)")


def test_criterion_02_loss_equivalences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 12))
        y = rng.uniform(-3, 3, n)
        y[1] = y[0] + rng.uniform(-0.5, 0.5)
        h = rng.standard_normal((n, int(rng.integers(2, 9))))
        pairs = pair_label(y, 0.5)
        a = suparc_loss(h, y, pairs, 0.1, 0.0).item()
        b = arccos_loss(h, pairs, 0.1, 0.0).item()
        worst = max(worst, abs(a - b))
    y_hat, y = rng.normal(size=16), rng.normal(size=16)
    main = mae_loss(y_hat, y)
    total = total_loss(main, Tensor(0.7), Tensor(1.3), alpha=0.0, beta=0.0)
    exact = total.item() == main.item() == float(np.mean(np.abs(y_hat - y)))
    report(2, "loss equivalences", worst <= 1e-12 and exact,
           f"max |suparc(m=0) - arccos(m=0)| = {worst:.1e} over 100 batches (tol 1e-12); "
           f"total(alpha=beta=0) == mae exactly: {exact}")


def test_criterion_03_spot_values():
    H = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    y = np.array([0.0, 0.0, 2.0])
    pairs = pair_label(y, 0.5)
    sup = suparc_loss(H, y, pairs, tau=1.0, m=0.5).item()
    nt = supervised_ntxent(H, pairs, tau=1.0).item()
    sup_ref = -math.log(math.e / (math.e + math.exp(math.sin(1.0))))
    nt_ref = math.log1p(math.exp(-1.0))
    ok = abs(sup - sup_ref) <= 1e-6 and abs(nt - nt_ref) <= 1e-6
    ok = ok and abs(sup - 0.617021) <= 1e-6 and abs(nt - 0.313262) <= 1e-6
    report(3, "closed-form spot values", ok,
           f"suparc={sup:.7f} (ref {sup_ref:.7f}), ntxent={nt:.7f} (ref {nt_ref:.7f}), tol 1e-6")


def test_criterion_04_triplet_cases():
    v = np.array([0.4, -1.2, 0.7])
    ortho = np.array([1.2, 0.4, 0.0])
    same = {m: v for m in "tva"}
    doubles_same = {frozenset(p): v for p in ("tv", "ta", "va")}
    doubles_orth = {frozenset(p): ortho for p in ("tv", "ta", "va")}
    identical_02 = triplet_modalities_loss(v, same, doubles_same, 0.2).item()
    identical_dyadic = triplet_modalities_loss(v, same, doubles_same, 0.375).item()
    satisfied = triplet_modalities_loss(v, same, doubles_orth, 0.2).item()
    ok = identical_02 == 1.2 and identical_dyadic == 6 * 0.375 and satisfied == 0.0
    report(4, "triplet-loss cases", ok,
           f"identical(m=0.2)={identical_02!r}, identical(m=0.375)={identical_dyadic!r} (6m={6 * 0.375}), "
           f"margin satisfied={satisfied!r}")


def test_criterion_05_scale_invariance():
    rng = np.random.default_rng(5)
    worst = {"ntxent": 0.0, "arccos": 0.0, "suparc": 0.0, "geometry": 0.0}
    for _ in range(50):
        n = 10
        y = rng.uniform(-3, 3, n)
        y[1] = y[0]
        h = rng.standard_normal((n, 6))
        scaled = h * rng.uniform(1e-2, 1e2, size=(n, 1))
        pairs = pair_label(y, 0.5)
        for name, fn in (
            ("ntxent", lambda H: supervised_ntxent(H, pairs, 0.1).item()),
            ("arccos", lambda H: arccos_loss(H, pairs, 0.1, 0.3).item()),
            ("suparc", lambda H: suparc_loss(H, y, pairs, 0.1, 0.15).item()),
            ("geometry", lambda H: geometry_score(H, y).score),
        ):
            worst[name] = max(worst[name], abs(fn(h) - fn(scaled)))
    ok = all(v <= 1e-9 for v in worst.values())
    report(5, "scale invariance", ok, ", ".join(f"{k} max diff {v:.1e}" for k, v in worst.items()) + " (tol 1e-9)")


def test_criterion_06_end_to_end(default_splits, ablation):
    rows, _, _ = ablation
    full = next(r for r in rows if r.name == "full")
    sizes = tuple(len(default_splits[s]) for s in ("train", "valid", "test"))
    base = untrained_metrics(EncoderConfig.from_header(default_splits["train"].header), 42, default_splits["test"])
    train_seconds = sum(r.seconds for r in full.result.reports)
    ok = sizes == (2000, 430, 430) and len(full.result.reports) == 12 and full.metrics.mae <= 0.5 * base.mae
    ok = ok and train_seconds < 600
    report(6, "end-to-end training", ok,
           f"split {sizes}, 12 epochs, test MAE {full.metrics.mae:.4f} vs untrained {base.mae:.4f} "
           f"(need <= {0.5 * base.mae:.4f}), training {train_seconds:.0f}s (< 600s)")


def test_criterion_07_ablation_direction(ablation):
    rows, out, _ = ablation
    by_name = {r.name: r for r in rows}
    table = (out / "ablation.txt").read_text()
    lines = table.splitlines()
    well_formed = (
        [r.name for r in rows] == list(ABLATION_ROWS)
        and len(lines) == 5
        and lines[0].split() == ["Model", "MAE", "F1", "Corr", "Acc-7", "Acc-2", "Geom"]
        and all(len(line.split()) == 7 for line in lines[1:])
        and table == format_ablation_table(rows)
    )
    full, neither = by_name["full"].geometry, by_name["neither"].geometry
    print(table)
    report(7, "ablation direction", well_formed and full >= neither,
           f"geometry full={full:.4f} >= neither={neither:.4f}; table well-formed: {well_formed} "
           f"(test MAE full={by_name['full'].metrics.mae:.4f}, neither={by_name['neither'].metrics.mae:.4f})")


def test_criterion_08_metrics_oracle():
    m = compute_metrics([1, -1, 1, -1], [1, -1, -1, 1])
    y = np.array([-2.7, -1.0, 0.0, 0.4, 2.2])
    p = compute_metrics(y, y)
    perfect = (p.mae, p.acc7, p.acc2_nonneg, p.acc2_pos, p.f1_nonneg, p.f1_pos) == (0.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    perfect = perfect and (p.corr_degenerate or p.corr == pytest.approx(1.0, abs=1e-15))
    ok = m.acc2_pos == 0.5 and m.f1_pos == 0.5 and perfect
    report(8, "metrics oracle", ok, f"acc2_pos={m.acc2_pos}, F1_pos={m.f1_pos}; perfect case exact: {perfect}")


def test_criterion_09_pca():
    rng = np.random.default_rng(9)
    basis, _ = np.linalg.qr(rng.normal(size=(8, 2)))
    planar = (rng.normal(size=(500, 2)) * [2.0, 0.7]) @ basis.T
    matrices = {
        "planar": planar,
        "isotropic": rng.normal(size=(2000, 5)),
        "identical": np.tile(rng.normal(size=4), (20, 1)),
        "anisotropic": rng.normal(size=(300, 6)) * [5, 3, 2, 1, 0.5, 0.1],
    }
    results = {name: pca_project(X, 2) for name, X in matrices.items()}
    planar_ratio = float(results["planar"].explained_variance_ratio.sum())
    iters = max(max(r.iterations) for r in results.values())
    converged = all(all(r.converged) for r in results.values())
    ok = planar_ratio >= 0.999 and converged and iters <= 1000
    report(9, "PCA", ok, f"planar 2-component variance {planar_ratio:.6f} (>= 0.999), "
                         f"all converged: {converged}, max iterations {iters} (<= 1000)")


def test_criterion_10_determinism(tmp_path):
    data = tmp_path / "data"
    assert run(["synth", "--out", str(data), "--seed", "42", "--n", "200"]) == 0
    (tmp_path / "config.json").write_text('{"epochs": 2, "seed": 42}')
    for name in ("a", "b"):
        code = run(["train", "--data", str(data), "--config", str(tmp_path / "config.json"), "--out", str(tmp_path / name)])
        assert code == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("run.jsonl", "checkpoint.json")}
    report(10, "determinism", all(same.values()),
           ", ".join(f"{f} bit-identical: {v}" for f, v in same.items()))


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
