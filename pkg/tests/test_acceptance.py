"""Acceptance criteria 1-11, each run at its stated tolerance and runtime budget.

Every test prints one ``CRITERION n: PASS|FAIL ...`` line (also repeated in the
terminal summary). Criteria 7-9 train full federations and take most of the
suite's runtime.
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

from conftest import CRITERIA_LINES
from mmfl.analysis import bound_rhs, output_deviation
from mmfl.dataset import generate_synthetic
from mmfl.errors import ExcludedConfiguration
from mmfl.federation import (FederationConfig, aggregate_profiles, fedavg, load_checkpoint, load_state,
                             make_model, prepare_federated_data, run_federation)
from mmfl.fusion import ClientModel, total_loss
from mmfl.masking import MissingStats, make_missing_mask
from mmfl.profile import cosine_matrix, relevance_regularizer, topk_indices
from mmfl.representation import contrastive_loss, impute
from mmfl.seeding import derive_seed
from oracles import finite_difference_grad, mean_impute_bruteforce, relative_error, topk_bruteforce

SEEDS = (0, 1, 2)


def report(capsys, number, ok, detail):
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    CRITERIA_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# 1 ---------------------------------------------------------------------------

def test_criterion_01_mask_exactness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(50):
        n, m = int(rng.integers(1, 200)), int(rng.integers(2, 13))
        stats = MissingStats(float(rng.integers(0, 11)) / 10, float(rng.integers(0, 11)) / 10)
        if stats.excluded:
            stats = MissingStats(0.9, 1.0)
        seed = int(rng.integers(0, 2**31))
        entries = make_missing_mask(n, m, stats, seed).entries
        zeros = int(np.floor(stats.p_m * m + 0.5 + 1e-9))
        if stats.p_m < 1:
            zeros = min(zeros, m - 1)
        rows = int(np.floor(stats.p_s * n + 0.5 + 1e-9)) if zeros else 0
        per_row = [sum(1 for v in row if v == 0) for row in entries.tolist()]
        affected = [z for z in per_row if z]
        failures += len(affected) != rows or any(z != zeros for z in affected)
    try:
        make_missing_mask(10, 5, MissingStats(1.0, 1.0), 0)
        excluded_ok = False
    except ExcludedConfiguration:
        excluded_ok = True
    dt = time.perf_counter() - t0
    report(capsys, 1, failures == 0 and excluded_ok and dt < 5,
           f"{50 - failures}/50 tuples exact, (1,1) rejected={excluded_ok}, {dt:.2f}s")


# 2 ---------------------------------------------------------------------------

def test_criterion_02_imputation_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    identity_ok = True
    for _ in range(100):
        m, c = int(rng.integers(2, 9)), int(rng.integers(1, 17))
        k = int(rng.integers(0, m))
        missing = set(rng.choice(m, size=k, replace=False).tolist())
        h = {i: torch.as_tensor(rng.standard_normal(c)) for i in range(m) if i not in missing}
        out = impute(h, missing, m)
        ref = mean_impute_bruteforce(h, missing, m)
        worst = max(worst, max(float(np.max(np.abs(out[i].numpy() - ref[i]))) for i in range(m)))
        full = {i: torch.as_tensor(rng.standard_normal(c)) for i in range(m)}
        identity_ok &= all(torch.equal(impute(full, set(), m)[i], full[i]) for i in range(m))
    dt = time.perf_counter() - t0
    report(capsys, 2, worst <= 1e-12 and identity_ok and dt < 5,
           f"max-abs error {worst:.2e}, empty-set identity={identity_ok}, {dt:.2f}s")


# 3 ---------------------------------------------------------------------------

GROUPS = {
    "encoders": "encoders.",
    "modality embeddings": "modality_embeddings.",
    "query projector": "profile.query_projector.",
    "control pool": "profile.controls",
    "reconfiguration projector": "reconfig_projector.",
    "gate": "gate_layer.",
    "head": "head.",
}


def _toy():
    torch.manual_seed(0)
    model = ClientModel((3, 5), 3, embed_dim=4, tau=4, kappa=2, seed=0).double()
    model.train()
    gen = torch.Generator().manual_seed(1)
    xs = [torch.randn(2, f, generator=gen, dtype=torch.float64) for f in (3, 5)]
    avail = torch.ones(2, 2, dtype=torch.bool)
    y = torch.tensor([0, 2])
    return model, xs, avail, y


def _end_to_end_errors():
    model, xs, avail, y = _toy()
    with torch.no_grad():
        sel = model(xs, avail).selection

    def loss():
        out = model(xs, avail, selection=sel)
        p = model.losses(out, y, reduction="sum")
        return total_loss(p["L_task"], p["L_ds"], p["L_rc"], p["R"], 0.1, 0.1)

    model.zero_grad()
    loss().backward()
    errors = {}
    for group, prefix in GROUPS.items():
        params = [p for n, p in model.named_parameters() if n.startswith(prefix)]
        analytic = torch.cat([p.grad.reshape(-1) for p in params])
        numeric = torch.cat([g.reshape(-1) for g in finite_difference_grad(loss, params)])
        errors[group] = relative_error(analytic, numeric)
    return errors


def _standalone_errors():
    gen = torch.Generator().manual_seed(3)
    errors = {}
    h = torch.randn(3, 3, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    avail = torch.tensor([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=torch.bool)
    fn = lambda: contrastive_loss(h, avail)
    fn().backward()
    errors["L_ds"] = relative_error(h.grad, finite_difference_grad(fn, [h])[0])

    w = torch.randn(3, 3, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    fn = lambda: contrastive_loss(torch.nn.functional.normalize(w, dim=-1))
    fn().backward()
    errors["L_rc"] = relative_error(w.grad, finite_difference_grad(fn, [w])[0])

    q = torch.randn(3, 2, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    psi = torch.randn(5, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    idx = topk_indices(cosine_matrix(q, psi).detach(), 2)
    fn = lambda: relevance_regularizer(q, psi, 2, idx)
    fn().backward()
    fd = finite_difference_grad(fn, [q, psi])
    errors["R"] = max(relative_error(q.grad, fd[0]), relative_error(psi.grad, fd[1]))

    head = torch.nn.Linear(8, 3).double()
    c = torch.randn(4, 8, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 1])
    fn = lambda: torch.nn.functional.cross_entropy(head(c), y)
    fn().backward()
    fd = finite_difference_grad(fn, [head.weight, head.bias])
    errors["head"] = max(relative_error(head.weight.grad, fd[0]), relative_error(head.bias.grad, fd[1]))
    return errors


def test_criterion_03_gradient_suite(capsys):
    t0 = time.perf_counter()
    errors = {**_end_to_end_errors(), **_standalone_errors()}
    dt = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    report(capsys, 3, all(e <= 1e-3 for e in errors.values()) and dt < 60,
           f"{len(errors)} groups, worst rel. err {errors[worst]:.1e} ({worst}), {dt:.1f}s")


# 4 ---------------------------------------------------------------------------

def test_criterion_04_selection_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        tau, d = int(rng.integers(1, 33)), int(rng.integers(1, 17))
        kappa = int(rng.integers(1, tau + 1))
        q = torch.as_tensor(rng.standard_normal(d))
        pool = torch.as_tensor(rng.standard_normal((tau, d)))
        sims = cosine_matrix(q, pool)
        mismatches += topk_indices(sims, kappa).tolist() != topk_bruteforce(sims.tolist(), kappa)
    ties = [
        (torch.tensor([0.2, 0.9, 0.9]), 1, [1]),
        (torch.tensor([0.5, 0.5, 0.5, 0.5]), 2, [0, 1]),
        (torch.tensor([0.1, 0.7, 0.3, 0.7, 0.7]), 2, [1, 3]),
    ]
    pool = torch.tensor([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    ties.append((cosine_matrix(torch.tensor([1.0, 0.0], dtype=torch.float64), pool), 1, [0]))
    ties_ok = all(topk_indices(s, k).tolist() == e for s, k, e in ties)
    dt = time.perf_counter() - t0
    report(capsys, 4, mismatches == 0 and ties_ok and dt < 5,
           f"{1000 - mismatches}/1000 match brute force, tie rule={ties_ok}, {dt:.2f}s")


# 5 ---------------------------------------------------------------------------

def test_criterion_05_aggregation_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    arcs = [{"a": torch.as_tensor(rng.standard_normal((4, 3))), "b": torch.as_tensor(rng.standard_normal(7))}
            for _ in range(3)]
    out = fedavg(arcs, [1, 2, 3])
    fed_err = max(float((out[k] - (arcs[0][k] + 2 * arcs[1][k] + 3 * arcs[2][k]) / 6).abs().max()) for k in out)

    controls = rng.standard_normal((16, 8))
    same = aggregate_profiles([controls.copy() for _ in range(4)], 0.99, 64)
    srt = lambda x: x[np.lexsort(x.T[::-1])]
    idem = same.shape == controls.shape and float(np.max(np.abs(srt(same) - srt(controls)))) <= 1e-10

    eye = np.eye(8)
    no_merge = aggregate_profiles([eye[:5], eye[5:]], 0.5, 64).shape[0] == 8

    uploads = [rng.standard_normal((int(rng.integers(2, 8)), 6)) for _ in range(6)]
    base = aggregate_profiles(uploads, 0.2, 64)
    perm_ok = all(np.array_equal(aggregate_profiles([uploads[i] for i in rng.permutation(6)], 0.2, 64), base)
                  for _ in range(20))
    dt = time.perf_counter() - t0
    report(capsys, 5, fed_err <= 1e-12 and idem and no_merge and perm_ok and dt < 10,
           f"fedavg err {fed_err:.1e}, idempotent={idem}, orthogonal no-merge={no_merge}, "
           f"20 permutations invariant={perm_ok}, {dt:.2f}s")


# 6 ---------------------------------------------------------------------------

def test_criterion_06_zero_deviation_identity(capsys, tmp_path):
    stats = MissingStats(0.5, 0.5)
    ds = generate_synthetic(300, 4, 8, 5, 1.0, seed=0)
    data = prepare_federated_data(ds, 4, stats, seed=0)
    cfg = FederationConfig(n_clients=4, clients_per_round=2, rounds=3, local_epochs=1)
    run_federation(cfg, data, 0, stats, stats, out_dir=tmp_path)
    t0 = time.perf_counter()
    model = make_model(cfg, data.feature_lens, data.n_classes, derive_seed(0, "init"))
    load_state(model, load_checkpoint(tmp_path / "final"), cfg.tau, derive_seed(0, "pad-eval"))
    values = [output_deviation(model, data.test, 0, n, seed) for n, seed in [(1, 0), (4, 1), (10, 2)]]
    dt = time.perf_counter() - t0
    report(capsys, 6, all(v == 0.0 for v in values) and dt < 5, f"deviations {values}, {dt:.2f}s")


# 7 and 9 ---------------------------------------------------------------------

DESK = dict(n_samples=2000, n_modalities=4, feature_len=8, n_classes=5, class_separation=1.0)


def desk_data(seed, stats):
    ds = generate_synthetic(DESK["n_samples"], DESK["n_modalities"], DESK["feature_len"], DESK["n_classes"],
                            DESK["class_separation"], seed=seed)
    return prepare_federated_data(ds, 8, stats, seed)


def final_accuracy(method, seed, stats, **overrides):
    cfg = FederationConfig(n_clients=8, rounds=150, local_epochs=3, embed_dim=16, tau=16, kappa=4, method=method,
                           **overrides)
    return run_federation(cfg, desk_data(seed, stats), seed, stats, stats).final_accuracy


@pytest.fixture(scope="module")
def robustness_runs():
    t0 = time.perf_counter()
    acc = {}
    for seed in SEEDS:
        for pm in (0.8, 0.0):
            stats = MissingStats(pm, pm)
            for method in ("pepsy", "fedavg_plain") + (("pepsy_np",) if pm == 0.8 else ()):
                acc[(method, pm, seed)] = final_accuracy(method, seed, stats)
    return acc, time.perf_counter() - t0


def mean_acc(acc, method, pm):
    return float(np.mean([acc[(method, pm, s)] for s in SEEDS]))


@pytest.mark.slow
def test_criterion_07_missingness_robustness(capsys, robustness_runs):
    acc, dt = robustness_runs
    gap_hi = 100 * (mean_acc(acc, "pepsy", 0.8) - mean_acc(acc, "fedavg_plain", 0.8))
    gap_lo = 100 * (mean_acc(acc, "pepsy", 0.0) - mean_acc(acc, "fedavg_plain", 0.0))
    ok = gap_hi >= 3.0 and abs(gap_lo) <= 3.0 and dt < 20 * 60
    report(capsys, 7, ok,
           f"0.8/0.8: pepsy {mean_acc(acc, 'pepsy', 0.8):.4f} vs plain {mean_acc(acc, 'fedavg_plain', 0.8):.4f} "
           f"(gap {gap_hi:+.2f} pts, need >= 3); 0.0/0.0: pepsy {mean_acc(acc, 'pepsy', 0.0):.4f} vs plain "
           f"{mean_acc(acc, 'fedavg_plain', 0.0):.4f} (gap {gap_lo:+.2f} pts, need |gap| <= 3); "
           f"harness {dt / 60:.1f} min")


@pytest.mark.slow
def test_criterion_09_profile_ablation(capsys, robustness_runs):
    acc, dt = robustness_runs
    full, no_profile = mean_acc(acc, "pepsy", 0.8), mean_acc(acc, "pepsy_np", 0.8)
    report(capsys, 9, full >= no_profile and dt < 20 * 60,
           f"0.8/0.8: pepsy {full:.4f} vs pepsy_np {no_profile:.4f}; shared harness {dt / 60:.1f} min")


# 8 ---------------------------------------------------------------------------

LAMBDAS = (0.0, 0.1, 0.2)


@pytest.mark.slow
def test_criterion_08_alignment_weight_trend(capsys):
    t0 = time.perf_counter()
    stats = MissingStats(0.0, 0.0)
    devs = {}
    for seed in SEEDS:
        data = desk_data(seed, stats)
        for lam in LAMBDAS:
            cfg = FederationConfig(n_clients=8, rounds=150, local_epochs=3, lam=lam)
            res = run_federation(cfg, data, seed, stats, stats)
            devs[(lam, seed)] = output_deviation(res.federation.global_model(), data.test,
                                                 DESK["n_modalities"] - 1, 4, seed)
    means = [float(np.mean([devs[(lam, s)] for s in SEEDS])) for lam in LAMBDAS]
    rho = spearmanr(LAMBDAS, means).statistic
    dt = time.perf_counter() - t0
    report(capsys, 8, rho <= 0 and dt < 30 * 60,
           f"mean deviation at |S|=3 for lambda {LAMBDAS}: {[round(m, 5) for m in means]}, "
           f"Spearman {rho:+.3f} (need <= 0), {dt / 60:.1f} min")


# 10 --------------------------------------------------------------------------

def test_criterion_10_determinism(capsys, tmp_path):
    from mmfl.cli import main
    t0 = time.perf_counter()
    args = ["train", "--set", "federation.rounds=10", "--set", "missing.train_pm=0.6", "--set", "missing.train_ps=0.5",
            "--set", "missing.test_pm=0.4", "--set", "missing.test_ps=0.4", "--set", "seed=11"]
    codes = [main(args + ["--out", str(tmp_path / name)]) for name in ("a", "b")]
    same = (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "b" / "rounds.csv").read_bytes()
    same_log = (tmp_path / "a" / "client_log.csv").read_bytes() == (tmp_path / "b" / "client_log.csv").read_bytes()
    dt = time.perf_counter() - t0
    capsys.readouterr()
    report(capsys, 10, codes == [0, 0] and same and same_log and dt < 300,
           f"rounds.csv identical={same}, client_log.csv identical={same_log}, {dt:.1f}s")


# 11 --------------------------------------------------------------------------

def test_criterion_11_bound_arithmetic(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for m, mu in itertools.product(range(2, 13), (0.5, 1.0, 3.7)):
        closed = mu * (m - 1) * math.sqrt(2 * math.log(m))
        worst = max(worst, abs(bound_rhs(0.0, m - 1, m, mu) - closed))
    dt = time.perf_counter() - t0
    report(capsys, 11, worst <= 1e-12 and dt < 1, f"max |rhs - closed form| {worst:.1e}, {dt * 1000:.1f} ms")
