"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into the terminal summary (see conftest.py).
Criteria 6-8 share one set of paired runs over seeds 1..5.
"""
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from relctr import autograd as ag
from relctr import experiment as ex
from relctr.debias import DebiasConfig, debias_loss, pairwise_loss_naive, sample_fake_rsl
from relctr.encoder import (REFERENCE_ENCODER, Encoder, EncoderConfig, RelevanceHead, TeacherOracle, Vocab,
                            distill_loss, overall_loss, parameter_count, pretrain_pipeline, sft_loss)
from relctr.metrics import auc, brute_force_auc, gauc, relaimpr
from relctr.model import ModelConfig, RankModel, main_loss
from relctr.synth import WorldConfig, generate_world

from conftest import make_batch
from relaimpr_tables import BASE_T1, TABLE1, decimals, entries

RESULTS: list[str] = []
SEEDS = (1, 2, 3, 4, 5)


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# -- 1 -----------------------------------------------------------------------

def relaimpr_mismatches():
    bad = []
    for name, metric, m, b, printed in entries(TABLE1, BASE_T1):
        if name == "Wide&Deep":
            continue  # the base row itself
        got = round(relaimpr(m, b), decimals(name, metric))
        if got != printed:
            bad.append(f"{name}/{metric} {got:+.2f} vs {printed:+.2f}")
    return bad


@pytest.mark.xfail(strict=True, reason="the printed RI column is not reproducible to two decimals from the "
                                       "printed four-decimal AUC/GAUC columns; see test_metrics for the "
                                       "input-precision check that does hold")
def test_c01_relaimpr_table():
    t = time.perf_counter()
    bad = relaimpr_mismatches()
    dt = time.perf_counter() - t
    ok = not bad and dt < 1.0
    record(1, ok, f"{16 - len(bad)}/16 RI cells exact to printed precision ({dt * 1e3:.1f} ms); "
                  f"mismatches: {'; '.join(bad) or 'none'}")
    assert ok


# -- 2 -----------------------------------------------------------------------

def test_c02_gradient_suite():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = {}
    f_pos, f_neg = ag.parameter(rng.random(8) * 0.1), ag.parameter(rng.random(8) * 0.1)
    errs["naive pairwise"] = ag.gradcheck(lambda: pairwise_loss_naive(f_pos, f_neg), [f_pos, f_neg])
    errs["refined debias"] = ag.gradcheck(lambda: debias_loss(f_pos, f_neg, DebiasConfig()), [f_pos, f_neg])

    toks = [f"t{i}" for i in range(12)]
    vocab = Vocab(toks)
    student = Encoder(EncoderConfig(len(vocab), d_model=8, n_layers=1, n_heads=2, d_ff=8, max_seq_len=10), vocab, 1)
    teacher = TeacherOracle(Encoder(EncoderConfig(len(vocab), d_model=8, n_layers=1, n_heads=2, d_ff=8,
                                                  max_seq_len=10), vocab, 2), 8, seed=3)
    head = RelevanceHead(8, seed=4)
    pairs = [(list(rng.choice(toks, 2)), list(rng.choice(toks, 3))) for _ in range(4)]
    labels = [1, 2, 3, 4]
    enc_params = student.parameters() + head.parameters()
    errs["SFT"] = ag.gradcheck(lambda: sft_loss(student, head, pairs, labels), enc_params)
    errs["distill"] = ag.gradcheck(lambda: distill_loss(student, pairs, teacher), student.parameters())
    errs["overall"] = ag.gradcheck(lambda: overall_loss(student, head, pairs, labels, teacher)[0], enc_params)

    model = RankModel(ModelConfig(n_users=5, n_queries=5, n_items=5, n_categories=2, dense_dim=3, d_text=4,
                                  d_sparse=3, hidden=6, d_att=3, expert_hidden=4, seed=1))
    b = make_batch(B=8, seed=5, click=[1, 0, 1, 1, 0, 0, 1, 0], rsl=[4, 3, 4, 4, 1, 2, 3, 4], empty_rows=(4,))
    deb = DebiasConfig(threshold=0.99)
    fake, noise = np.array([2, 1, 3]), rng.normal(size=(3, 4))
    # entries below 1e-6 are at the finite-difference noise floor of an O(1) loss
    errs["main_loss"] = ag.gradcheck(lambda: main_loss(model, b, debias=deb, fake_rsl=fake, noise=noise).total,
                                     model.parameters(), atol=1e-6)
    dt = time.perf_counter() - t
    worst = max(errs.values())
    ok = worst <= 1e-4 and dt < 30
    record(2, ok, f"worst rel err {worst:.2e} over {len(errs)} losses ({dt:.1f} s): "
                  + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_c03_sampling_law():
    t = time.perf_counter()
    draws = sample_fake_rsl(0.2, 0.6, np.random.default_rng(2024), size=1_000_000)
    freq = np.bincount(draws, minlength=4)[1:] / draws.size
    dt = time.perf_counter() - t
    dev = np.abs(freq - [0.2, 0.4, 0.4]).max()
    ok = dev <= 0.005 and dt < 5
    record(3, ok, f"frequencies {np.round(freq, 4).tolist()} max dev {dev:.4f} ({dt:.2f} s)")
    assert ok


# -- 4 -----------------------------------------------------------------------

def test_c04_truncation_and_saturation():
    cfg = DebiasConfig(margin=0.075, threshold=0.08)
    f_pos = ag.parameter(np.array([0.07, 0.11, 0.09]))  # mean 0.09
    f_neg = ag.parameter(np.array([0.30, 0.00, 0.10]))
    loss = debias_loss(f_pos, f_neg, cfg)
    g = ag.backward(loss, [f_pos, f_neg])
    truncated = loss.item() == 0.0 and not g[f_pos].any() and not g[f_neg].any()

    f_pos = ag.parameter(np.array([0.050, 0.030, 0.075]))
    f_neg = ag.parameter(np.array([0.000, 0.000, -0.010]))  # gaps 0.05, 0.03, 0.085
    g = ag.backward(debias_loss(f_pos, f_neg, cfg), [f_pos, f_neg])
    saturated = g[f_pos][2] == 0.0 and g[f_neg][2] == 0.0 and g[f_pos][0] < 0 and g[f_pos][1] < 0
    f_eq = ag.parameter(np.array([0.075]))
    f_zero = ag.parameter(np.array([0.0]))
    g = ag.backward(debias_loss(f_eq, f_zero, cfg), [f_eq, f_zero])
    at_margin = g[f_eq][0] == 0.0 and g[f_zero][0] == 0.0
    ok = truncated and saturated and at_margin
    record(4, ok, f"truncated batch zero value and grads: {truncated}; gap>=margin zero grad: "
                  f"{saturated and at_margin}")
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_c05_auc_oracle_equivalence():
    t = time.perf_counter()
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 1001))
        s = rng.integers(0, int(rng.integers(2, 200)), n) / 10.0  # coarse grid forces ties
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        u = rng.integers(0, int(rng.integers(1, 30)), n)
        u[1] = u[0]  # at least one user with both classes keeps GAUC defined
        mismatches += auc(s, y) != brute_force_auc(s, y)
        mismatches += gauc(s, y, u) != gauc(s, y, u, auc_fn=brute_force_auc)
    dt = time.perf_counter() - t
    ok = mismatches == 0 and dt < 60
    record(5, ok, f"{mismatches} exact mismatches over 100 datasets for AUC and GAUC ({dt:.1f} s)")
    assert ok


# -- 6, 7, 8 -------------------------------------------------------------------

VARIANTS = {
    "full": {},
    "no_debias": {"debias": False},
    "naive": {"debias_naive": True},
    "own_only": {"use_cross": False},
}


@pytest.fixture(scope="module")
def paired_runs():
    t = time.perf_counter()
    runs = {name: [] for name in VARIANTS}
    base = ex.TrainConfig()
    for seed in SEEDS:
        cfg = base.replace(seed=seed)
        for name, kw in VARIANTS.items():
            runs[name].append(ex.run_experiment(cfg.replace(**kw)))
    return runs, time.perf_counter() - t


def test_c06_debias_efficacy(paired_runs):
    runs, dt = paired_runs
    a = [r.slices["full"]["auc"] for r in runs["full"]]
    b = [r.slices["full"]["auc"] for r in runs["no_debias"]]
    deltas = np.subtract(a, b)
    med = float(np.median(deltas))
    ok = med >= 0.005
    record(6, ok, f"median full-space AUC delta {med:+.4f} (per seed {np.round(deltas, 4).tolist()}); "
                  f"6-8 runs took {dt:.0f} s")
    assert ok


def test_c07_calibration(paired_runs):
    runs, _ = paired_runs
    full = float(np.median([abs(r.pcoc - 1) for r in runs["full"]]))
    naive = float(np.median([abs(r.pcoc - 1) for r in runs["naive"]]))
    ok = full < naive
    record(7, ok, f"median |PCOC-1| margin+truncation {full:.3f} vs naive {naive:.3f}")
    assert ok


def test_c08_cold_start(paired_runs):
    runs, _ = paired_runs
    full = np.subtract([r.slices["full_cold"]["gauc"] for r in runs["full"]],
                       [r.slices["full_cold"]["gauc"] for r in runs["own_only"]])
    exposed = np.subtract([r.slices["exposed_cold"]["gauc"] for r in runs["full"]],
                          [r.slices["exposed_cold"]["gauc"] for r in runs["own_only"]])
    med = float(np.median(full))
    ok = med > 0
    record(8, ok, f"cold-start GAUC delta, full candidate space: median {med:+.4f} "
                  f"(per seed {np.round(full, 4).tolist()}); exposed slice median {np.median(exposed):+.4f}")
    assert ok


def test_exposure_skew_of_experiment_world():
    # precondition of criterion 6: at least 80% of exposed samples are highly relevant
    raw = ex.get_raw(ex.TrainConfig(seed=SEEDS[0]))
    rsl = np.array([s.rsl for s in raw.train if s.exposed])
    assert (rsl >= 3).mean() >= 0.80


# -- 9 -----------------------------------------------------------------------

def test_c09_mixture_normalisation():
    t = time.perf_counter()
    model = RankModel(ModelConfig(n_users=50, n_queries=20, n_items=40, n_categories=4, dense_dim=4, d_text=8,
                                  seed=9))
    sums_dev, bound_viol = 0.0, 0
    for chunk in range(5):
        b = make_batch(B=2000, d=8, m=4, k=3, n_ids=60, dense_dim=4, seed=100 + chunk)
        for f in ("q_emb", "i_emb", "r_cur"):
            setattr(b, f, getattr(b, f) * 3.0)  # push heads towards saturation
        with ag.no_grad():
            out = model(b)
        p_rsl, p_cond, p = out.p_rsl.data, out.p_cond.data, out.p_click.data
        sums_dev = max(sums_dev, float(np.abs(p_rsl.sum(axis=1) - 1).max()))
        bound_viol += int(((p < p_cond.min(axis=1)) | (p > p_cond.max(axis=1))).sum())
    dt = time.perf_counter() - t
    ok = sums_dev <= 1e-6 and bound_viol == 0 and dt < 10
    record(9, ok, f"1e4 inputs: max |sum p_rsl - 1| {sums_dev:.1e}, bound violations {bound_viol} ({dt:.1f} s)")
    assert ok


# -- 10 ----------------------------------------------------------------------

def test_c10_encoder_pretraining():
    t = time.perf_counter()
    world = generate_world(WorldConfig(), 0)
    res = pretrain_pipeline(world, n_pairs=5000, seed=0)
    dt = time.perf_counter() - t
    acc = res.history.heldout_accuracy[-1]
    med = res.history.train_distill
    mono = all(b < a for a, b in zip(med, med[1:]))
    n = parameter_count(Encoder(REFERENCE_ENCODER))
    ok = acc > 0.40 and mono and 1_500_000 <= n <= 2_500_000 and dt < 600
    record(10, ok, f"held-out SFT accuracy {acc:.3f}; distill epoch medians decreasing: {mono} "
                   f"({med[0]:.4f} -> {med[-1]:.4f}); reference-config parameters {n:,} ({dt:.0f} s)")
    assert ok


# -- 11 ----------------------------------------------------------------------

def test_c11_determinism(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("\n".join([
        "seed = 7", "n_users = 150", "pretrain_pairs = 400", "pretrain_epochs = 2", "epochs = 1",
        f"data_dir = {tmp_path / 'data'}", f"output_dir = {tmp_path / 'run'}",
    ]) + "\n")

    def relctr(*args):
        subprocess.run([sys.executable, "-m", "relctr", *args, "--config", str(cfg)], check=True,
                       capture_output=True)

    relctr("gen-data")
    reports = []
    for attempt in range(2):
        relctr("train")
        relctr("eval")
        keep = tmp_path / f"report{attempt}.json"
        shutil.copy(tmp_path / "run" / "report.json", keep)
        reports.append(keep.read_bytes())
    ok = reports[0] == reports[1]
    record(11, ok, f"two train+eval runs in fresh processes: reports byte-identical = {ok} "
                   f"({len(reports[0])} bytes)")
    assert ok
