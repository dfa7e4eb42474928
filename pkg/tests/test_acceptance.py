"""End-to-end acceptance checks on the 5-class Gaussian toy.

Each test appends one ``criterion N: PASS|FAIL`` line that the terminal
summary prints.  Tolerances are fixed constants below; the toy settings live
in ``configs/toy.cfg``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from dfunlearn import checkpoint as ckio
from dfunlearn import nncore as nn
from dfunlearn.checkpoint import Checkpoint
from dfunlearn.cli import main
from dfunlearn.config import load_config
from dfunlearn.data import load_idx, restrict
from dfunlearn.engine import run_unlearning
from dfunlearn.errors import FormatError
from dfunlearn.evaluation import accuracy, ain, mia_i
from dfunlearn.experiment import Experiment
from dfunlearn.losses import (LabelSplit, adv_loss, balance_loss, is_loss, kd_loss,
                              postfilter_kd_loss, redistribute_logits, softmax_np)
from dfunlearn.models import (ClassifierSpec, GeneratorSpec, classifier_logits, generate,
                              init_network, make_rng, sample_noise)
from oracle import numeric_grad, rel_err

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (1, 2, 3)
FORGET = (3,)

GRAD_TOL = 1e-4
SUM_TOL = 1e-9
KD_SELF_TOL = 1e-12
N_ROWS = 10_000
DRIFT_FACTOR = 1.5
TAIL = 0.2
ENTROPY_GAIN = 0.20
AF_MAX = 2.0
AR_GAP_GOLD = 5.0
AR_GAP_GKT = 3.0
BLOCKF_AF_MIN = 20.0
MIA_GOLD_MIN = 95.0
MIA_TEACHER_MAX = 20.0
PD_SLACK = 1.0
MIN_SEEDS = 2


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def tail_mean(logs, field):
    k = max(1, int(round(len(logs) * TAIL)))
    return float(np.mean([getattr(e, field) for e in logs[-k:]]))


# -- shared toy runs ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy(tmp_path_factory, monkeypatch_module):
    monkeypatch_module.setenv("ULRN_OUT", str(tmp_path_factory.mktemp("toy")))
    exp = Experiment(load_config(ROOT / "configs" / "toy.cfg"))
    split = exp.split(FORGET)
    teacher, gold = exp.teacher(), exp.gold(FORGET)
    runs = {}
    for method in ("DFKD", "GKT", "IS", "PF", "ISPF", "BlockF", "PD_IS"):
        for seed in SEEDS:
            res = run_unlearning(teacher, exp.cfg.train_config(method, seed, exp.x_range()), split)
            runs[method, seed] = res
    return exp, split, teacher, gold, runs


@pytest.fixture(scope="module")
def monkeypatch_module():
    mp = pytest.MonkeyPatch()
    yield mp
    mp.undo()


def acc(exp, model, classes):
    return accuracy(model, exp.data[1], classes)


# -- 1: gradients ------------------------------------------------------------------------------

def test_criterion_01_gradients():
    rng = make_rng(0)
    k, d, m = 4, 3, 5
    split = LabelSplit(k, (1,))
    sspec = ClassifierSpec(d, (6,), k)
    tspec = ClassifierSpec(d, (7,), k)
    gspec = GeneratorSpec(2, (5,), d, -2.0, 2.0)
    student, teacher, gen = (init_network(s, make_rng(i)) for i, s in enumerate((sspec, tspec, gspec)))
    z = sample_noise(rng, m, 2)
    x = rng.uniform(-2, 2, size=(m, d))

    def gen_side(kind):
        def f():
            xs = generate(gen, gspec, z)
            T = nn.softmax(classifier_logits(teacher, tspec, xs, frozen=True))
            S = nn.log_softmax(classifier_logits(student, sspec, xs, frozen=True))
            return {"adv": lambda: adv_loss(T, S), "is": lambda: is_loss(T, S, split),
                    "balance": lambda: balance_loss(T)}[kind]()
        return f, gen

    def student_side(kind):
        t_logits = classifier_logits(teacher, tspec, x, frozen=True).data

        def f():
            S = nn.log_softmax(classifier_logits(student, sspec, x))
            if kind == "kd":
                return kd_loss(softmax_np(t_logits), S)
            return postfilter_kd_loss(t_logits, S, split)
        return f, student

    worst = {}
    for name, (f, params) in {**{k_: gen_side(k_) for k_ in ("adv", "is", "balance")},
                              **{k_: student_side(k_) for k_ in ("kd", "postfilter")}}.items():
        for _, t in (*student.items(), *teacher.items(), *gen.items()):
            t.grad[...] = 0.0
        nn.backward(f())
        errs = [rel_err(t.grad, numeric_grad(lambda: f().item(), t.data, 1e-5), floor=1e-6)
                for _, t in params.items()]
        worst[name] = max(errs)
        frozen_side = teacher.items() if name in ("kd", "postfilter") else (*teacher.items(), *student.items())
        assert all(np.all(t.grad == 0.0) for _, t in frozen_side)
    ok = max(worst.values()) < GRAD_TOL
    record(1, ok, "max rel err " + ", ".join(f"{k_}={v:.1e}" for k_, v in worst.items()))
    assert ok


# -- 2, 3: algebra -------------------------------------------------------------------------------

def test_criterion_02_postfilter_algebra():
    rng = make_rng(2)
    worst_sum, order_ok, min_ok = 0.0, True, True
    for k in (2, 3, 5, 10):
        n = N_ROWS // 4
        t = rng.normal(scale=rng.uniform(0.1, 20.0, size=(n, 1)), size=(n, k))
        for i in range(0, n, 50):
            forget = rng.choice(k, size=rng.integers(1, k), replace=False)
            split = LabelSplit(k, tuple(forget))
            rows = t[i:i + 50]
            out = redistribute_logits(rows, split)
            worst_sum = max(worst_sum, float(np.max(np.abs(out.sum(axis=1) - rows.sum(axis=1)))))
            min_ok &= bool(np.all(out[:, split.forget_mask] == rows.min(axis=1, keepdims=True)))
            p = softmax_np(out)
            order_ok &= bool(np.all(p[:, split.forget_mask].max(axis=1)
                                    <= p[:, split.retain_mask].min(axis=1)))
    ok = worst_sum <= SUM_TOL and min_ok and order_ok
    record(2, ok, f"max |row sum drift|={worst_sum:.1e}, forget=min: {min_ok}, p_f<=p_r: {order_ok}")
    assert ok


def test_criterion_03_loss_identities():
    rng = make_rng(3)
    k = 6
    t = rng.normal(scale=5.0, size=(N_ROWS, k))
    s = rng.normal(scale=5.0, size=(N_ROWS, k))
    T = softmax_np(t)
    S = nn.log_softmax(nn.Tensor(s))
    adv_eq = is_eq = True
    for i in range(0, N_ROWS, 100):
        Ti, Si = T[i:i + 100], nn.Tensor(S.data[i:i + 100])
        a = adv_loss(Ti, Si).item()
        adv_eq &= a == -kd_loss(Ti, Si).item()
        is_eq &= is_loss(Ti, Si, LabelSplit(k)).item() == a
    self_kl = max(abs(kd_loss(T[i:i + 1], nn.log_softmax(nn.Tensor(t[i:i + 1]))).item())
                  for i in range(N_ROWS))
    ok = adv_eq and is_eq and self_kl <= KD_SELF_TOL
    record(3, ok, f"adv=-kd exact: {adv_eq}, is(empty)=adv exact: {is_eq}, max kd(T,T)={self_kl:.1e}")
    assert ok


# -- 4-6: training diagnostics -------------------------------------------------------------------

def test_criterion_04_forgetting_drift(toy):
    _, _, _, _, runs = toy
    wins, parts = 0, []
    for seed in SEEDS:
        g, d, i = (tail_mean(runs[m, seed].logs, "n_forget_synth") for m in ("GKT", "DFKD", "IS"))
        win = g >= DRIFT_FACTOR * d and g >= DRIFT_FACTOR * i
        wins += win
        parts.append(f"s{seed}: GKT={g:.1f} DFKD={d:.1f} IS={i:.1f}")
    ok = wins >= MIN_SEEDS
    record(4, ok, f"{wins}/3 seeds; " + "; ".join(parts))
    assert ok


def test_criterion_05_over_filtering(toy):
    _, _, _, _, runs = toy
    wins, parts = 0, []
    for seed in SEEDS:
        logs = runs["GKT", seed].logs
        nf, nfs = tail_mean(logs, "n_filtered"), tail_mean(logs, "n_forget_synth")
        wins += nf >= nfs
        parts.append(f"s{seed}: filtered={nf:.1f} forget={nfs:.1f}")
    ok = wins >= MIN_SEEDS
    record(5, ok, f"{wins}/3 seeds; " + "; ".join(parts))
    assert ok


def test_criterion_06_entropy(toy):
    _, _, _, _, runs = toy
    pf = np.mean([np.mean([e.H_B for e in runs["PF", s].logs]) for s in SEEDS])
    gkt = np.mean([np.mean([e.H_B for e in runs["GKT", s].logs]) for s in SEEDS])
    ok = pf >= (1.0 + ENTROPY_GAIN) * gkt
    record(6, ok, f"mean H_B PF={pf:.2f} GKT={gkt:.2f} ratio={pf / max(gkt, 1e-12):.2f}")
    assert ok


# -- 7-10: outcomes ------------------------------------------------------------------------------

def test_criterion_07_end_to_end(toy):
    exp, split, _, gold, runs = toy
    gold_ar = acc(exp, gold, split.retain)
    wins, parts = 0, []
    for seed in SEEDS:
        ispf, gkt = runs["ISPF", seed].student, runs["GKT", seed].student
        af, ar, gar = acc(exp, ispf, split.forget), acc(exp, ispf, split.retain), acc(exp, gkt, split.retain)
        win = af <= AF_MAX and abs(ar - gold_ar) <= AR_GAP_GOLD and gar <= ar - AR_GAP_GKT
        wins += win
        parts.append(f"s{seed}: ISPF A_f={af:.1f} A_r={ar:.1f}, GKT A_r={gar:.1f}")
    ok = wins >= MIN_SEEDS
    record(7, ok, f"{wins}/3 seeds; gold A_r={gold_ar:.1f}; " + "; ".join(parts))
    assert ok


def test_criterion_08_blockf(toy):
    exp, split, _, _, runs = toy
    afs = [acc(exp, runs["BlockF", s].student, split.forget) for s in SEEDS]
    ok = all(a >= BLOCKF_AF_MIN for a in afs)
    record(8, ok, "BlockF A_f " + ", ".join(f"s{s}={a:.1f}" for s, a in zip(SEEDS, afs)))
    assert ok


def test_criterion_09_metric_sanity(toy):
    exp, split, teacher, gold, runs = toy
    train, test = exp.data
    d_f, d_r, d_r_test = restrict(train, split.forget), restrict(train, split.retain), restrict(test, split.retain)
    m_gold, m_teacher = (mia_i(m, d_f, d_r, d_r_test) for m in (gold, teacher))
    rc = exp.cfg.relearn_config(0)
    self_ain = ain(gold, gold, teacher, train, test, split, rc)
    dfkd = np.mean([ain(runs["DFKD", s].student, gold, teacher, train, test, split, exp.cfg.relearn_config(s))
                    for s in SEEDS])
    ispf = np.mean([ain(runs["ISPF", s].student, gold, teacher, train, test, split, exp.cfg.relearn_config(s))
                    for s in SEEDS])
    ok = m_gold >= MIA_GOLD_MIN and m_teacher <= MIA_TEACHER_MAX and self_ain == 1.0 and dfkd < ispf
    record(9, ok, f"MIA_I gold={m_gold:.1f} teacher={m_teacher:.1f}; AIN gold/gold={self_ain}; "
                  f"AIN DFKD={dfkd:.3f} < ISPF={ispf:.3f}")
    assert ok


def test_criterion_10_pd_vs_pf(toy):
    exp, split, _, _, runs = toy
    rows = {}
    for method in ("ISPF", "PD_IS"):
        af = [acc(exp, runs[method, s].student, split.forget) for s in SEEDS]
        ar = [acc(exp, runs[method, s].student, split.retain) for s in SEEDS]
        rows[method] = (np.mean(af), np.mean(ar))
    ok = rows["ISPF"][1] >= rows["PD_IS"][1] - PD_SLACK
    record(10, ok, "; ".join(f"{m}: A_f={af:.2f} A_r={ar:.2f}" for m, (af, ar) in rows.items()))
    assert ok


# -- 11, 12: formats and determinism ------------------------------------------------------------

def test_criterion_11_formats(tmp_path):
    spec = ClassifierSpec(3, (4,), 2)
    raw = ckio.to_bytes(Checkpoint(spec, init_network(spec, make_rng(11)), {"seed": 1.0}))
    resave = ckio.to_bytes(ckio.from_bytes(raw)) == raw

    ip, lp = tmp_path / "i", tmp_path / "l"
    ip.write_bytes(struct.pack(">4I", 0x803, 2, 1, 3) + bytes([0, 51, 255, 102, 204, 0]))
    lp.write_bytes(struct.pack(">2I", 0x801, 2) + bytes([4, 9]))
    ds = load_idx(ip, lp)
    idx_ok = ds.x.tolist() == [[0.0, 0.2, 1.0], [0.4, 0.8, 0.0]] and ds.y.tolist() == [4, 9]

    rejected = 0
    ip.write_bytes(struct.pack(">4I", 0x802, 2, 1, 3) + bytes(6))
    try:
        load_idx(ip, lp)
    except FormatError:
        rejected += 1
    try:
        ckio.from_bytes(b"ULRNX\n" + raw[6:])
    except FormatError:
        rejected += 1
    ok = resave and idx_ok and rejected == 2
    record(11, ok, f"resave identical: {resave}, IDX exact: {idx_ok}, bad magic rejected: {rejected}/2")
    assert ok


def test_criterion_12_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("ULRN_OUT", raising=False)
    cfg_text = (ROOT / "configs" / "smoke.cfg").read_text().replace("seeds = 7", "seeds = 1, 2")
    reports = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        (d / "c.cfg").write_text(cfg_text.replace("../runs/smoke", "out"))
        assert main(["sweep", str(d / "c.cfg")]) == 0
        reports.append((d / "out" / "report.csv").read_bytes())
    ok = reports[0] == reports[1] and len(reports[0].splitlines()) == 3
    record(12, ok, f"report.csv byte-identical across two sweeps ({len(reports[0])} bytes)")
    assert ok
