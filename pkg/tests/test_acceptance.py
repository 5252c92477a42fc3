"""
Acceptance criteria, one test each.  Every test records a single
PASS / FAIL / NOT RUN line which is printed in the terminal summary.

Criteria 1 and 2 need the MovieLens-20M ``ratings.csv``; point the
``LEDREC_ML20M`` environment variable at it and pass ``--run-extended``.
"""

import json
import math
import os
import socket
import subprocess
import sys
import threading
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import ACCEPTANCE
from ledrec.ann import brute_force, build_index
from ledrec.data import SplitSpec, Vocabulary, holdout_splits, ingest_ml20m, split_users
from ledrec.evaluation import evaluate
from ledrec.losses import bpr, css_multinomial, negative_sampling
from ledrec.model import (
    LedModel,
    Mode,
    augment_for_mips,
    encode_user,
    encode_user_base,
    parameter_count,
    score_all,
    score_all_trick,
)
from ledrec.rsvd import RsvdConfig, randomized_svd_factors
from ledrec.service import Recommender, load_state, make_state, write_state
from ledrec.synthetic import generate_timelines, random_model
from ledrec.trainer import Example, TrainConfig, Trainer, batch_objective

HERE = Path(__file__).parent
ML20M = os.environ.get("LEDREC_ML20M")


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def not_run(n: int, reason: str) -> None:
    ACCEPTANCE[n] = f"criterion {n:2d}: NOT RUN - {reason}"
    pytest.skip(reason)


# 1, 2: MovieLens-20M


def _ml20m_or_skip(n):
    if not ML20M or not Path(ML20M).exists():
        not_run(n, "MovieLens-20M ratings.csv not available (set LEDREC_ML20M)")


@pytest.mark.extended
def test_c01_ml20m_reproduction(tmp_path):
    _ml20m_or_skip(1)
    from ledrec.cli import Pipeline, load_config

    cfg = load_config(overrides=[f"paths.data={ML20M}", f"paths.workdir={tmp_path}"])
    Pipeline(cfg).pipeline()
    rep = json.loads((tmp_path / "eval" / "report.json").read_text())
    record(
        1,
        rep["recall_20"] >= 0.36 and rep["recall_50"] >= 0.50,
        f"recall@20 {rep['recall_20']:.4f} (>= 0.36), recall@50 {rep['recall_50']:.4f} (>= 0.50)",
    )


@pytest.mark.extended
def test_c02_loss_approximation_gap(tmp_path):
    _ml20m_or_skip(2)
    from ledrec.pmi import build_pmi, count_cooccurrences
    from ledrec.rsvd import randomized_svd
    from ledrec.trainer import train

    ts = ingest_ml20m(ML20M)
    parts = split_users(ts, SplitSpec(seed=0))
    emb, _ = randomized_svd(build_pmi(count_cooccurrences(parts.train)).matrix, RsvdConfig(200))
    base = TrainConfig(dim=200, max_steps=10_000)
    _, splits, _ = holdout_splits(parts.test, 0.8, 0)

    def recall50(cfg):
        return evaluate(train(parts.train, parts.validation, emb, cfg).model, splits).recall_50

    exact = recall50(replace(base, loss="multinomial"))
    gap1000 = (exact - recall50(replace(base, negatives=1000))) / exact
    gap10 = (exact - recall50(replace(base, negatives=10))) / exact
    record(2, gap1000 <= 0.05 and gap10 <= 0.08,
           f"relative recall@50 gap N=1000 {gap1000:.4f} (<= 0.05), N=10 {gap10:.4f} (<= 0.08)")


# 3


def test_c03_css_bpr_margin_identity():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10_000):
        sp_, sn = rng.normal(0, 5, size=2)
        n_items = int(rng.choice([2, 10, 10_000, int(rng.integers(2, 10**6))]))
        css = css_multinomial(sp_, [sn], n_items).loss
        x = sp_ - sn - math.log(n_items - 1)
        ref = math.log1p(math.exp(-x)) if x > 0 else -x + math.log1p(math.exp(x))
        worst = max(worst, abs(css - ref))
    elapsed = time.perf_counter() - t0
    record(3, worst <= 1e-9 and elapsed < 1.0,
           f"max |CSS(N=1) - BPR(margin log(I-1))| = {worst:.2e} over 1e4 triples in {elapsed:.2f}s")


# 4


def test_c04_transposition_trick():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n, d = 10_000, 32
        base = (rng.standard_normal((n, d)) / np.sqrt(d)).astype(np.float32)
        P = (np.eye(d) + 0.3 * rng.standard_normal((d, d))).astype(np.float32)
        b = rng.normal(0, 0.5, n).astype(np.float32)
        m = LedModel(base, b, Mode.PROJECT, P)
        hist = rng.integers(0, n, size=rng.integers(1, 50))
        direct = score_all(encode_user(hist, m), m).astype(np.float64)
        trick = score_all_trick(encode_user_base(hist, m), m).astype(np.float64)
        worst = max(worst, np.abs(trick - direct).max() / np.abs(direct).max())
    record(4, worst <= 1e-5, f"max relative deviation {worst:.2e} over 100 instances (d=32, I=1e4, float32)")


# 5


def _fd(f, x, h=1e-3):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f()
        flat[k] = old - h
        dn = f()
        flat[k] = old
        gf[k] = (up - dn) / (2 * h)
    return g


def _rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def test_c05_gradient_suite():
    rng = np.random.default_rng(5)
    worst = {}
    losses = {
        "bpr": lambda p, n: bpr(p, n),
        "ns": lambda p, n: negative_sampling(p, n),
        "css": lambda p, n: css_multinomial(p, n, 1000),
    }
    for name, fn in losses.items():
        w = 0.0
        for _ in range(100):
            n_pos, n_neg = int(rng.integers(1, 4)), int(rng.integers(1, 20))
            x = rng.normal(0, 2, n_pos + n_neg)
            lv = fn(x[:n_pos], x[n_pos:])
            analytic = np.concatenate([lv.grad_pos, lv.grad_negs])
            numeric = _fd(lambda: fn(x[:n_pos], x[n_pos:]).loss, x)
            w = max(w, _rel(analytic, numeric))
        worst[name] = w

    w = 0.0
    n, d = 50, 8
    for _ in range(100):
        emb = rng.standard_normal((n, d)) / np.sqrt(d)
        biases = rng.normal(0, 0.1, n)
        P = np.eye(d) + 0.3 * rng.standard_normal((d, d))
        ex = []
        for _ in range(3):
            pos = np.unique(rng.integers(0, n, size=rng.integers(1, 4)))
            negs = rng.choice(np.setdiff1d(np.arange(n), pos), size=10, replace=False)
            ex.append(Example(rng.integers(0, n, size=rng.integers(1, 6)), pos, negs))
        g = batch_objective(ex, emb, biases, P, "bpr")
        numeric = _fd(lambda: batch_objective(ex, emb, biases, P, "bpr").loss, P)
        w = max(w, _rel(g.projection, numeric))
    worst["project end-to-end"] = w
    ok = all(v <= 1e-4 for v in worst.values())
    record(5, ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# 6


def _symmetric_instance(rng, kind):
    n = int(rng.integers(30, 201))
    if kind == 0:  # gaussian
        a = rng.standard_normal((n, n))
        return a + a.T
    if kind == 1:  # decaying spectrum
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        s = rng.choice([-1, 1], n) * np.exp(-np.arange(n) / rng.uniform(3, 30))
        return (q * s) @ q.T
    # sparse, PMI-like
    a = sp.random(n, n, density=rng.uniform(0.02, 0.2), random_state=rng, data_rvs=rng.standard_normal)
    return (a + a.T).toarray()


def test_c06_rsvd_oracle():
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    worst = 0.0
    for t in range(50):
        a = _symmetric_instance(rng, t % 3)
        n = a.shape[0]
        d = int(rng.integers(1, min(40, n - 10)))
        u, s, vt = randomized_svd_factors(sp.csr_matrix(a), RsvdConfig(d, 10, 2, seed=t))
        err = np.linalg.norm(a - (u * s) @ vt)
        sv = np.linalg.svd(a, compute_uv=False)
        opt = np.sqrt((sv[d:] ** 2).sum())
        worst = max(worst, err / opt if opt > 0 else (1.0 if err < 1e-9 else np.inf))
    elapsed = time.perf_counter() - t0
    record(6, worst <= 1.05 and elapsed < 60,
           f"worst error / optimal = {worst:.4f} over 50 symmetric matrices (q=2) in {elapsed:.1f}s")


# 7


def test_c07_ann_quality():
    rng = np.random.default_rng(7)
    n, d = 10_000, 32
    v = rng.standard_normal((n, d)).astype(np.float32)
    b = rng.standard_normal(n).astype(np.float32)
    items = np.hstack([v, b[:, None]])
    idx = build_index(items, seed=0)
    hits = 0
    for _ in range(1000):
        q = np.append(rng.standard_normal(d), 1.0).astype(np.float32)
        a = idx.search(q, 50, ef_search=100).items
        ref = brute_force(items, q, 50).items
        hits += len(set(a.tolist()) & set(ref.tolist()))
    recall = hits / (50 * 1000)

    exact = True
    small = items[:2000]
    sidx = build_index(small, seed=1)
    for _ in range(50):
        q = np.append(rng.standard_normal(d), 1.0).astype(np.float32)
        ref = brute_force(small, q, 50)
        assert len(np.unique(ref.scores)) == 50  # distinct-score instance
        got = sidx.search(q, 50, ef_search=2000)
        exact &= got.items.tolist() == ref.items.tolist()
    for _ in range(10):
        q = np.append(rng.standard_normal(d), 1.0).astype(np.float32)
        exact &= idx.search(q, 50, ef_search=n).items.tolist() == brute_force(items, q, 50).items.tolist()
    record(7, recall >= 0.95 and exact,
           f"recall@50 {recall:.4f} at ef=100 over 1000 queries (>= 0.95); exact at ef=I: {exact}")


# 8


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _wait_healthy(port, proc, timeout=300):
    import httpx

    t0 = time.time()
    while time.time() - t0 < timeout:
        if proc.poll() is not None:
            raise RuntimeError("server exited")
        try:
            if httpx.get(f"http://127.0.0.1:{port}/health", timeout=1).status_code == 200:
                return
        except httpx.HTTPError:
            pass
        time.sleep(0.25)
    raise TimeoutError("server did not become healthy")


def _reload_stress(tmp_path, n_requests=100_000):
    """Concurrent clients while the state is reloaded from disk over and over."""
    dirs = {}
    for name, seed in (("a", 11), ("b", 12)):
        m = random_model(1000, 16, seed=seed)
        write_state(tmp_path / name, m, build_index(augment_for_mips(m)[0], ef_construction=40),
                    Vocabulary(tuple(str(i) for i in range(1000)), np.ones(1000, int), np.zeros(1000, int)))
        dirs[name] = tmp_path / name
    expected = {}
    hist = ["1", "2", "3", "500"]
    for name, d in dirs.items():
        st = load_state(d)
        expected[st.version] = Recommender(st, 1000).recommend(hist, 10, 1000)["items"]
    assert len(set(map(tuple, expected.values()))) == 2

    rec = Recommender(load_state(dirs["a"]), max_ef=1000)
    stop = threading.Event()
    reloads = [0]

    def reloader():
        i = 0
        while not stop.is_set():
            rec.reload(dirs["ab"[i % 2]])
            reloads[0] += 1
            i += 1

    mixed, seen = [], set()
    per_client = n_requests // 4

    def client():
        for _ in range(per_client):
            out = rec.recommend(hist, 10, 1000)
            version = out["served_by"].split("+")[0]
            seen.add(version)
            if out["items"] != expected.get(version):
                mixed.append(out)

    t = threading.Thread(target=reloader)
    t.start()
    cs = [threading.Thread(target=client) for _ in range(4)]
    for c in cs:
        c.start()
    for c in cs:
        c.join()
    stop.set()
    t.join()
    return len(mixed), reloads[0], len(seen), per_client * 4


def test_c08_serving(tmp_path):
    import httpx

    n, d = 20_000, 600
    model = random_model(n, d, seed=8)
    items, query = augment_for_mips(model)
    vocab = Vocabulary(tuple(str(100000 + i) for i in range(n)), np.ones(n, int), np.zeros(n, int))
    state_dir = tmp_path / "state"
    write_state(state_dir, model, build_index(items, seed=0), vocab)

    rng = np.random.default_rng(8)
    bodies = [
        {"history": [str(100000 + i) for i in rng.integers(0, n, size=rng.integers(1, 60))], "k": 50}
        for _ in range(1000)
    ]
    (tmp_path / "bodies.json").write_text(json.dumps(bodies))

    port = _free_port()
    server = subprocess.Popen(
        [sys.executable, "-c", f"from ledrec.service import serve; serve({str(state_dir)!r}, port={port}, max_ef={n})"],
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
    )
    try:
        _wait_healthy(port, server)
        load = subprocess.run(
            [sys.executable, str(HERE / "loadgen.py"), "--port", str(port), "--bodies",
             str(tmp_path / "bodies.json"), "--duration", "10", "--connections", "2", "--warmup", "2"],
            capture_output=True, text=True, check=True,
        )
        perf = json.loads(load.stdout)

        # serving output vs the offline composition at ef_search = I
        byte_equal = True
        with httpx.Client(base_url=f"http://127.0.0.1:{port}") as client:
            for body in bodies[:20]:
                got = client.post("/v1/recommend", json={**body, "ef_search": n}).json()
                hist = [vocab.index[h] for h in body["history"]]
                top = brute_force(items, query(encode_user(hist, model)), 50)
                want_items = [vocab.ids[i] for i in top.items.tolist()]
                want_scores = np.asarray(top.scores, dtype=np.float32).tolist()
                byte_equal &= json.dumps(got["items"]) == json.dumps(want_items)
                byte_equal &= json.dumps(got["scores"]) == json.dumps(want_scores)
    finally:
        server.terminate()
        server.wait(30)

    mixed, reloads, versions, total = _reload_stress(tmp_path)
    ok = (perf["p99_ms"] <= 10.0 and perf["qps"] >= 500 and perf["errors"] == 0
          and byte_equal and mixed == 0 and reloads > 0 and versions == 2)
    record(8, ok,
           f"I={n} d={d}: p99 {perf['p99_ms']:.2f} ms (<= 10), {perf['qps']:.0f} qps (>= 500), "
           f"{perf['errors']} errors; byte-equal to offline path: {byte_equal}; "
           f"reload stress: {mixed} mixed of {total} requests across {reloads} reloads")


# 9


def test_c09_parameter_accounting():
    ts = generate_timelines(50, 40, seed=9)
    base = np.random.default_rng(0).standard_normal((40, 6)).astype(np.float32)
    cfg = TrainConfig(negatives=5, batch_size=8, max_steps=1, checkpoint_every=1, dim=6)
    proj = Trainer(ts, None, base, cfg)
    full = Trainer(ts, None, base, replace(cfg, tuning="full"))
    pm, fm = proj.snapshot(), full.snapshot()
    I, d = 40, 6
    counts = {
        "project": parameter_count(pm)["trainable"],
        "project (live arrays)": proj.projection.size + proj.biases.size,
        "full": parameter_count(fm)["trainable"],
        "full (live arrays)": full.emb.size + full.biases.size,
    }
    big = LedModel(np.zeros((20_000, 600), np.float32), np.zeros(20_000, np.float32), Mode.PROJECT,
                   np.eye(600, dtype=np.float32))
    ok = (counts["project"] == counts["project (live arrays)"] == d * d + I
          and counts["full"] == counts["full (live arrays)"] == I * d + I
          and parameter_count(big) == {"trainable": 380_000, "frozen": 12_000_000})
    record(9, ok, f"project {counts['project']} = d^2+I, full {counts['full']} = I*d+I; "
                  f"I=20000 d=600 project -> {parameter_count(big)['trainable']}")


# 10


def test_c10_cold_start():
    rng = np.random.default_rng(10)
    n = 3000
    m = random_model(n, 16, seed=10)
    # inject ties so the lower-index rule is exercised
    b = m.biases.copy()
    b[rng.choice(n, 200, replace=False)] = b.max()
    m = LedModel(m.base, b)
    vocab = Vocabulary(tuple(str(i) for i in range(n)), np.ones(n, int), np.zeros(n, int))
    rec = Recommender(make_state(m, build_index(augment_for_mips(m)[0], seed=0), vocab, "v"))
    ok = True
    for k in (1, 5, 50, 1000, 2500, n):
        expect = np.lexsort((np.arange(n), -b.astype(np.float64)))[:k]
        for hist in ([], ["unknown-a", "unknown-b"]):
            out = rec.recommend(hist, k)
            ok &= out["items"] == [str(i) for i in expect]
    record(10, ok, "empty / unknown-only history returns exactly the k largest-bias items for k in 1..I")
