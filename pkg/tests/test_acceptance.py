"""Acceptance criteria, one test each, at their stated tolerances and time budgets.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers
(visible under ``pytest -v``) before asserting. The transfer-ordering check
trains three dVAE + pretraining + fine-tuning pipelines and takes several
minutes on one core.
"""

import math
import shutil
import time

import numpy as np
import pytest

from pointbert import config as C
from pointbert.cli import class_interleaved, run
from pointbert.datasets import PART_TAXONOMY, generate_corpus, stack_split
from pointbert.downstream import (
    finetune_classification,
    fewshot_eval,
    idw_weights,
    interpolate,
    miou,
    segment_predict,
    train_segmenter,
)
from pointbert.dvae import train_dvae
from pointbert.geometry import chamfer_l1, knn, sample_fps
from pointbert.gradsuite import SEEDS, TOLERANCE, run_suite
from pointbert.neuralops import MLP
from pointbert.pretrain import (
    MemoryBank,
    MomentumEncoder,
    bank_enqueue,
    evaluate_mpm,
    make_block_mask,
    make_rand_mask,
    moco_loss,
    momentum_update,
    train_pretrain,
)


def report(capsys, number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail}"
    with capsys.disabled():
        print("\n" + line)
    return line


def toy_corpus():
    cfg = C.parse_config()
    corpus = generate_corpus(C.corpus_config(cfg), cfg["seed"])
    return cfg, {s: stack_split(items) for s, items in corpus.items()}


@pytest.fixture(scope="module")
def toy():
    return toy_corpus()


@pytest.fixture(scope="module")
def toy_dvae(toy):
    """Toy-preset dVAE on 8 class-interleaved training shapes, timed."""
    cfg, data = toy
    pts, _, cls = data["train"]
    idx = class_interleaved(cls, cfg["dvae_train"]["train_clouds"])
    t0 = time.perf_counter()
    model, log = train_dvae(pts[idx], C.dvae_config(cfg), C.dvae_train_config(cfg),
                            C.streams_for(cfg["seed"], "dvae", ("init", "batch", "gumbel")))
    return model, log, time.perf_counter() - t0, idx


# -- 1 ---------------------------------------------------------------------------------------------


REQUIRED = ("mini_pointnet", "edgeconv", "attention", "transformer_block", "folding_layer", "dvae_loss",
            "mpm_loss", "moco_loss")


def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    worst = run_suite(SEEDS)
    elapsed = time.perf_counter() - t0
    failing = sorted(k for k, v in worst.items() if not v < TOLERANCE)
    missing = [k for k in REQUIRED if k not in worst]
    ok = not failing and not missing and len(SEEDS) >= 5 and elapsed < 120
    detail = (f"{len(worst)} cases x {len(SEEDS)} seeds, max rel err {max(worst.values()):.2e} "
              f"(tol {TOLERANCE:g}), failing {failing or 'none'}, {elapsed:.1f}s of 120s")
    report(capsys, 1, "gradient suite", ok, detail)
    assert ok, detail


# -- 2 ---------------------------------------------------------------------------------------------


def _fps_oracle(pts, g, start):
    """Recompute every candidate's distance to the whole chosen set from scratch each round."""
    chosen = [start]
    for _ in range(g - 1):
        diff = pts[:, None, :] - pts[chosen][None, :, :]
        d = (diff * diff).sum(axis=-1).min(axis=1)
        d[chosen] = -1.0
        chosen.append(int(np.argmax(d)))
    return chosen


def _knn_oracle(q, r, k):
    out = []
    for qi in q:
        diff = r - qi
        d = (diff * diff).sum(axis=-1)
        out.append(np.lexsort((np.arange(len(r)), d))[:k].tolist())
    return out


def _chamfer_oracle(P, G):
    a = np.mean([min(math.dist(p, g) for g in G) for p in P])
    b = np.mean([min(math.dist(g, p) for p in P) for g in G])
    return a + b


def test_criterion_2_geometry_oracles(capsys):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    fps_bad = knn_bad = 0
    chamfer_err = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 129))
        pts = rng.normal(size=(n, 3))
        g = int(rng.integers(1, n + 1))
        start = int(rng.integers(n))
        fps_bad += sample_fps(pts, g, start).tolist() != _fps_oracle(pts, g, start)
        q = rng.normal(size=(int(rng.integers(1, 17)), 3))
        k = int(rng.integers(1, n + 1))
        knn_bad += knn(q, pts, k).tolist() != _knn_oracle(q, pts, k)
        other = rng.normal(size=(int(rng.integers(1, 65)), 3))
        chamfer_err = max(chamfer_err, abs(chamfer_l1(pts, other) - _chamfer_oracle(pts, other)))
    elapsed = time.perf_counter() - t0
    ok = fps_bad == 0 and knn_bad == 0 and chamfer_err <= 1e-10 and elapsed < 30
    detail = (f"200 clouds: FPS mismatches {fps_bad}, kNN mismatches {knn_bad}, "
              f"max Chamfer error {chamfer_err:.1e}, {elapsed:.1f}s of 30s")
    report(capsys, 2, "geometry oracles", ok, detail)
    assert ok, detail


# -- 3 ---------------------------------------------------------------------------------------------


def test_criterion_3_masking_contracts(capsys):
    t0 = time.perf_counter()
    count_bad = block_bad = 0
    draws = 0
    master = np.random.default_rng(3)
    for g in (16, 64):
        for _ in range(1000):
            r = float(master.uniform(0.25, 0.45))
            seed = int(master.integers(2**32))
            rng = np.random.default_rng(seed)
            centers = rng.normal(size=(g, 3))
            want = math.floor(r * g)
            block = make_block_mask(centers, r, rng=rng)
            rand = make_rand_mask(g, r, rng)
            count_bad += len(block.indices) != want or len(rand.indices) != want
            d = [math.dist(centers[block.seed_index], c) for c in centers]
            brute = sorted(sorted(range(g), key=lambda i: (d[i], i))[:want])
            block_bad += brute != block.indices.tolist()
            draws += 1
    elapsed = time.perf_counter() - t0
    ok = count_bad == 0 and block_bad == 0 and elapsed < 10
    detail = f"{draws} draws over g in {{16, 64}}: count errors {count_bad}, block mismatches {block_bad}, {elapsed:.1f}s of 10s"
    report(capsys, 3, "masking contracts", ok, detail)
    assert ok, detail


# -- 4 ---------------------------------------------------------------------------------------------


def test_criterion_4_dvae_sanity(capsys, toy_dvae, toy):
    cfg, _ = toy
    model, log, elapsed, idx = toy_dvae
    d = model.cfg
    geometry = (d.vocab_size, d.num_groups, d.group_size) == (128, 16, 16)
    first, last = log[0]["chamfer_fine"], log[-1]["chamfer_fine"]
    ratio = last / first
    t = cfg["dvae_train"]
    zero_end, ramp_end, tau_end = t["kl_zero_steps"], t["kl_zero_steps"] + t["kl_ramp_steps"], t["tau_steps"]
    alpha = [row["alpha"] for row in log]
    tau = [row["tau"] for row in log]
    schedule = (
        alpha[0] == 0.0 and alpha[zero_end] == 0.0 and alpha[zero_end + 1] > 0.0
        and alpha[ramp_end - 1] < 0.1 and alpha[ramp_end] == 0.1 and alpha[-1] == 0.1
        and tau[0] == 1.0 and tau[tau_end - 1] > 0.0625 and tau[tau_end] == 0.0625 and tau[-1] == 0.0625
    )
    tokens = log[-1]["tokens_used"]
    ok = geometry and len(log) == 300 and len(idx) == 8 and ratio <= 0.5 and schedule and tokens >= 2 and elapsed < 180
    detail = (f"fine Chamfer {first:.4f} -> {last:.4f} (ratio {ratio:.3f}, need <= 0.5), "
              f"alpha 0->0.1 at step {ramp_end}, tau 1->0.0625 at step {tau_end}: {schedule}, "
              f"tokens used {tokens}, {elapsed:.1f}s of 180s")
    report(capsys, 4, "dVAE sanity", ok, detail)
    assert ok, detail


# -- 5 ---------------------------------------------------------------------------------------------


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_criterion_5_contrastive_equivalence(capsys):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        dim, size, tau = int(rng.integers(2, 17)), int(rng.integers(1, 33)), float(rng.uniform(0.05, 1.0))
        q, k1, k2 = (_unit(rng.normal(size=(1, dim))) for _ in range(3))
        bank = _unit(rng.normal(size=(size, dim)))
        got = float(moco_loss(q, k1, k2, bank, 1.0, tau).data)
        pos = math.exp(float(q[0] @ k1[0]) / tau)
        neg = sum(math.exp(float(q[0] @ b) / tau) for b in bank)
        worst = max(worst, abs(got + math.log(pos / (pos + neg))))

    bank = MemoryBank(64, 8, rng)
    shadow_written, fifo_ok, norm_ok, cursor_ok = [], True, True, True
    written = 0
    for op in range(10_000):
        b = int(rng.integers(1, 9))
        keys = rng.normal(size=(b, 8))
        slots = (bank.cursor + np.arange(b)) % 64
        bank_enqueue(bank, keys)
        written += b
        fifo_ok &= np.allclose(bank.queue[slots], _unit(keys), rtol=0, atol=1e-15)
        cursor_ok &= bank.cursor == written % 64
        if op % 500 == 0:
            norm_ok &= bool(np.all(np.abs(np.linalg.norm(bank.queue, axis=1) - 1) <= 1e-6))

    online = MLP((3, 4, 2), rng)
    shadow = MomentumEncoder(online, 0.9)
    ema_ok = True
    for _ in range(2000):
        for p in online.parameters():
            p.data += rng.normal(scale=0.01, size=p.shape)
        before = [s.data.copy() for s in shadow.module.parameters()]
        momentum_update(online, shadow)
        for s, old, p in zip(shadow.module.parameters(), before, online.parameters()):
            ema_ok &= np.allclose(s.data, 0.9 * old + 0.1 * p.data, rtol=0, atol=1e-15)
            ema_ok &= s.grad is None
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and fifo_ok and norm_ok and cursor_ok and ema_ok and elapsed < 10
    detail = (f"100 instances max |loss - direct sum| {worst:.1e}; 10^4 enqueues FIFO {fifo_ok}, cursor {cursor_ok}, "
              f"unit norm {norm_ok}; momentum EMA {ema_ok}; {elapsed:.1f}s of 10s")
    report(capsys, 5, "contrastive loss and bank", ok, detail)
    assert ok, detail


# -- 6 ---------------------------------------------------------------------------------------------


def _pretrain_once(cfg, data, tokenizer):
    streams = C.streams_for(cfg["seed"], "pretrain", ("init", "batch", "mask", "mix", "dropout"))
    pcfg = C.pretrain_config(cfg)
    state, log = train_pretrain(data["train"][0], tokenizer, pcfg, streams)
    acc = evaluate_mpm(state.model, tokenizer, data["val"][0], pcfg, C.substream(cfg["seed"], "pretrain/eval"))
    return state, log, acc


def test_criterion_6_mpm_learnability(capsys, toy, toy_dvae):
    cfg, data = toy
    tokenizer = toy_dvae[0]
    t0 = time.perf_counter()
    state, log, acc = _pretrain_once(cfg, data, tokenizer)
    first = time.perf_counter() - t0
    state2, log2, acc2 = _pretrain_once(cfg, data, tokenizer)
    same = log == log2 and acc == acc2 and all(
        np.array_equal(a, b) for a, b in zip(state.model.state_dict().values(), state2.model.state_dict().values()))
    chance = 1.0 / tokenizer.cfg.vocab_size
    ok = len(log) == 200 and acc >= 3 * chance and same and first < 300
    detail = (f"held-out masked-token accuracy {acc:.3f} vs 3x chance {3 * chance:.4f}, "
              f"rerun bit-identical {same}, {first:.1f}s of 300s per run")
    report(capsys, 6, "MPM learnability", ok, detail)
    assert ok, detail


# -- 7 ---------------------------------------------------------------------------------------------


def test_criterion_7_transfer_ordering(capsys, toy):
    cfg, data = toy
    tr, va = data["train"], data["val"]
    allp = np.concatenate([data[s][0] for s in ("train", "val", "test")])
    alll = np.concatenate([data[s][2] for s in ("train", "val", "test")])
    fs = cfg["fewshot"]
    t0 = time.perf_counter()
    rows = []
    for seed in range(3):
        idx = class_interleaved(tr[2], 8 * len(cfg["corpus"]["families"]))
        tok, _ = train_dvae(tr[0][idx], C.dvae_config(cfg), C.dvae_train_config(cfg),
                            C.streams_for(seed, "dvae", ("init", "batch", "gumbel")))
        state, _ = train_pretrain(tr[0], tok, C.pretrain_config(cfg),
                                  C.streams_for(seed, "pretrain", ("init", "batch", "mask", "mix", "dropout")))
        init = state.model.encoder.backbone.state_dict()
        row = {}
        for name, weights in (("scratch", None), ("pretrained", init)):
            streams = C.streams_for(seed, "finetune", ("init", "batch", "dropout", "augment"))
            _, log = finetune_classification((tr[0], tr[2]), (va[0], va[2]), C.finetune_config(cfg), streams,
                                             len(cfg["corpus"]["families"]), init_state=weights)
            mean, _, _ = fewshot_eval(allp, alll, fs["way"], fs["shot"], C.finetune_config(cfg, fs["epochs"]),
                                      C.substream(seed, "fewshot"), init_state=weights, episodes=fs["episodes"],
                                      mode=fs["mode"])
            row[name] = (100.0 * log[-1]["val_acc"], mean)
        rows.append(row)
    elapsed = time.perf_counter() - t0
    val = {k: float(np.mean([r[k][0] for r in rows])) for k in ("scratch", "pretrained")}
    few = {k: float(np.mean([r[k][1] for r in rows])) for k in ("scratch", "pretrained")}
    ok = val["pretrained"] >= val["scratch"] - 2 and few["pretrained"] >= few["scratch"] - 2 and elapsed < 900
    detail = (f"val acc scratch {val['scratch']:.1f} / pretrained {val['pretrained']:.1f}; "
              f"{fs['way']}-way {fs['shot']}-shot scratch {few['scratch']:.1f} / pretrained {few['pretrained']:.1f} "
              f"(3 seeds, margin 2 points), {elapsed:.0f}s of 900s")
    report(capsys, 7, "transfer ordering", ok, detail)
    assert ok, detail


# -- 8 ---------------------------------------------------------------------------------------------


def test_criterion_8_segmentation_pipeline(capsys, toy):
    cfg, data = toy
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    _, w = idw_weights(rng.normal(size=(4, 200, 3)), rng.normal(size=(4, 20, 3)))
    weight_err = float(np.max(np.abs(w.sum(-1) - 1.0)))
    sparse, feats = rng.normal(size=(1, 20, 3)), rng.normal(size=(1, 20, 6))
    limit_err = 0.0
    for i in range(20):
        step = _unit(rng.normal(size=3)) * 1e-8
        exact = interpolate(sparse[:, i : i + 1], sparse, feats).data
        near = interpolate(sparse[:, i : i + 1] + step, sparse, feats).data
        limit_err = max(limit_err, float(np.max(np.abs(exact - near))))

    scfg = C.seg_config(cfg)
    family = cfg["segment"]["families"][0]
    class_id = cfg["corpus"]["families"].index(family)
    pts, parts, cls = data["train"]
    keep = cls == class_id
    part_ids = PART_TAXONOMY[family]
    local = np.searchsorted(part_ids, parts[keep])
    streams = C.streams_for(cfg["seed"], "segment", ("init", "batch", "dropout"))
    model, _ = train_segmenter(pts[keep], local, len(part_ids), scfg, streams)
    pred = segment_predict(model, pts[keep])
    train_acc = float((pred == local).mean())
    perfect = miou(list(local), list(local), [0] * len(local), {0: tuple(range(len(part_ids)))})
    elapsed = time.perf_counter() - t0
    ok = (weight_err <= 1e-9 and limit_err <= 1e-6 and train_acc >= 0.9 and perfect[0] == 100.0
          and perfect[1] == 100.0 and elapsed < 300)
    detail = (f"weight-sum error {weight_err:.1e}, shortcut vs limit {limit_err:.1e}, "
              f"{family} 2-part train point accuracy {100 * train_acc:.1f}%, perfect mIoU {perfect[0]}/{perfect[1]}, "
              f"{elapsed:.1f}s of 300s")
    report(capsys, 8, "segmentation pipeline", ok, detail)
    assert ok, detail


# -- 9 ---------------------------------------------------------------------------------------------


SMALL = [
    'corpus.families=["sphere","cube","torus"]', "corpus.instances_per_class=22", "corpus.split_counts=[20,1,1]",
    "corpus.point_count=128", "dvae.vocab_size=32", "dvae.code_dim=16", "dvae.embed_dim=16", "dvae.num_groups=16",
    "dvae.group_size=16", "dvae.graph_dims=[16,16]", "dvae.feat_dim=32", "dvae.coarse_hidden=32",
    "dvae.fold_hidden=32", "model.dim=16", "model.heads=2", "model.ffn_dim=32", "pretrain.bank_size=32",
    "pretrain.proj_hidden=16", "pretrain.proj_dim=16", "finetune.head_hidden=16", 'segment.families=["torus"]',
    "segment.num_points=128", "segment.num_groups=16", "segment.resolutions=[64,32]", "segment.edge_hidden=16",
    "segment.head_hidden=16", "fewshot.way=2", "fewshot.shot=1", "fewshot.episodes=2",
]


def _pipeline(root):
    """Every command once, chained through their checkpoints."""
    d, p, f = root / "dvae", root / "pretrain", root / "finetune"
    codes = [run("build-corpus", overrides=SMALL, out=root / "corpus")]
    corpus = [f"paths.corpus={root / 'corpus' / 'corpus'}"]
    codes.append(run("train-dvae", overrides=SMALL + corpus, out=d, steps=5))
    chain = SMALL + corpus + [f"paths.dvae={d / 'dvae.ckpt'}"]
    codes.append(run("pretrain", overrides=chain, out=p, steps=3))
    chain += [f"paths.pretrain={p / 'pretrain.ckpt'}"]
    codes.append(run("finetune-cls", overrides=chain, out=f, steps=2))
    codes.append(run("finetune-seg", overrides=chain, out=root / "segment", steps=3))
    codes.append(run("fewshot", overrides=chain, out=root / "fewshot", steps=1))
    codes.append(run("reconstruct", overrides=chain, out=root / "reconstruct"))
    codes.append(run("eval", overrides=SMALL + corpus + [f"paths.classifier={f / 'classifier.ckpt'}"],
                     out=root / "eval"))
    return codes


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.suffix in (".csv", ".ckpt", ".bin", ".pcld")}


def test_criterion_9_reproducibility(capsys, tmp_path):
    # Same directory both times, so the effective configs (which hold paths) match too.
    root = tmp_path / "run"
    t0 = time.perf_counter()
    codes_a = _pipeline(root)
    first = _snapshot(root)
    shutil.rmtree(root)
    codes_b = _pipeline(root)
    second = _snapshot(root)
    elapsed = time.perf_counter() - t0
    differ = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    ok = codes_a == codes_b == [0] * 8 and len(first) >= 12 and not differ
    detail = (f"8 commands run twice, exit codes {codes_a}, {len(first)} CSV/checkpoint/cloud files compared, "
              f"differing {differ or 'none'}, {elapsed:.1f}s")
    report(capsys, 9, "reproducibility", ok, detail)
    assert ok, detail
