"""Acceptance criteria for the package, one test per criterion.

Each test records its criterion name and runtime limit; ``conftest.py``
prints a PASS/FAIL line for every one at the end of the run.
"""

import math
import time

import numpy as np
import pytest

from conviformer import ops
from conviformer.checkpoint import CheckpointBundle, convert, load_into
from conviformer.data import generate
from conviformer.gradcheck import check_gradients, max_rel_err, scalarize
from conviformer.labels import Hierarchy
from conviformer.losses import (
    LOSS_MODES,
    LossWeights,
    PhyloMatrix,
    combined_loss,
    cross_entropy,
    mine_triplets,
    phylo_distance_loss,
    triplet_loss,
)
from conviformer.model import Conviformer, ConviformerConfig, attention_footprint, head_offsets, patch_count
from conviformer.presizer import PresizeConfig, presize, reflect_pad_to_square, strip_border
from conviformer.tensor import Tensor
from conviformer.train import gradient_suite, preset, resolution_experiment, train
from test_presizer import coordinate_image, reference_presize


@pytest.fixture
def criterion(record_property):
    """Register a criterion; returns a callable that adds a detail string."""

    def register(name: str, limit_s: float):
        record_property("criterion", name)
        record_property("limit_s", limit_s)
        start = time.perf_counter()

        def detail(text: str):
            record_property("detail", f"  {text}")

        def elapsed() -> float:
            return time.perf_counter() - start

        return detail, elapsed

    return register


def test_patch_counts(criterion):
    detail, elapsed = criterion("patch counts (ConViT 196/784/1024/1369, Conviformer 196/256/324)", 1)
    cfg = ConviformerConfig()
    convit = [patch_count(r, r, cfg, "convit") for r in (224, 448, 512, 600)]
    conviformer = [patch_count(r, r, cfg, "conviformer") for r in (448, 512, 600)]
    detail(f"convit={convit} conviformer={conviformer}")
    assert convit == [196, 784, 1024, 1369]
    assert conviformer == [196, 256, 324]
    assert elapsed() < 1


def test_presizer_pipeline(criterion, record_property):
    detail, elapsed = criterion("PreSizer 1000x700 pipeline", 1)
    img = coordinate_image(1000, 700)
    start = time.perf_counter()
    stripped = strip_border(img, 20)
    padded = reflect_pad_to_square(stripped)
    out = presize(img, PresizeConfig(border_px=20, resize_to=512, crop_to=448))
    pipeline_s = time.perf_counter() - start
    assert stripped.data.shape[:2] == (960, 660)
    assert padded.data.shape[:2] == (960, 960)
    for k in range(300):
        assert np.array_equal(padded.data[:, 660 + k], padded.data[:, 659 - k])
    assert out.data.shape == (448, 448, 3)
    assert np.array_equal(out.data, reference_presize(img, 20, 512, 448))
    record_property("runtime_s", pipeline_s)
    detail("runtime covers the package pipeline, not the loop reference")
    assert pipeline_s < 1


def _op_cases(rng):
    def t(*shape, positive=False):
        a = rng.standard_normal(shape)
        return Tensor(np.abs(a) + 0.5 if positive else a)

    x, y = t(3, 4), t(3, 4)
    xp, yp = t(3, 4, positive=True), t(3, 4, positive=True)
    img, w, b = t(2, 3, 6, 6), t(4, 3, 3, 3), t(4)
    img2, g, bias = t(2, 4, 3, 3), t(4), t(4)
    w2, b2 = t(4, 2), t(2)
    pos, ctn, lam = t(2, 5, 5), t(3, 2, 5, 5), t(2)
    table = t(5, 3)
    return {
        "add": (lambda: ops.add(x, y), [x, y]),
        "sub": (lambda: ops.sub(x, y), [x, y]),
        "mul": (lambda: ops.mul(x, y), [x, y]),
        "div": (lambda: ops.div(x, yp), [x, yp]),
        "neg": (lambda: ops.neg(x), [x]),
        "power": (lambda: ops.power(xp, 1.5), [xp]),
        "exp": (lambda: ops.exp(x), [x]),
        "log": (lambda: ops.log(xp), [xp]),
        "sigmoid": (lambda: ops.sigmoid(x), [x]),
        "relu": (lambda: ops.relu(ops.add(x, 0.05)), [x]),
        "gelu": (lambda: ops.gelu(x), [x]),
        "sum": (lambda: ops.sum(x, axis=1), [x]),
        "mean": (lambda: ops.mean(x, axis=0), [x]),
        "pnorm": (lambda: ops.pnorm(x, 3.0), [x]),
        "reshape": (lambda: ops.reshape(x, (4, 3)), [x]),
        "transpose": (lambda: ops.transpose(x), [x]),
        "concat": (lambda: ops.concat([x, y], axis=1), [x, y]),
        "getitem": (lambda: ops.getitem(x, (np.array([0, 2, 2]), np.array([1, 3, 1]))), [x]),
        "embedding_lookup": (lambda: ops.embedding_lookup(table, np.array([4, 0, 4])), [table]),
        "matmul": (lambda: ops.matmul(x, ops.transpose(y)), [x, y]),
        "linear": (lambda: ops.linear(x, w2, b2), [x, w2, b2]),
        "softmax": (lambda: ops.softmax(x, axis=1), [x]),
        "log_softmax": (lambda: ops.log_softmax(x, axis=1), [x]),
        "layer_norm": (lambda: ops.layer_norm(x, g, bias), [x, g, bias]),
        "group_norm": (lambda: ops.group_norm(img2, g, bias), [img2, g, bias]),
        "conv2d": (lambda: ops.conv2d(img, w, b, stride=2, padding=1), [img, w, b]),
        "max_pool2d": (lambda: ops.max_pool2d(img, 2), [img]),
        "dropout": (lambda: ops.dropout(x, 0.3, np.random.default_rng(7)), [x]),
        "head_gate_mix": (lambda: ops.head_gate_mix(ctn, pos, lam), [ctn, pos, lam]),
    }


def test_gradient_suite(criterion):
    detail, elapsed = criterion("gradient suite (every op + tiny model under each loss mode, rel err < 1e-3)", 300)
    worst_op = {}
    for name, (fn, inputs) in _op_cases(np.random.default_rng(0)).items():
        worst_op[name] = max_rel_err(check_gradients(scalarize(fn), inputs, probes=None))
    model_errs = gradient_suite(preset("toy")["model"], LOSS_MODES)
    worst = max(max(worst_op.values()), max(model_errs.values()))
    detail(f"ops worst {max(worst_op, key=worst_op.get)}={max(worst_op.values()):.1e}; "
           + ", ".join(f"{m}={e:.1e}" for m, e in model_errs.items()))
    assert len(worst_op) >= 29
    assert worst < 1e-3
    assert elapsed() < 300


def test_gpsa_gating(criterion):
    detail, elapsed = criterion("GPSA gating extremes and convolutional init", 30)
    model = Conviformer(ConviformerConfig.tiny(dtype="float64", conv_channels=8), 64)
    x = Tensor(np.random.default_rng(0).standard_normal((2, model.grid.t_p, model.cfg.d_emb)))
    gated = model.gpsa_attention(x, "gpsa.1", gate_override=0.0)
    plain = model.self_attention(x, "gpsa.1")
    gap = float(np.abs(gated.data - plain.data).max())
    assert gap <= 1e-6
    perm = np.random.default_rng(1).permutation(model.grid.t_p)
    _, a1 = model.gpsa_attention(x, "gpsa.0", gate_override=1.0, return_attn=True)
    _, a2 = model.gpsa_attention(x[:, perm], "gpsa.0", gate_override=1.0, return_attn=True)
    assert np.array_equal(a1.data, a2.data)
    checked = 0
    for heads in (4, 9, 16):
        cfg = ConviformerConfig.tiny(n_heads=heads, d_emb=64 * heads, locality_strength=10.0, dtype="float64",
                                     base_res=64, n_gpsa_layers=1, n_sa_layers=0, conv_channels=4)
        m = Conviformer(cfg, 64)
        pos = m.positional_scores("gpsa.0", m.grid).data
        gh, gw = m.grid.grid_h, m.grid.grid_w
        off = head_offsets(heads).astype(int)
        r = int(np.abs(off).max())
        for h, (dx, dy) in enumerate(off):
            for yy in range(r, gh - r):
                for xx in range(r, gw - r):
                    assert int(np.argmax(pos[h, yy * gw + xx])) == (yy + dy) * gw + (xx + dx)
                    checked += 1
    detail(f"gate-0 gap {gap:.1e}; {checked} interior argmax checks")
    assert elapsed() < 30


def test_loss_unit_values(criterion):
    detail, elapsed = criterion("loss unit values and compositions", 10)
    rng = np.random.default_rng(0)
    C = 7
    ce = float(cross_entropy(Tensor(np.zeros((5, C))), rng.integers(0, C, 5)).data)
    assert abs(ce - math.log(C)) <= 1e-6
    e = Tensor(rng.standard_normal((4, 3)))
    assert float(triplet_loss(e, e, e, alpha=0.7).data) == pytest.approx(0.7, abs=1e-12)
    d = np.array([[0.0, 2.0, 3.0], [2.0, 0.0, 1.5], [3.0, 1.5, 0.0]])
    # p0, p1, p2 with pairwise distances 2, 3 and 1.5
    x2 = (9 - 2.25 + 4) / 4
    pts = Tensor(np.array([[0.0, 0.0], [2.0, 0.0], [x2, math.sqrt(9 - x2 ** 2)]]))
    exact = float(phylo_distance_loss(pts, np.arange(3), PhyloMatrix(d)).data)
    assert abs(exact) <= 1e-12

    # compositions against numpy sum-of-parts oracles
    h = Hierarchy(np.array([0, 0, 1, 2, 2, 3]), np.array([0, 0, 1, 1]))
    taxa = np.array([0, 1, 0, 3, 4, 5, 2, 4])
    lab = h.labels(taxa)
    out = {"label_tax": Tensor(rng.standard_normal((8, 6))), "label_gen": Tensor(rng.standard_normal((8, 4))),
           "label_fam": Tensor(rng.standard_normal((8, 2)))}
    for k in ("tax", "gen", "fam"):
        out[f"emb_{k}"] = Tensor(rng.standard_normal((8, 3)))
    w = LossWeights(lambda1=0.3, lambda2=0.7, lambda3=1.1, lambda4=0.4, lambda5=0.9, alpha=0.5, lambda_dist=0.25)

    def np_ce(logits, y):
        z = logits - logits.max(1, keepdims=True)
        return float(np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(len(y)), y]))

    def np_trip(emb, ia, ip, ineg):
        dp = ((emb[ia] - emb[ip]) ** 2).sum(1)
        dn = ((emb[ia] - emb[ineg]) ** 2).sum(1)
        return float(np.maximum(dp - dn + w.alpha, 0).mean())

    hier = (np_ce(out["label_tax"].data, lab.taxon) + w.lambda1 * np_ce(out["label_gen"].data, lab.genus)
            + w.lambda2 * np_ce(out["label_fam"].data, lab.family))
    got = float(combined_loss("hier", out, lab, w, hierarchy=h).data)
    errs = [abs(got - hier)]

    ia, ip, ineg = mine_triplets(lab.genus, np.random.default_rng(3))
    trip = hier + sum(lam * np_trip(out[f"emb_{k}"].data, ia, ip, ineg)
                      for k, lam in (("tax", w.lambda3), ("gen", w.lambda4), ("fam", w.lambda5)))
    got = float(combined_loss("hier+trip", out, lab, w, hierarchy=h, rng=np.random.default_rng(3)).data)
    errs.append(abs(got - trip))

    phylo = PhyloMatrix(np.array([[0, 1, 4, 4], [1, 0, 4, 4], [4, 4, 0, 2], [4, 4, 2, 0]], dtype=float))
    g = lab.genus
    emb = out["emb_gen"].data
    pairs = [(a, b) for a in range(8) for b in range(a + 1, 8) if g[a] != g[b]]
    dist = np.mean([(np.linalg.norm(emb[a] - emb[b]) - phylo.d[g[a], g[b]]) ** 2 for a, b in pairs])
    got = float(combined_loss("hier+phylo", out, lab, w, hierarchy=h, phylo=phylo).data)
    errs.append(abs(got - (hier + w.lambda_dist * dist)))
    detail(f"CE uniform err {abs(ce - math.log(C)):.1e}; composition errs {max(errs):.1e}")
    assert max(errs) <= 1e-6
    assert elapsed() < 10


def test_checkpoint_compatibility(criterion):
    detail, elapsed = criterion("checkpoint base->conviformer conversion", 10)
    cfg = ConviformerConfig.tiny(conv_channels=8)
    base = CheckpointBundle.from_model(Conviformer(cfg.replace(mode="convit", seed=5), 32))
    converted = CheckpointBundle.from_bytes(convert(base, "base_to_conviformer").to_bytes())
    assert len(base) - len(converted) == 2
    assert set(base.names) - set(converted.names) == {"patch_embed.proj.w", "patch_embed.proj.b"}
    assert all(converted.entries[k].tobytes() == base.entries[k].tobytes() for k in converted.names)
    model = Conviformer(cfg, 64)
    report = load_into(model, converted)
    assert set(report.fresh) == {n for n in model.params if n.startswith(("frontend.", "patch_embed."))}
    out = model(np.zeros((2, 3, 64, 64), np.float32))
    assert out["label_tax"].shape == (2, cfg.n_taxa) and np.isfinite(out["label_tax"].data).all()
    detail(f"{len(base)} -> {len(converted)} entries; {len(report.fresh)} fresh")
    assert elapsed() < 10


def test_toy_convergence(criterion):
    detail, elapsed = criterion("toy convergence (>=95% train top-1 within 50 epochs, deterministic)", 900)
    exp = preset("toy")
    data = generate(exp["data"])
    assert exp["data"].n_taxa == 8 and exp["train"].epochs <= 50
    runs = []
    for _ in range(2):
        model = Conviformer(exp["model"], exp["data"].img_size)
        result = train(model, data, exp["train"])
        runs.append((CheckpointBundle.from_model(result.model).to_bytes(), result.history))
    history = runs[0][1]
    best = max(r["train_top1"] for r in history)
    detail(f"train top-1 {history[-1]['train_top1']:.3f} after {len(history)} epochs; "
           f"identical reruns: {runs[0] == runs[1]}")
    assert history[-1]["train_top1"] >= 0.95 and best >= 0.95
    assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    assert elapsed() < 900


def test_resolution_trend(criterion):
    detail, elapsed = criterion("resolution trend (128px beats 32px on 3 seeds)", 3600)
    exp = preset("resolution")
    assert exp["resolutions"] == [32, 128] and len(exp["seeds"]) == 3
    report = resolution_experiment(exp["data"], exp["resolutions"], exp["model"], exp["train"], seeds=exp["seeds"])
    lo, hi = report.accuracy(32), report.accuracy(128)
    detail(f"32px {np.round(lo, 3).tolist()} vs 128px {np.round(hi, 3).tolist()}")
    for run in report.runs:
        assert run.t_p == patch_count(run.resolution, run.resolution, exp["model"], "conviformer")
    assert all(h > l for h, l in zip(hi, lo))
    assert elapsed() < 3600


def test_attention_footprint(criterion):
    detail, elapsed = criterion("attention footprint at 512px: 16x smaller", 1)
    cfg = ConviformerConfig()
    convit = attention_footprint(512, 512, cfg, "convit")
    ours = attention_footprint(512, 512, cfg, "conviformer")
    detail(f"{convit} / {ours} = {convit / ours:g}")
    assert (convit, ours) == (1024 ** 2, 256 ** 2)
    assert convit == 16 * ours
    assert elapsed() < 1
