"""One test per acceptance criterion.

Criteria 5-8 share a session fixture that trains the desk models, renders the
held-out set and evaluates every schedule once. Set CRM_ACCEPTANCE_CACHE to a
directory to keep those artifacts between runs; otherwise a temporary
directory is used and everything is rebuilt.
"""

import dataclasses
import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from crm import cam
from crm.cli import main as cli_main
from crm.decoder import CRM, CRMConfig, decode
from crm.diffcore import Tensor, check_gradients, ops
from crm.diffcore.gradcheck import OPS, grad_check
from crm.encoder import EncoderConfig
from crm.inference import default_schedule, uniform_schedule
from crm.metrics import EvalReport, ItemResult, evaluate, mba
from crm.reproduce import DeskSetup, get_model, make_heldout, stage_table, write_rows
from crm.training import Checkpoint, load_checkpoint, save_checkpoint, synthetic_dataset
from oracles import bilinear_naive, mba_naive, mba_vectorized_bruteforce

SETUP = DeskSetup()
ARMS = ("full", "no-cam", "no-implicit")


# ---------------------------------------------------------------- criterion 1


def _identity_decoder_model(latent_channels: int) -> CRM:
    """Decoder whose output logit equals latent channel 0 blended over the corners."""
    cfg = CRMConfig(EncoderConfig(base_channels=4, latent_channels=latent_channels), hidden=(2, 2, 2, 2))
    model = CRM.init(cfg, seed=0, dtype=np.float64)
    p = model.params
    for k in p:
        if k.startswith("decoder"):
            p[k].data[...] = 0.0
    # position channels come first (6), then the latent vector
    p["decoder.fc0.weight"].data[0, 6] = 1.0
    p["decoder.fc0.weight"].data[1, 6] = -1.0
    for i in (1, 2, 3):
        p[f"decoder.fc{i}.weight"].data[...] = np.eye(2)
    p["decoder.fc4.weight"].data[0] = [1.0, -1.0]
    return model


def test_c1_oracle_equivalence(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        c = int(rng.integers(8, 17))
        h, w = (int(v) for v in rng.integers(1, 13, 2))
        ht, wt = (int(v) for v in rng.integers(1, 49, 2))
        lat = rng.standard_normal((c, h, w))
        model = _identity_decoder_model(c)
        got = decode(Tensor(lat), (ht, wt), model).data[0, 0]
        ref = bilinear_naive(lat[:1], ht, wt)[0]
        worst = max(worst, float(np.max(np.abs(got - ref))))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-6 and secs < 60
    criterion("C1", ok, f"max |CAM pipeline - bilinear oracle| = {worst:.2e} over 50 cases (tol 1e-6), {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 2


def test_c2_gradient_suite(criterion):
    t0 = time.perf_counter()
    per_op = {op: max(grad_check(op, seed=s).max_rel_err for s in range(3)) for op in sorted(OPS)}
    cfg = CRMConfig(EncoderConfig(base_channels=2, latent_channels=8, depth=1), hidden=(4, 4, 4, 4))
    model = CRM.init(cfg, seed=0, dtype=np.float64)
    names = sorted(model.params)
    rng = np.random.default_rng(2)
    # zero biases put whole-layer-dead queries exactly on the next relu kink
    for k in names:
        if k.endswith("bias"):
            model.params[k].data[...] = rng.uniform(0.05, 0.2, model.params[k].shape)
    img = rng.random((3, 8, 8))
    msk = (rng.random((1, 8, 8)) > 0.5).astype(float)

    def end_to_end(x, *ws):
        from crm.decoder import refine_once

        m = CRM(cfg, dict(zip(names, ws)))
        return refine_once(ops.getitem(x, slice(0, 3)), ops.getitem(x, slice(3, 4)), (11, 9), m)

    e2e = check_gradients(end_to_end, [np.concatenate([img, msk])] + [model.params[k].data for k in names],
                          seed=3, max_entries=8).max_rel_err
    worst_op = max(per_op, key=per_op.get)
    secs = time.perf_counter() - t0
    ok = max(per_op.values()) < 1e-4 and e2e < 1e-4 and secs < 300
    criterion("C2", ok, f"{len(per_op)} ops, worst {worst_op} {per_op[worst_op]:.2e}; "
                        f"end-to-end tiny model {e2e:.2e} (tol 1e-4), {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 3


def test_c3_partition_of_unity(criterion):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst, n, n_clamped = 0.0, 0, 0
    while n < 10_000:
        h, w = (int(v) for v in rng.integers(1, 33, 2))
        # queries span the whole image, plus extra ones in the half-cell border
        # bands where the outer corners are clamped
        u = np.concatenate([rng.uniform(-0.5, h - 0.5, 24), rng.uniform(-0.5, 0.0, 4), rng.uniform(h - 1, h - 0.5, 4)])
        v = np.concatenate([rng.uniform(-0.5, w - 0.5, 24), rng.uniform(-0.5, 0.0, 4), rng.uniform(w - 1, w - 0.5, 4)])
        c = cam.corner_offsets_and_weights(u, v, (h, w))
        assert np.all(c.weight > 0)
        worst = max(worst, float(np.max(np.abs(c.weight.sum(axis=0) - 1.0))))
        border = (u < 0) | (u > h - 1)
        n_clamped += int(border.sum() * v.size + (~border).sum() * ((v < 0) | (v > w - 1)).sum())
        n += u.size * v.size
    secs = time.perf_counter() - t0
    ok = worst <= 1e-9 and n_clamped > 0 and secs < 60
    criterion("C3", ok, f"max |sum of weights - 1| = {worst:.2e} over {n} queries ({n_clamped} border-clamped), {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 4


def test_c4_norm_preservation(criterion):
    m = 4096
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    inside = 0
    for _ in range(100):
        a = rng.standard_normal((m, m), dtype=np.float32) * np.float32(np.sqrt(2.0 / m))
        f = rng.standard_normal(m)
        f /= np.linalg.norm(f)
        out = ops.relu(ops.matmul(Tensor(a), Tensor(f[:, None].astype(np.float32)))).data
        inside += abs(float(np.linalg.norm(out.astype(np.float64))) - 1.0) <= 0.1
    secs = time.perf_counter() - t0
    ok = inside >= 95 and secs < 60
    criterion("C4", ok, f"{inside}/100 trials with ||relu(Af)|| within 10% of ||f||=1 at m={m} (need 95), {secs:.1f}s")
    assert ok


# ------------------------------------------------------- desk experiment fixture


def _report_to_json(rep: EvalReport) -> dict:
    return {"schedule": list(rep.schedule), "checkpoint": rep.checkpoint, "skipped": rep.skipped,
            "items": [dataclasses.asdict(it) for it in rep.items]}


def _report_from_json(d: dict) -> EvalReport:
    return EvalReport(tuple(d["schedule"]), [ItemResult(**it) for it in d["items"]],
                      [tuple(s) for s in d["skipped"]], d["checkpoint"])


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    env = os.environ.get("CRM_ACCEPTANCE_CACHE")
    root = Path(env) if env else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    timings = {}

    t0 = time.perf_counter()
    items = make_heldout(SETUP, root / "heldout")
    timings["heldout"] = time.perf_counter() - t0

    dataset = None
    models = {}
    for arm in ARMS:
        t0 = time.perf_counter()
        if not (root / "models" / f"{arm}.crm").exists() and dataset is None:
            dataset = synthetic_dataset(SETUP.n_train, SETUP.train_res, SETUP.train_seed)
        models[arm] = get_model(SETUP, arm, root / "models", allow_train=True, dataset=dataset)
        timings[f"train {arm}"] = time.perf_counter() - t0

    runs = {("full", "default"): default_schedule(), ("no-cam", "default"): default_schedule(),
            ("no-implicit", "default"): default_schedule()}
    for n in (1, 2, 4):
        runs[("full", f"uniform{n}")] = uniform_schedule(n)
    reports = {}
    for (arm, name), sched in runs.items():
        path = root / "reports" / f"{arm}_{name}.json"
        t0 = time.perf_counter()
        if path.exists():
            reports[arm, name] = _report_from_json(json.loads(path.read_text()))
        else:
            rep = evaluate(items, models[arm], sched, checkpoint=f"{arm}.crm")
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(_report_to_json(rep)))
            reports[arm, name] = rep
        timings[f"eval {arm} {name}"] = time.perf_counter() - t0
    return {"root": root, "items": items, "reports": reports, "timings": timings}


# ---------------------------------------------------------------- criterion 5


def test_c5_desk_refinement_gain(desk, criterion):
    rep = desk["reports"]["full", "default"]
    d_iou, d_mba = 100 * rep.delta_iou, 100 * rep.delta_mba
    t = desk["timings"]
    pipeline = t["heldout"] + t["train full"] + t["eval full default"]
    ok = len(rep.items) == SETUP.n_test and d_iou >= 2.0 and d_mba >= 5.0
    criterion("C5", ok, f"IoU {100 * rep.mean_iou_coarse:.2f} -> {100 * rep.mean_iou:.2f} ({d_iou:+.2f}, need +2.0); "
                        f"mBA {100 * rep.mean_mba_coarse:.2f} -> {100 * rep.mean_mba:.2f} ({d_mba:+.2f}, need +5.0); "
                        f"{len(rep.items)} items; pipeline wall time {pipeline / 60:.1f} min (uncached part only)")
    assert ok


# ---------------------------------------------------------------- criterion 6


def test_c6_multires_trend(desk, criterion):
    rep = desk["reports"]["full", "default"]
    rows = stage_table(rep)
    write_rows(desk["root"] / "stage-table.tsv", rows, ["preset\tstage-table"])
    # a one-stage [0.125] run is exactly stage 0 of the default schedule
    only_first = float(np.mean([it.stage_mba[0] for it in rep.items]))
    table = ", ".join(f"{r['ratio']}: {100 * r['iou']:.2f}/{100 * r['mba']:.2f}" for r in rows)
    print("stage table (IoU/mBA):", table)
    ok = rep.schedule == (0.125, 0.25, 0.5, 1.0) and rep.mean_mba > only_first
    criterion("C6", ok, f"mBA default {100 * rep.mean_mba:.2f} vs [0.125] alone {100 * only_first:.2f}; stages {table}")
    assert ok


# ---------------------------------------------------------------- criterion 7


def test_c7_schedule_sweep(desk, criterion):
    m = [100 * desk["reports"]["full", f"uniform{n}"].mean_mba for n in (1, 2, 4)]
    ok = m[1] >= m[0] - 0.3 and m[2] >= m[1] - 0.3
    criterion("C7", ok, f"mBA n=1 {m[0]:.2f}, n=2 {m[1]:.2f}, n=4 {m[2]:.2f} (non-decreasing within 0.3)")
    assert ok


# ---------------------------------------------------------------- criterion 8


def test_c8_ablation_direction(desk, criterion):
    m = {arm: 100 * desk["reports"][arm, "default"].mean_mba for arm in ARMS}
    ok = m["full"] >= m["no-cam"] and m["full"] >= m["no-implicit"]
    criterion("C8", ok, f"mBA full {m['full']:.2f}, no CAM {m['no-cam']:.2f}, no implicit {m['no-implicit']:.2f}")
    assert ok


# ---------------------------------------------------------------- criterion 9


def _blob_masks(h, w):
    """Every axis-aligned rectangle in an h x w grid (a cheap exhaustive family)."""
    for y0, y1 in itertools.combinations(range(h + 1), 2):
        for x0, x1 in itertools.combinations(range(w + 1), 2):
            g = np.zeros((h, w), bool)
            g[y0:y1, x0:x1] = True
            yield g


def test_c9_metric_oracle(criterion):
    t0 = time.perf_counter()
    checked = 0
    mismatches = 0
    # every (gt, pred) pair for every shape with at most 4 pixels, and 3x3
    shapes = [(h, w) for h in range(1, 5) for w in range(1, 5) if h * w <= 4] + [(3, 3)]
    for h, w in shapes:
        masks = [np.array(bits, bool).reshape(h, w) for bits in itertools.product([0, 1], repeat=h * w)]
        for g in masks:
            if g.all() or not g.any():
                continue
            for p in masks:
                mismatches += mba(p, g) != mba_vectorized_bruteforce(p, g)
                checked += 1
    # every rectangle gt for every shape up to 8x8 against random predictions
    rng = np.random.default_rng(9)
    for h in range(1, 9):
        for w in range(1, 9):
            for g in _blob_masks(h, w):
                if g.all():
                    continue
                p = rng.random((h, w)) < 0.5
                mismatches += mba(p, g) != mba_naive(p, g)
                checked += 1
    # random 32 x 32 masks
    for _ in range(100):
        g = rng.random((32, 32)) < rng.uniform(0.2, 0.8)
        p = g ^ (rng.random((32, 32)) < 0.15)
        mismatches += mba(p, g) != mba_vectorized_bruteforce(p, g)
        checked += 1
    secs = time.perf_counter() - t0
    ok = mismatches == 0
    criterion("C9", ok, f"{checked} mask pairs, {mismatches} mismatches against the brute-force oracle "
                        f"(exact equality), {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 10


def test_c10_determinism(tmp_path, criterion):
    corpus = tmp_path / "corpus"
    assert cli_main(["synth", "--n", "6", "--res", "64", "--out", str(corpus), "--seed", "3"]) == 0
    assert cli_main(["perturb", "--corpus", str(corpus), "--seed", "3"]) == 0
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        argv = ["train", "--corpus", str(corpus), "--out", str(out), "--seed", "11", "--total-steps", "12",
                "--patch-size", "48", "--batch-size", "2", "--checkpoint-every", "6", "--log-every", "0"]
        assert cli_main(argv) == 0
        runs.append(out)
    same_train = all((runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
                     for f in ("final.crm", "ckpt_000006.crm", "loss.tsv"))

    refined = []
    for k in range(2):
        out = tmp_path / f"refined{k}.png"
        argv = ["refine", "--image", str(corpus / "s000003.img.png"), "--mask", str(corpus / "s000003.coarse.png"),
                "--ckpt", str(runs[0] / "final.crm"), "--schedule", "0.5,1.0", "--out", str(out)]
        assert cli_main(argv) == 0
        refined.append(out.read_bytes())
    same_refine = refined[0] == refined[1]

    ck = load_checkpoint(runs[0] / "final.crm")
    again = save_checkpoint(ck, tmp_path / "copy.crm")
    back = load_checkpoint(again)
    round_trip = again.read_bytes() == (runs[0] / "final.crm").read_bytes() and all(
        back.params[k].tobytes() == ck.params[k].tobytes() for k in ck.params)
    model = ck.to_model()
    fresh = Checkpoint.from_model(model, ck.step, ck.config.get("train"))
    round_trip &= all(fresh.params[k].tobytes() == ck.params[k].tobytes() for k in ck.params)

    ok = same_train and same_refine and round_trip
    criterion("C10", ok, f"train byte-identical: {same_train}; refine byte-identical: {same_refine}; "
                         f"checkpoint round-trip bit-exact: {round_trip}")
    assert ok
