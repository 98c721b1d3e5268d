"""Desk-scale experiments: train on low-resolution synthetic shapes, evaluate at
higher resolution, and tabulate schedule and ablation comparisons.

Held-out sets and trained models are cached on disk so the presets can share
them; every step is deterministic given the seeds in :class:`DeskSetup`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import gen_sample, load_corpus, read_image_png, read_mask_png, write_image_png, write_mask_png
from .decoder import CRM, CRMConfig
from .inference import RefinementSchedule, default_schedule, uniform_schedule
from .metrics import EvalReport, evaluate
from .training import (
    TrainConfig,
    desk_model_config,
    desk_train_config,
    load_checkpoint,
    perturb_mask,
    save_checkpoint,
    synthetic_dataset,
    train,
)

log = logging.getLogger(__name__)

PRESETS = ("ablate-cam", "schedule-sweep", "stage-table")
SWEEP_N = (1, 2, 4, 8)

# ablation arm -> (use_cam, use_implicit)
ARMS = {
    "full": (True, True),
    "no-implicit": (True, False),
    "no-cam": (False, True),
    "none": (False, False),
}


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class DeskSetup:
    n_train: int = 2000
    train_res: int = 128
    n_test: int = 200
    test_res: int = 512
    train_seed: int = 0
    test_seed: int = 1_000_000
    train: TrainConfig = field(default_factory=desk_train_config)
    model: CRMConfig = field(default_factory=desk_model_config)
    tau_range: tuple[float, float] = (0.8, 1.0)

    def arm_config(self, arm: str) -> CRMConfig:
        cam_on, impl_on = ARMS[arm]
        return replace(self.model, use_cam=cam_on, use_implicit=impl_on)


def heldout_tau(seed: int, tau_range=(0.8, 1.0)) -> float:
    return float(np.random.default_rng([seed, 0xC0A5]).uniform(*tau_range))


def make_heldout(setup: DeskSetup, directory) -> list:
    """Write (or reuse) the held-out corpus: images, gt and perturbed coarse masks."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k in range(setup.n_test):
        s = setup.test_seed + k
        stem = f"t{s:08d}"
        if (d / f"{stem}.coarse.png").exists():
            continue
        img, gt = gen_sample(s, setup.test_res)
        coarse = perturb_mask(gt, heldout_tau(s, setup.tau_range), s)
        write_image_png(img, d / f"{stem}.img.png")
        write_mask_png(gt, d / f"{stem}.gt.png")
        write_mask_png(coarse, d / f"{stem}.coarse.png")
    return heldout_items(setup, d)


def heldout_items(setup: DeskSetup, directory) -> list:
    """Held-out items as in-memory (stem, image, gt, coarse) tuples."""
    items = load_corpus(directory)
    wanted = {f"t{setup.test_seed + k:08d}" for k in range(setup.n_test)}
    out = []
    for it in items:
        if it.stem in wanted:
            out.append((it.stem, read_image_png(it.image), read_mask_png(it.gt), read_mask_png(it.coarse)))
    return out


def get_model(
    setup: DeskSetup,
    arm: str,
    ckpt_dir,
    *,
    allow_train: bool,
    dataset=None,
    progress: Optional[Callable[[int, float, dict], None]] = None,
) -> CRM:
    """Load ``<ckpt_dir>/<arm>.crm`` or train it when ``allow_train``.

    With ``allow_train`` a checkpoint whose recorded model or training
    settings differ from ``setup`` is retrained rather than reused.
    """
    path = Path(ckpt_dir) / f"{arm}.crm"
    if path.exists():
        ck = load_checkpoint(path)
        wanted = {"model": setup.arm_config(arm).to_dict(), "train": setup.train.to_dict()}
        if {k: ck.config.get(k) for k in wanted} == wanted or not allow_train:
            return ck.to_model()
        log.warning("%s was trained with other settings; retraining", path)
    if not allow_train:
        raise MissingCheckpointError(f"no checkpoint at {path} (pass --train to create it)")
    if dataset is None:
        dataset = synthetic_dataset(setup.n_train, setup.train_res, setup.train_seed)
    t0 = time.perf_counter()
    result = train(setup.train, dataset, setup.arm_config(arm), callback=progress)
    log.info("trained %s in %.1f s", arm, time.perf_counter() - t0)
    save_checkpoint(result.checkpoint, path)
    return result.to_model()


def eval_schedule(model: CRM, items, schedule: RefinementSchedule, checkpoint: str = "") -> EvalReport:
    return evaluate(items, model, schedule, checkpoint=checkpoint)


# ------------------------------------------------------------------- presets

def stage_table(report: EvalReport) -> list[dict]:
    """One row per stage of a (default-schedule) report: ratio, IoU, mBA."""
    rows = [{"ratio": "coarse", "iou": report.mean_iou_coarse, "mba": report.mean_mba_coarse}]
    for r, i, m in report.stage_means():
        rows.append({"ratio": f"{r:g}", "iou": i, "mba": m})
    return rows


def schedule_sweep(model: CRM, items, ns=SWEEP_N) -> list[dict]:
    rows = []
    for n in ns:
        rep = evaluate(items, model, uniform_schedule(n))
        rows.append({"n": n, "iou": rep.mean_iou, "mba": rep.mean_mba, "seconds": sum(it.seconds for it in rep.items)})
    return rows


def ablation_rows(reports: dict[str, EvalReport]) -> list[dict]:
    rows = []
    for arm, rep in reports.items():
        cam_on, impl_on = ARMS[arm]
        rows.append({"arm": arm, "cam": int(cam_on), "implicit": int(impl_on), "iou": rep.mean_iou, "mba": rep.mean_mba})
    return rows


def write_rows(path, rows: list[dict], header: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0])
    lines = [f"# {h}" for h in header] + ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def plot_rows(path, rows: list[dict], x: str, title: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [str(r[x]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    ax.plot(xs, [100 * r["iou"] for r in rows], marker="o", label="IoU")
    ax.plot(xs, [100 * r["mba"] for r in rows], marker="s", label="mBA")
    ax.set_xlabel(x)
    ax.set_ylabel("score (%)")
    ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def run_reproduction(
    preset: str,
    out_dir,
    *,
    setup: DeskSetup = DeskSetup(),
    ckpt_dir=None,
    data_dir=None,
    allow_train: bool = False,
    progress: Optional[Callable[[str], None]] = None,
) -> list[Path]:
    """Run one preset and write ``<preset>.tsv`` and ``<preset>.png`` into ``out_dir``."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else out / "models"
    data_dir = Path(data_dir) if data_dir is not None else out / "heldout"
    say = progress or (lambda msg: None)

    arms = list(ARMS) if preset == "ablate-cam" else ["full"]
    missing = [a for a in arms if not (ckpt_dir / f"{a}.crm").exists()]
    if missing and not allow_train:
        raise MissingCheckpointError(f"missing checkpoints in {ckpt_dir}: {', '.join(missing)} (pass --train)")
    dataset = synthetic_dataset(setup.n_train, setup.train_res, setup.train_seed) if missing else None
    models = {}
    for arm in arms:
        say(f"model {arm}")
        models[arm] = get_model(setup, arm, ckpt_dir, allow_train=allow_train, dataset=dataset)
    say("held-out set")
    items = make_heldout(setup, data_dir)
    header = [
        f"preset\t{preset}",
        f"train\t{setup.n_train} x {setup.train_res}^2, {setup.train.total_steps} steps, patch {setup.train.patch_size}",
        f"test\t{setup.n_test} x {setup.test_res}^2, tau in [{setup.tau_range[0]:g}, {setup.tau_range[1]:g}]",
    ]
    if preset == "stage-table":
        rep = evaluate(items, models["full"], default_schedule())
        rows = stage_table(rep)
        x, title = "ratio", "per-stage scores"
    elif preset == "schedule-sweep":
        rows = schedule_sweep(models["full"], items)
        x, title = "n", "uniform schedule sweep"
    else:
        reports = {arm: evaluate(items, m, default_schedule()) for arm, m in models.items()}
        rows = ablation_rows(reports)
        x, title = "arm", "ablation"
    tsv = write_rows(out / f"{preset}.tsv", rows, header)
    png = plot_rows(out / f"{preset}.png", rows, x, title)
    return [tsv, png]
