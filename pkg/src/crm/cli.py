"""Command-line front end.

Settings resolve as flag > config file > default. Config files are flat
``key = value`` lines with ``#`` comments; unknown keys are rejected. The
seed falls back to the ``CRM_SEED`` environment variable when neither a flag
nor the file sets it.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------- config files

def _parse_bool(s: str) -> bool:
    t = str(s).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s) -> tuple[int, ...]:
    if isinstance(s, (list, tuple)):
        return tuple(int(x) for x in s)
    return tuple(int(x) for x in str(s).split(",") if x.strip())


def _float_list(s) -> tuple[float, ...]:
    if isinstance(s, (list, tuple)):
        return tuple(float(x) for x in s)
    return tuple(float(x) for x in str(s).split(",") if x.strip())


# key -> (parser, default); every key is also a --flag (underscores become dashes)
TRAIN_KEYS: dict[str, tuple[Callable, object]] = {
    "seed": (int, None),
    "patch_size": (int, 64),
    "total_steps": (int, 3000),
    "lr": (float, 2.25e-4),
    "lr_decay_steps": (_int_list, None),
    "batch_size": (int, 8),
    "loss_weights": (_float_list, (1.0, 0.5, 0.5, 5.0)),
    "checkpoint_every": (int, 500),
    "tau_min": (float, 0.8),
    "tau_max": (float, 1.0),
    "base_channels": (int, 32),
    "latent_channels": (int, 64),
    "output_stride": (int, 4),
    "depth": (int, 2),
    "global_context": (_parse_bool, True),
    "hidden": (_int_list, (32, 32, 32, 32)),
    "use_cam": (_parse_bool, True),
    "use_implicit": (_parse_bool, True),
}


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` pairs; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value, got {raw.strip()!r}")
        k, v = line.split("=", 1)
        k = k.strip().replace("-", "_")
        if not k:
            raise UsageError(f"{path}:{n}: empty key")
        out[k] = v.strip()
    return out


def resolve_settings(
    keys: dict[str, tuple[Callable, object]],
    file_values: Optional[dict[str, str]],
    flag_values: dict[str, object],
) -> dict[str, object]:
    """Merge defaults, config file and flags (later wins); unknown file keys are an error."""
    file_values = file_values or {}
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for k, (parse, default) in keys.items():
        val = default
        if k in file_values:
            try:
                val = parse(file_values[k])
            except ValueError as exc:
                raise UsageError(f"bad value for {k}: {exc}") from None
        if flag_values.get(k) is not None:
            val = flag_values[k]
        out[k] = val
    return out


def resolve_seed(flag_seed: Optional[int], file_seed=None) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    if file_seed is not None:
        return int(file_seed)
    env = os.environ.get("CRM_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"CRM_SEED must be an integer, got {env!r}") from None
    return 0


def _key_flags(parser: argparse.ArgumentParser, keys: dict[str, tuple[Callable, object]], skip=("seed",)) -> None:
    def wrap(fn):
        def parse(s):
            try:
                return fn(s)
            except ValueError as exc:
                raise argparse.ArgumentTypeError(str(exc)) from None
        return parse

    for k, (parse, default) in keys.items():
        if k in skip:
            continue
        parser.add_argument(f"--{k.replace('_', '-')}", dest=k, type=wrap(parse), default=None,
                            help=f"(default: {default})")


# ------------------------------------------------------------------ commands

def _schedule(text: str):
    from .inference import parse_schedule
    from .diffcore import PreconditionError

    try:
        return parse_schedule(text)
    except PreconditionError as exc:
        raise UsageError(f"--schedule: {exc}") from None


def cmd_synth(a) -> int:
    from .data import write_synthetic_corpus

    if a.n < 1 or a.res < 16:
        raise UsageError("--n must be >= 1 and --res >= 16")
    seed = resolve_seed(a.seed)
    items = write_synthetic_corpus(a.out, a.n, a.res, seed=seed)
    print(f"wrote {len(items)} samples to {a.out}")
    return EXIT_OK


def cmd_perturb(a) -> int:
    from .data import load_corpus, read_mask_png, write_mask_png
    from .training import perturb_mask

    if not 0.0 <= a.tau_min <= a.tau_max <= 1.0:
        raise UsageError("need 0 <= --tau-min <= --tau-max <= 1")
    seed = resolve_seed(a.seed)
    items = load_corpus(a.corpus)
    done = 0
    for k, it in enumerate(items):
        if it.coarse is not None and not a.overwrite:
            continue
        rng = np.random.default_rng([seed, k])
        tau = float(rng.uniform(a.tau_min, a.tau_max))
        gt = read_mask_png(it.gt)
        coarse = perturb_mask(gt, tau, int(rng.integers(2**31)))
        write_mask_png(coarse, Path(a.corpus) / f"{it.stem}.coarse.png")
        done += 1
    load_corpus(a.corpus)
    print(f"perturbed {done} masks in {a.corpus}")
    return EXIT_OK


def _train_settings(a) -> dict:
    file_values = read_config_file(a.config) if a.config else None
    flags = {k: getattr(a, k, None) for k in TRAIN_KEYS}
    flags["seed"] = a.seed
    s = resolve_settings(TRAIN_KEYS, file_values, flags)
    s["seed"] = resolve_seed(a.seed, s["seed"])
    return s


def _configs_from_settings(s: dict):
    from .decoder import CRMConfig
    from .encoder import EncoderConfig
    from .training import TrainConfig

    try:
        enc = EncoderConfig(s["base_channels"], s["latent_channels"], s["output_stride"], s["depth"], s["global_context"])
        model = CRMConfig(enc, tuple(s["hidden"]), s["use_cam"], s["use_implicit"])
        model.mlp  # validates the hidden widths
        tcfg = TrainConfig(
            patch_size=s["patch_size"],
            total_steps=s["total_steps"],
            lr=s["lr"],
            lr_decay_steps=s["lr_decay_steps"],
            batch_size=s["batch_size"],
            loss_weights=tuple(s["loss_weights"]),
            seed=s["seed"],
            checkpoint_every=s["checkpoint_every"],
            tau_range=(s["tau_min"], s["tau_max"]),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training settings: {exc}") from None
    return tcfg, model


def cmd_train(a) -> int:
    from .data import load_corpus
    from .training import corpus_dataset, train

    tcfg, mcfg = _configs_from_settings(_train_settings(a))
    ds = corpus_dataset(load_corpus(a.corpus))
    t0 = time.perf_counter()

    def cb(step, value, terms):
        if a.log_every and (step % a.log_every == 0 or step + 1 == tcfg.total_steps):
            print(f"step {step}\tloss {value:.6f}\t{time.perf_counter() - t0:.1f}s", file=sys.stderr)

    train(tcfg, ds, mcfg, out_dir=a.out, callback=cb)
    print(f"wrote {Path(a.out) / 'final.crm'}")
    return EXIT_OK


def cmd_refine(a) -> int:
    from .data import read_image_png, read_mask_png, write_mask_png
    from .inference import binarize, refine_multires
    from .training import load_checkpoint

    sched = _schedule(a.schedule)
    model = load_checkpoint(a.ckpt).to_model()
    img = read_image_png(a.image)
    mask = read_mask_png(a.mask)
    if mask.shape[1:] != img.shape[1:]:
        raise UsageError(f"mask {mask.shape[1:]} and image {img.shape[1:]} differ in size")
    soft = refine_multires(img, mask, sched, model, chunk_pixels=a.chunk_pixels, trace_dir=a.trace_dir)
    write_mask_png(binarize(soft, a.threshold) if a.binary else soft, a.out)
    print(f"wrote {a.out}")
    return EXIT_OK


def _ckpt_identity(path) -> str:
    import hashlib

    return f"{Path(path).name} sha256={hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]}"


def cmd_eval(a) -> int:
    from .data import load_corpus
    from .metrics import evaluate
    from .training import load_checkpoint

    sched = _schedule(a.schedule)
    model = load_checkpoint(a.ckpt).to_model()
    items = load_corpus(a.corpus)
    rep = evaluate(items, model, sched, chunk_pixels=a.chunk_pixels, checkpoint=_ckpt_identity(a.ckpt))
    rep.write_tsv(a.report)
    print(f"IoU {rep.mean_iou_coarse:.4f} -> {rep.mean_iou:.4f}\tmBA {rep.mean_mba_coarse:.4f} -> {rep.mean_mba:.4f}"
          f"\t({len(rep.items)} items, {len(rep.skipped)} skipped)")
    return EXIT_OK


def cmd_bench(a) -> int:
    from .decoder import CRM
    from .inference import refine_stage, scaled_size, stage_macs
    from .training import desk_model_config, load_checkpoint

    sched = _schedule(a.schedule).for_shape(a.res, a.res)
    if a.ckpt:
        model = load_checkpoint(a.ckpt).to_model()
    else:
        model = CRM.init(desk_model_config(), seed=resolve_seed(a.seed))
    rng = np.random.default_rng(resolve_seed(a.seed))
    img = rng.random((3, a.res, a.res), dtype=np.float32)
    mask = (rng.random((1, a.res, a.res)) > 0.5).astype(np.float32)
    print("stage\tratio\tinput\tseconds\tgmacs")
    total_s, total_m = 0.0, 0
    from .diffcore import no_grad

    with no_grad():
        for i, r in enumerate(sched.ratios):
            side = scaled_size(a.res, r)
            best = float("inf")
            for _ in range(a.repeats):
                t0 = time.perf_counter()
                out = refine_stage(img, mask, r, model, a.chunk_pixels)
                best = min(best, time.perf_counter() - t0)
            mask = out
            macs = stage_macs(model.config, (side, side), (a.res, a.res))
            total_s += best
            total_m += macs
            print(f"{i}\t{r:g}\t{side}x{side}\t{best:.3f}\t{macs / 1e9:.3f}")
    print(f"total\t-\t-\t{total_s:.3f}\t{total_m / 1e9:.3f}")
    return EXIT_OK


def cmd_reproduce(a) -> int:
    from .reproduce import DeskSetup, run_reproduction
    from .training import desk_train_config

    seed = resolve_seed(a.seed)
    setup = DeskSetup(
        n_train=a.n_train,
        train_res=a.train_res,
        n_test=a.n_test,
        test_res=a.test_res,
        train=desk_train_config(total_steps=a.steps, seed=seed),
    )
    paths = run_reproduction(
        a.preset, a.out, setup=setup, ckpt_dir=a.ckpt_dir, data_dir=a.data_dir, allow_train=a.train,
        progress=lambda m: print(m, file=sys.stderr),
    )
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


# ------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crm", description="Continuous mask refinement: data, training, refinement and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=None, help="random seed (falls back to $CRM_SEED, then 0)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "render a synthetic image/gt corpus")
    sp.add_argument("--n", type=int, required=True, help="number of samples")
    sp.add_argument("--res", type=int, required=True, help="side length in pixels")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("perturb", cmd_perturb, "write perturbed coarse masks next to the gt masks of a corpus")
    sp.add_argument("--corpus", required=True, help="corpus directory")
    sp.add_argument("--tau-min", type=float, default=0.8, help="lowest IoU threshold (default: 0.8)")
    sp.add_argument("--tau-max", type=float, default=1.0, help="highest IoU threshold (default: 1.0)")
    sp.add_argument("--overwrite", action="store_true", help="replace existing coarse masks")

    sp = add("train", cmd_train, "train a refinement model on a corpus")
    sp.add_argument("--corpus", required=True, help="corpus directory")
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("--out", required=True, help="output directory for checkpoints and loss log")
    sp.add_argument("--log-every", type=int, default=100, help="print the loss every N steps (0 = never)")
    _key_flags(sp, TRAIN_KEYS)

    sp = add("refine", cmd_refine, "refine one mask")
    sp.add_argument("--image", required=True, help="RGB image PNG")
    sp.add_argument("--mask", required=True, help="coarse mask PNG")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--schedule", default="default", help="ratios 'a,b,...,1.0', 'uniform:N' or 'default'")
    sp.add_argument("--out", required=True, help="output mask PNG")
    sp.add_argument("--trace-dir", help="write one PNG per stage here")
    sp.add_argument("--binary", action="store_true", help="write a thresholded mask instead of the soft one")
    sp.add_argument("--threshold", type=float, default=0.5, help="threshold for --binary (default: 0.5)")
    sp.add_argument("--chunk-pixels", type=int, default=None, help="decode in chunks of about this many pixels")

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a corpus with coarse masks")
    sp.add_argument("--corpus", required=True, help="corpus directory")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--schedule", default="default", help="ratios 'a,b,...,1.0', 'uniform:N' or 'default'")
    sp.add_argument("--report", required=True, help="output TSV report")
    sp.add_argument("--chunk-pixels", type=int, default=None, help="decode in chunks of about this many pixels")

    sp = add("bench", cmd_bench, "time each refinement stage and estimate multiply-accumulates")
    sp.add_argument("--ckpt", help="checkpoint file (default: randomly initialized desk model)")
    sp.add_argument("--res", type=int, default=512, help="square input side (default: 512)")
    sp.add_argument("--schedule", default="default", help="ratios 'a,b,...,1.0', 'uniform:N' or 'default'")
    sp.add_argument("--repeats", type=int, default=1, help="timing repeats per stage; the best is kept")
    sp.add_argument("--chunk-pixels", type=int, default=None, help="decode in chunks of about this many pixels")

    sp = add("reproduce", cmd_reproduce, "run a desk-scale experiment preset")
    sp.add_argument("--preset", required=True, choices=["ablate-cam", "schedule-sweep", "stage-table"])
    sp.add_argument("--out", required=True, help="output directory for TSV and PNG")
    sp.add_argument("--ckpt-dir", help="directory of <arm>.crm checkpoints (default: OUT/models)")
    sp.add_argument("--data-dir", help="held-out corpus directory (default: OUT/heldout)")
    sp.add_argument("--train", action="store_true", help="train missing checkpoints")
    sp.add_argument("--n-train", type=int, default=2000, help="training samples (default: 2000)")
    sp.add_argument("--train-res", type=int, default=128, help="training resolution (default: 128)")
    sp.add_argument("--n-test", type=int, default=200, help="held-out samples (default: 200)")
    sp.add_argument("--test-res", type=int, default=512, help="held-out resolution (default: 512)")
    sp.add_argument("--steps", type=int, default=3000, help="training steps (default: 3000)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .data import ChannelCountError, CorpusError, NotPNGError
    from .training import CheckpointError, TrainingAborted

    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        return a.func(a)
    except UsageError as exc:
        print(f"crm {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"crm {a.command}: training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"crm {a.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, NotPNGError, ChannelCountError, CheckpointError, CorpusError) as exc:
        print(f"crm {a.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"crm {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
