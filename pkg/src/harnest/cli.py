"""Command line entry point: ``harnest {prepare,train,eval,ablate,sweep}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .datapipe import (
    ContainerError,
    DataError,
    DatasetRecipe,
    load_dataset,
    load_from_recipe,
    save_dataset,
)
from .evaluation import SWEEP_VALUES, emit_report, lambda_mmd_sweep, run_ablation_suite, run_loso
from .trainer import (
    DEFAULT_BATCH_SIZES,
    VARIANTS,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    run_variant,
    save_checkpoint,
    write_history_csv,
)

logger = logging.getLogger("harnest")

DATA_ROOT_ENV = "HARNEST_DATA_ROOT"
LOCK_NAME = ".harnest.lock"


class UsageError(Exception):
    """Bad arguments or configuration; exit code 2."""


class _StopRequested(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@contextlib.contextmanager
def run_manifest(path: Path, command: str, args: argparse.Namespace, extra: dict | None = None):
    """Write the manifest before work starts and rewrite it with the outcome."""
    manifest = {
        "command": command,
        "config_paths": {k: getattr(args, k, None) for k in ("train_config", "model_config")},
        "recipe": getattr(args, "recipe", None),
        "dataset": getattr(args, "dataset", None),
        "seed": getattr(args, "seed", None),
        "output": str(getattr(args, "out", "")),
        "version": __version__,
        "started": _now(),
        "status": "running",
    }
    manifest.update(extra or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2))
    try:
        yield manifest
        manifest["status"] = manifest.get("status_override", "completed")
    except BaseException as exc:
        manifest["status"] = "failed"
        manifest["error"] = repr(exc)
        raise
    finally:
        manifest.pop("status_override", None)
        manifest["finished"] = _now()
        path.write_text(json.dumps(manifest, indent=2))


@contextlib.contextmanager
def dir_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out_dir} is locked by another harnest command ({lock}); remove it if stale")
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _read_json(path, what: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {p} is not valid JSON: {exc}")


def _recipe_sidecar(dataset_path: Path) -> Path:
    return dataset_path.with_suffix(".recipe.json")


def _dataset_name(dataset_path: Path) -> str | None:
    side = _recipe_sidecar(dataset_path)
    if side.is_file():
        return json.loads(side.read_text()).get("name")
    return None


def _load_dataset(path) -> tuple:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"dataset file not found: {p}")
    return load_dataset(p), _dataset_name(p)


def _train_config(args, dataset_name: str | None) -> TrainConfig:
    raw = _read_json(args.train_config, "train config")
    if getattr(args, "variant", None):
        raw["variant"] = args.variant
    if args.seed is not None:
        raw["seed"] = args.seed
    if "batch_size" not in raw and dataset_name in DEFAULT_BATCH_SIZES:
        raw["batch_size"] = DEFAULT_BATCH_SIZES[dataset_name]
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}")


def _model_config(args) -> dict:
    raw = _read_json(args.model_config, "model config")
    from .nets import ModelConfig

    allowed = {f.name for f in dataclasses.fields(ModelConfig)} - {"n_c", "n_w", "n_a", "n_subjects_out"}
    extra = set(raw) - allowed
    if extra:
        raise UsageError(f"unknown model config fields: {sorted(extra)} (data sizes are inferred)")
    return raw


# --- commands ----------------------------------------------------------------

def cmd_prepare(args) -> int:
    try:
        recipe = DatasetRecipe.load(args.recipe)
    except FileNotFoundError:
        raise UsageError(f"recipe not found: {args.recipe}")
    except (DataError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid recipe {args.recipe}: {exc}")
    if recipe.name == "synthetic" and args.seed is not None:
        recipe.options["seed"] = args.seed
    root = args.raw_root or os.environ.get(DATA_ROOT_ENV)
    out = Path(args.out)
    with dir_lock(out.parent), run_manifest(out.with_suffix(".manifest.json"), "prepare", args):
        ds = load_from_recipe(recipe, root, jobs=args.jobs)
        save_dataset(ds, out)
        _recipe_sidecar(out).write_text(recipe.to_json())
        # re-read to verify the container before reporting success
        check = load_dataset(out)
        if check.n != ds.n:
            raise ContainerError(f"{out}: re-read window count {check.n} != written {ds.n}")
    hist = ", ".join(f"{s}:{c}" for s, c in ds.subject_histogram().items())
    print(f"n={ds.n} n_c={ds.n_c} n_w={ds.n_w} n_a={ds.n_a} subjects={len(ds.subject_ids)}")
    print(f"windows per subject: {hist}")
    return 0


def cmd_train(args) -> int:
    ds, name = _load_dataset(args.dataset)
    cfg = _train_config(args, name)
    arch = _model_config(args)
    out = Path(args.out)
    ckpt = out / "checkpoint"
    target = None
    if args.target_subject is not None:
        if args.target_subject not in ds.subject_ids:
            raise UsageError(f"target subject {args.target_subject} not in dataset {ds.subject_ids}")
        target = ds.for_subjects([args.target_subject])
        ds = ds.for_subjects([s for s in ds.subject_ids if s != args.target_subject])

    with dir_lock(out), run_manifest(out / "run_manifest.json", "train", args) as manifest:
        state = None
        if args.resume:
            if not (ckpt / "manifest.json").is_file():
                raise UsageError(f"--resume given but no checkpoint in {ckpt}")
            state = load_checkpoint(ckpt, ds, target)
            cfg = state.cfg
            logger.info("resuming at %s iteration %d (global %d)",
                        state.current_stage, state.iteration, state.global_iter)

        def on_iter(st):
            if args.checkpoint_every and st.global_iter % args.checkpoint_every == 0:
                save_checkpoint(st, ckpt)
            if args.stop_after is not None and st.global_iter >= args.stop_after:
                save_checkpoint(st, ckpt)
                raise _StopRequested()

        t0 = time.time()
        try:
            state = run_variant(cfg, ds, target, model_cfg=arch, state=state, callback=on_iter)
        except _StopRequested:
            manifest["status_override"] = "stopped"
            print(f"stopped after {args.stop_after} iterations; resume with --resume")
            return 1
        save_checkpoint(state, ckpt)
        write_history_csv(state.history, out / "loss_history.csv")
        manifest["networks"] = {r: f"checkpoint/{r}.npz" for r in sorted(state.nets)}
        manifest["final_losses"] = state.history[-1] if state.history else {}
    print(f"variant={state.variant} iterations={state.global_iter} "
          f"seconds={time.time() - t0:.1f} networks={','.join(sorted(state.nets))}")
    return 0


def _eval_common(args):
    ds, name = _load_dataset(args.dataset)
    cfg = _train_config(args, name)
    arch = _model_config(args)
    acc_only = args.acc_only or name == "mocapaci"
    return ds, cfg, arch, acc_only


def cmd_eval(args) -> int:
    ds, cfg, arch, acc_only = _eval_common(args)
    out = Path(args.out)
    with dir_lock(out), run_manifest(out / "run_manifest.json", "eval", args):
        report = run_loso(ds, cfg, arch, repeats=args.repeats, jobs=args.jobs, acc_only=acc_only)
        files = emit_report([report], out, plots=not args.no_plots)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, default=str))
    print((out / "summary.md").read_text())
    _print_files(files)
    return 0 if report.complete else 1


def cmd_ablate(args) -> int:
    ds, cfg, arch, acc_only = _eval_common(args)
    out = Path(args.out)
    with dir_lock(out), run_manifest(out / "run_manifest.json", "ablate", args):
        reports = run_ablation_suite(ds, cfg, arch, repeats=args.repeats, jobs=args.jobs, acc_only=acc_only)
        files = emit_report(reports, out, plots=not args.no_plots)
        (out / "reports.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, default=str))
    print((out / "summary.md").read_text())
    _print_files(files)
    return 0 if all(r.complete for r in reports) else 1


def cmd_sweep(args) -> int:
    ds, cfg, arch, acc_only = _eval_common(args)
    values = args.values or list(SWEEP_VALUES)
    out = Path(args.out)
    with dir_lock(out), run_manifest(out / "run_manifest.json", "sweep", args, {"values": values}):
        reports = lambda_mmd_sweep(ds, cfg, values, arch, repeats=args.repeats, jobs=args.jobs,
                                   acc_only=acc_only)
        files = emit_report(reports, out, plots=not args.no_plots)
        (out / "reports.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, default=str))
    print((out / "summary.md").read_text())
    _print_files(files)
    return 0 if all(r.complete for r in reports) else 1


def _print_files(files: dict) -> None:
    for k, v in files.items():
        print(f"{k}: {v}")


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="harnest", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True, train=True):
        if dataset:
            sp.add_argument("--dataset", required=True, help="windowed dataset container (.harw)")
        if train:
            sp.add_argument("--train-config", help="TrainConfig JSON")
            sp.add_argument("--model-config", help="architecture JSON (base_filters, conv_kernel, ...)")
            sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("prepare", help="raw files -> windowed dataset container")
    sp.add_argument("--recipe", required=True, help="DatasetRecipe JSON")
    sp.add_argument("--raw-root", help=f"raw data directory (default ${DATA_ROOT_ENV})")
    common(sp, dataset=False, train=False)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="run the staged training procedure once")
    common(sp)
    sp.add_argument("--target-subject", type=int,
                    help="hold this subject out and use its windows as unlabeled target data")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--stop-after", type=int, help="save a checkpoint and stop after this many iterations")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "leave-one-subject-out evaluation"),
                                 ("ablate", cmd_ablate, "all five ablation variants, paired folds"),
                                 ("sweep", cmd_sweep, "lambda_MMD sweep")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--repeats", type=int, default=2)
        sp.add_argument("--acc-only", action="store_true", help="report accuracy only")
        sp.add_argument("--no-plots", action="store_true")
        if name == "sweep":
            sp.add_argument("--values", type=float, nargs="+", help=f"default {list(SWEEP_VALUES)}")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, FileNotFoundError) else 1
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
