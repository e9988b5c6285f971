"""Command-line pipeline: synthesis, training, embedding, evaluation.

Reports are single-line JSON on stdout; progress and diagnostics go to
stderr, so output can be piped. Exit codes: 0 success, 1 validation or
precondition failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import gradchecks
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    BagFormatError, ManifestError, PatchBag, StainId,
    load_manifest, read_bag_stream, write_bag,
)
from .evaluation import embed_cases, kshot_probe, retrieval_diagnostics, survival_cv
from .models import AdapterParams, FusionParams, MilParams
from .synthetic import SyntheticConfig, generate_to_dir
from .training import TrainConfig, train_stage1, train_stage2, write_loss_log


class CliError(Exception):
    """Reported to stderr; exits with status 1."""


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


@contextlib.contextmanager
def _dir_lock(directory: Path):
    """One writer per output directory, guarded by a lock file."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(
            f"output directory {directory} is locked by another run "
            f"(remove {lock} if stale)"
        ) from None
    try:
        yield
    finally:
        os.close(fd)
        lock.unlink(missing_ok=True)


def _synthetic_config(args) -> SyntheticConfig:
    cfg = SyntheticConfig.from_json(args.config) if args.config else SyntheticConfig()
    for name in (
        "n_cases", "n_patches", "dim_latent", "dim_embed",
        "noise_sigma", "seed", "censor_rate", "stain_offset",
    ):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.identity_maps:
        cfg.identity_maps = True
    cfg.validate()
    return cfg


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _load_adapter(path: Path) -> AdapterParams:
    return AdapterParams.from_state(load_checkpoint(path))


def _load_stage2(path: Path) -> tuple[FusionParams, MilParams]:
    tensors = load_checkpoint(path)
    return FusionParams.from_state(tensors), MilParams.from_state(tensors)


def _read_embeddings(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as f:
        bags = read_bag_stream(f)
    if not bags:
        raise CliError(f"no embeddings in {path}")
    ids = [b.slide_id for b in bags]
    return ids, np.stack([b.embeddings[0] for b in bags])


def _labels_for(ids: list[str], manifest: Path) -> np.ndarray:
    cases = load_manifest(manifest)
    if cases.labels is None:
        raise CliError(f"manifest {manifest} carries no labels")
    missing = [i for i in ids if i not in cases.labels]
    if missing:
        raise CliError(f"no label for embedded case {missing[0]}")
    return np.array([cases.labels[i] for i in ids])


def _survival_for(ids: list[str], manifest: Path):
    cases = load_manifest(manifest)
    if cases.survival is None:
        raise CliError(f"manifest {manifest} carries no survival annotations")
    missing = [i for i in ids if i not in cases.survival]
    if missing:
        raise CliError(f"no survival entry for embedded case {missing[0]}")
    times = np.array([cases.survival[i][0] for i in ids])
    events = np.array([cases.survival[i][1] for i in ids])
    return times, events


def _cmd_gen_synth(args) -> int:
    cfg = _synthetic_config(args)
    out = Path(args.out)
    with _dir_lock(out):
        manifest = generate_to_dir(cfg, out)
    _emit({"manifest": str(manifest), "cases": cfg.n_cases, "seed": cfg.seed})
    return 0


def _cmd_validate(args) -> int:
    cases = load_manifest(Path(args.manifest))
    _emit({
        "ok": True,
        "cases": len(cases),
        "labels": cases.labels is not None,
        "survival": cases.survival is not None,
    })
    return 0


def _cmd_train_stage1(args) -> int:
    cfg = _train_config(args)
    cases = load_manifest(Path(args.manifest))
    out = Path(args.out)
    with _dir_lock(out):
        result = train_stage1(cases, cfg, epochs=args.epochs, verbose=args.verbose)
        ckpt = out / "adapter.ckpt"
        save_checkpoint(ckpt, result.adapter.state_dict())
        write_loss_log(out / "stage1_log.jsonl", result.log)
    _emit({
        "checkpoint": str(ckpt),
        "epochs": len(result.epoch_mean_loss),
        "first_epoch_loss": result.epoch_mean_loss[0] if result.epoch_mean_loss else None,
        "final_epoch_loss": result.epoch_mean_loss[-1] if result.epoch_mean_loss else None,
    })
    return 0


def _cmd_train_stage2(args) -> int:
    cfg = _train_config(args)
    cases = load_manifest(Path(args.manifest))
    adapter = _load_adapter(Path(args.adapter))
    out = Path(args.out)
    with _dir_lock(out):
        result = train_stage2(cases, adapter, cfg, epochs=args.epochs,
                              verbose=args.verbose)
        ckpt = out / "stage2.ckpt"
        save_checkpoint(
            ckpt, {**result.fusion.state_dict(), **result.mil.state_dict()}
        )
        write_loss_log(out / "stage2_log.jsonl", result.log)
    _emit({
        "checkpoint": str(ckpt),
        "epochs": len(result.epoch_mean_loss),
        "first_epoch_loss": result.epoch_mean_loss[0] if result.epoch_mean_loss else None,
        "final_epoch_loss": result.epoch_mean_loss[-1] if result.epoch_mean_loss else None,
    })
    return 0


def _cmd_embed(args) -> int:
    cases = load_manifest(Path(args.manifest))
    adapter = _load_adapter(Path(args.adapter))
    _, mil = _load_stage2(Path(args.mil))
    embeddings = embed_cases(cases, adapter, mil)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with _dir_lock(out.parent):
        with open(out, "wb") as f:
            for emb in embeddings:
                bag = PatchBag(
                    slide_id=emb.case_id,
                    stain=StainId.HE,
                    coords=np.zeros((1, 2), dtype=np.int64),
                    embeddings=emb.vector[None, :],
                )
                write_bag(bag, f)
    _emit({"embeddings": str(out), "cases": len(embeddings)})
    return 0


def _parse_seeds(spec: str) -> list[int]:
    return [int(s) for s in spec.split(",") if s.strip() != ""]


def _cmd_eval_kshot(args) -> int:
    ids, vectors = _read_embeddings(Path(args.embeddings))
    labels = _labels_for(ids, Path(args.manifest))
    seeds = _parse_seeds(args.seeds)
    report = kshot_probe(vectors, labels, args.k, seeds)
    print(report.to_json())
    return 0


def _cmd_eval_survival(args) -> int:
    ids, vectors = _read_embeddings(Path(args.embeddings))
    times, events = _survival_for(ids, Path(args.manifest))
    report = survival_cv(vectors, times, events, folds=args.folds, seed=args.seed)
    print(report.to_json())
    return 0


def _cmd_retrieval(args) -> int:
    cases = load_manifest(Path(args.manifest))
    adapter = _load_adapter(Path(args.adapter))
    fusion = mil = None
    if args.stage2:
        fusion, mil = _load_stage2(Path(args.stage2))
        if args.he_only:
            fusion = None
    report = retrieval_diagnostics(cases, adapter, mil=mil, fusion=fusion)
    _emit(report)
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradchecks.run_all(trials=args.trials, seed=args.seed)
    doc = {name: err for name, err in results.items()}
    failed = {
        name: err for name, err in results.items()
        if err >= gradchecks.TOLERANCES[name]
    }
    doc["ok"] = not failed
    _emit(doc)
    if failed:
        _info(f"gradcheck failures: {failed}")
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stainalign",
        description="Cross-stain contrastive pretraining pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic aligned dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="SyntheticConfig JSON; flags override")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-cases", dest="n_cases", type=int)
    p.add_argument("--n-patches", dest="n_patches", type=int)
    p.add_argument("--dim-latent", dest="dim_latent", type=int)
    p.add_argument("--dim-embed", dest="dim_embed", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--censor-rate", dest="censor_rate", type=float)
    p.add_argument("--stain-offset", dest="stain_offset", type=float)
    p.add_argument("--identity-maps", dest="identity_maps", action="store_true")
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("validate", help="check manifest and alignment invariants")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_validate)

    for stage in (1, 2):
        p = sub.add_parser(f"train-stage{stage}",
                           help=f"run training stage {stage}")
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True, help="checkpoint/log directory")
        p.add_argument("--config", help="TrainConfig JSON; flags override")
        p.add_argument("--epochs", type=int, help="override config epochs")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--verbose", action="store_true")
        if stage == 2:
            p.add_argument("--adapter", required=True,
                           help="stage-1 adapter checkpoint")
            p.set_defaults(func=_cmd_train_stage2)
        else:
            p.set_defaults(func=_cmd_train_stage1)

    p = sub.add_parser("embed", help="HE-only slide embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--mil", required=True, help="stage-2 checkpoint")
    p.add_argument("--out", required=True, help="output embeddings file")
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("eval-kshot", help="k-shot linear-probe AUC")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True, help="manifest carrying labels")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9",
                   help="comma-separated probe seeds")
    p.set_defaults(func=_cmd_eval_kshot)

    p = sub.add_parser("eval-survival", help="cross-validated C-index")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True,
                   help="manifest carrying survival annotations")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval_survival)

    p = sub.add_parser("retrieval", help="cross-stain retrieval diagnostics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--stage2", help="stage-2 checkpoint for slide-level metrics")
    p.add_argument("--he-only", dest="he_only", action="store_true",
                   help="use the inference path for the HE side")
    p.set_defaults(func=_cmd_retrieval)

    p = sub.add_parser("gradcheck", help="run all finite-difference oracles")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ManifestError, BagFormatError, CheckpointError,
            FloatingPointError, ValueError, OSError) as exc:
        _info(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
