"""``caet-swin`` command line.

Exit codes: 0 ok, 2 usage/config, 3 I/O or container format, 4 missing
upstream checkpoint, 5 training divergence, 6 failed verification.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .errors import FormatError, MissingDependency, PhaseError, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MISSING, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4, 5, 6
TRAIN_PHASES = ("cae-pretrain", "cae-finetune", "caet", "swin", "fusion", "all")
CHECKPOINTS = {"cae-pretrain": "cae_pretrain.ckpt", "cae-finetune": "cae.ckpt", "caet": "caet.ckpt",
               "swin": "swin.ckpt", "fusion": "fusion.ckpt"}
REQUIRES = {"cae-pretrain": (), "cae-finetune": ("cae-pretrain",), "caet": ("cae-finetune",), "swin": (),
            "fusion": ("cae-finetune", "caet", "swin")}


class JsonlLog:
    """Append-only JSON-lines sink; adds a wall-clock timestamp to every record."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = path.open("a")

    def __call__(self, rec: dict) -> None:
        rec = dict(rec)
        rec.setdefault("metric", None)
        rec["timestamp"] = time.time()
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    if data:
        p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--plan", choices=("full", "scaled"), help="overrides the config dimension plan")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent folds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caet-swin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="write a synthetic two-class dataset")
    p.add_argument("--n", type=int, required=True, help="samples per class")
    p.add_argument("--sep", type=float, required=True, help="class separability in [0, 1]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="run one training phase (or all of them)")
    p.add_argument("--phase", choices=TRAIN_PHASES, required=True)
    _common(p)

    p = sub.add_parser("crossval", help="stratified k-fold evaluation of every variant")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--block", action="append", help="restrict to the named block (repeatable)")
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    from .synthetic import generate_synthetic_dataset

    if args.n < 1 or not 0 <= args.sep <= 1:
        print("caet-swin synth-gen: --n must be >= 1 and --sep in [0, 1]", file=sys.stderr)
        return EXIT_USAGE
    generate_synthetic_dataset(args.n, args.sep, args.seed, args.out)
    print(args.out / "manifest.json")
    return EXIT_OK


def _config(args) -> RunConfig:
    return load_config(args.config, seed=args.seed, plan=args.plan)


def _dataset(args, cfg: RunConfig):
    from .data import load_manifest, prepare_dataset

    return prepare_dataset(load_manifest(args.data), cfg.model_plan())


def _save(out: Path, phase: str, tensors: dict, kind: str, cfg: RunConfig, **meta) -> None:
    from .training.checkpoint import save_checkpoint

    save_checkpoint(out / CHECKPOINTS[phase], tensors, kind, dict(meta, plan=cfg.plan, seed=cfg.seed, phase=phase))


def _load(out: Path, phase: str, cfg: RunConfig) -> tuple[dict, dict]:
    from .training.checkpoint import load_checkpoint

    path = out / CHECKPOINTS[phase]
    if not path.is_file():
        raise MissingDependency(f"{path} is missing; run `train --phase {phase}` first")
    _, tensors, meta = load_checkpoint(path)
    if meta.get("plan") != cfg.plan:
        raise ConfigError(f"{path} was trained with plan {meta.get('plan')!r}, not {cfg.plan!r}")
    return tensors, meta


def _prefixed(prefix: str, state: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def _unprefixed(prefix: str, tensors: dict) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def _run_phase(phase: str, data, cfg: RunConfig, out: Path, log) -> None:
    from .cae import CAE
    from .caet import CAETPath
    from .fusion import CAETSWinModel
    from .swin import SwinPath
    from .training import schedule as S

    plan, seed = cfg.model_plan(), cfg.seed
    idx = np.arange(len(data))
    rng = np.random.default_rng(0)  # shapes only; every tensor is overwritten from a checkpoint

    def load_cae(ph):
        cae = CAE(plan.cae, rng)
        cae.load_state_dict(_load(out, ph, cfg)[0])
        return cae

    def load_caet():
        tensors, meta = _load(out, "caet", cfg)
        path = CAETPath(plan.caet, rng, meta["aggregation"])
        path.load_state_dict(_unprefixed("path", tensors))
        return path

    if phase == "cae-pretrain":
        cae = S.train_cae_pretrain(data.cae_slices(), cfg, seed, log)
        _save(out, phase, cae.state_dict(), "cae", cfg)
    elif phase == "cae-finetune":
        cae = S.train_cae_finetune(load_cae("cae-pretrain"), data.cae_slices(), cfg, seed, log)
        _save(out, phase, cae.state_dict(), "cae", cfg)
    elif phase == "caet":
        cae = load_cae("cae-finetune")
        feats, valid = S.caet_inputs(cae.encoder, data.caet, plan.caet.max_slices)
        path, head = S.train_caet(feats, valid, data.labels, idx, cfg, seed, log)
        _save(out, phase, {**_prefixed("path", path.state_dict()), **_prefixed("head", head.state_dict())},
              "caet", cfg, aggregation=path.aggregation)
    elif phase == "swin":
        path, head = S.train_swin(data.swin, data.labels, idx, cfg, seed, log)
        _save(out, phase, {**_prefixed("path", path.state_dict()), **_prefixed("head", head.state_dict())},
              "swin", cfg)
    elif phase == "fusion":
        cae, caet = load_cae("cae-finetune"), load_caet()
        swin = SwinPath(plan.swin, rng)
        swin.load_state_dict(_unprefixed("path", _load(out, "swin", cfg)[0]))
        feats, valid = S.caet_inputs(cae.encoder, data.caet, plan.caet.max_slices)
        t = S.caet_outputs(caet, feats, valid)
        s = S.swin_outputs(swin, data.swin)
        head = S.train_fusion(t, s, data.labels, idx, cfg, seed, log)
        model = CAETSWinModel.assemble(plan, cae.encoder, caet, swin, head)
        _save(out, phase, model.state_dict(), "caet-swin", cfg, aggregation=caet.aggregation)
    else:  # pragma: no cover - argparse restricts the choices
        raise ValueError(phase)


def cmd_train(args) -> int:
    cfg = _config(args)
    phases = ("cae-pretrain", "cae-finetune", "caet", "swin", "fusion") if args.phase == "all" else (args.phase,)
    # Check dependencies before spending time on data loading.
    if args.phase != "all":
        for dep in REQUIRES[args.phase]:
            if not (args.out / CHECKPOINTS[dep]).is_file():
                raise MissingDependency(f"{args.out / CHECKPOINTS[dep]} is missing; run `train --phase {dep}` first")
    data = _dataset(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    log = JsonlLog(args.out / "train.log")
    try:
        for phase in phases:
            _run_phase(phase, data, cfg, args.out, log)
    finally:
        log.close()
    if args.phase == "all":
        (args.out / CHECKPOINTS["cae-pretrain"]).unlink(missing_ok=True)
    for phase in phases:
        path = args.out / CHECKPOINTS[phase]
        if path.exists():
            print(path)
    return EXIT_OK


def cmd_crossval(args) -> int:
    from .training.crossval import crossval, folds_csv, metrics_json

    cfg = _config(args)
    data = _dataset(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    log = JsonlLog(args.out / "crossval.log")
    try:
        report = crossval(data, cfg, log, jobs=max(args.jobs, 1))
    finally:
        log.close()
    (args.out / "metrics.json").write_text(metrics_json(report))
    (args.out / "folds.csv").write_text(folds_csv(report))
    for name in sorted(report["variants"]):
        v = report["variants"][name]
        lo, hi = v["ci95"]
        print(f"{name:14s} acc {v['accuracy']:6.2f} [{lo:6.2f}, {hi:6.2f}]  "
              f"sens {v['sensitivity']:6.2f}  spec {v['specificity']:6.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    try:
        results = run_suite(args.seed, args.block)
    except ValueError as exc:
        print(f"caet-swin gradcheck: {exc}", file=sys.stderr)
        return EXIT_USAGE
    failed = []
    for name, err, tol in results:
        ok = err < tol
        print(f"{name:14s} max rel err {err:.3e}  (tol {tol:.0e})  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {"synth-gen": cmd_synth_gen, "train": cmd_train, "crossval": cmd_crossval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"caet-swin: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingDependency as exc:
        print(f"caet-swin: missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as exc:
        print(f"caet-swin: training diverged in phase {exc.phase}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PhaseError as exc:
        if isinstance(exc.__cause__, (OSError, FormatError)):
            print(f"caet-swin: I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"caet-swin: {exc}", file=sys.stderr)
        return 1
    except (OSError, FormatError) as exc:
        print(f"caet-swin: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
