"""``cyclerdm`` command-line tool: train, infer, eval, degrade, selftest, make-oracle."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zlib
from pathlib import Path

import torch

from ..dataops import (
    DegradationSpec,
    TASK_PARAMS,
    load_png,
    make_paired_dataset,
    read_manifest,
    save_png,
    synthetic_image,
    from_model_range,
    to_model_range,
)
from ..errors import CycleRDMError, NumericalError, ParameterError
from ..guidance import TASKS, make_encoder, prompts_for_task
from ..metrics import evaluate
from ..pipeline import PipelineConfig, fit, init_state, mix_seed, oracle_state, restore
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig

log = logging.getLogger("cyclerdm")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad user input; reported with exit code 2."""


def _pngs(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise UsageError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise UsageError(f"config not found: {cfg_path}")
    run = RunConfig.load(cfg_path)
    base = cfg_path.parent
    manifest_path = run.resolve(run.train_manifest, base)
    if not manifest_path.is_file():
        raise UsageError(f"manifest not found: {manifest_path}")
    try:
        manifest = read_manifest(manifest_path)
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    ckpt_path = run.resolve(run.checkpoint, base)
    pcfg = run.pipeline()
    if args.resume:
        state = load_checkpoint(args.resume)
        if state.optimizer is None:
            raise UsageError(f"checkpoint {args.resume} holds no optimizer state and cannot be resumed")
        log.info("resumed from %s at step %d", args.resume, state.step)
    else:
        state = init_state(
            pcfg, seed=run.seed, learning_rate=run.learning_rate,
            denoiser=run.denoiser_spec(), stage3=run.stage3_spec(), fgm=run.fgm_spec(),
        )
    snapshot = run.to_dict()

    def checkpoint(st):
        save_checkpoint(ckpt_path, st, snapshot)
        log.info("checkpoint written to %s (step %d)", ckpt_path, st.step)

    loss_log = open(args.loss_log, "a", encoding="utf-8") if args.loss_log else None

    def report(step, rep):
        values = rep.as_floats()
        if loss_log is not None:
            loss_log.write(json.dumps({"step": step, **values}) + "\n")
        if step % 50 == 0:
            log.info("step %d %s", step, json.dumps({k: round(v, 5) for k, v in values.items()}))

    try:
        fit(
            manifest, state, pcfg, run.epochs, weights=run.weights(), batch_size=run.batch_size,
            patch_size=run.patch_size, encoder=make_encoder(run.encoder_backend), max_steps=run.max_steps,
            checkpoint_every=run.checkpoint_every, checkpoint_fn=checkpoint, on_step=report,
        )
    finally:
        if loss_log is not None:
            loss_log.close()
    print(f"trained to step {state.step}; checkpoint {ckpt_path}")
    return EXIT_OK


def _run_config_from_checkpoint(state) -> RunConfig | None:
    rc = state.meta.get("run_config")
    return RunConfig.from_dict(rc) if rc else None


def _pipeline_from_checkpoint(state) -> PipelineConfig:
    rc = _run_config_from_checkpoint(state)
    if rc is not None:
        return rc.pipeline()
    return PipelineConfig(T=state.schedule.T, stage3_t_max=min(50, state.schedule.T), sample_steps=min(10, state.schedule.T))


def cmd_infer(args) -> int:
    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}; valid tasks: {', '.join(TASKS)}")
    try:
        state = load_checkpoint(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc
    pcfg = _pipeline_from_checkpoint(state)
    rc = _run_config_from_checkpoint(state)
    pair = prompts_for_task(args.task, rc.registry() if rc is not None else None)
    inputs = _pngs(Path(args.input))
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        lq = to_model_range(load_png(path))[None]
        seed = mix_seed(args.seed, zlib.crc32(path.name.encode("utf-8")))
        out = restore(lq, state, pcfg, pair, seed=seed)
        save_png(from_model_range(out.HQ[0]), out_dir / path.name)
        if args.dump_stages:
            save_png(from_model_range(out.x1_0[0]), out_dir / "stages" / f"{path.stem}_x1.png")
            save_png(from_model_range(out.x2_0[0]), out_dir / "stages" / f"{path.stem}_x2.png")
    print(f"restored {len(inputs)} image(s) into {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    rows = []
    for p in _pngs(pred_dir):
        g = gt_dir / p.name
        if not g.is_file():
            raise UsageError(f"no ground truth for {p.name} in {gt_dir}")
        m = evaluate(load_png(p), load_png(g))
        rows.append({"image": p.name, "psnr": m.psnr, "ssim": m.ssim})
    if not rows:
        raise UsageError(f"no PNG files in {pred_dir}")
    mean_psnr = sum(r["psnr"] for r in rows) / len(rows)
    mean_ssim = sum(r["ssim"] for r in rows) / len(rows)
    width = max(len(r["image"]) for r in rows)
    print(f"{'image':<{width}}  {'PSNR':>8}  {'SSIM':>7}")
    for r in rows:
        print(f"{r['image']:<{width}}  {r['psnr']:8.3f}  {r['ssim']:7.4f}")
    print(f"{'mean':<{width}}  {mean_psnr:8.3f}  {mean_ssim:7.4f}")
    report = {"images": rows, "mean": {"psnr": mean_psnr, "ssim": mean_ssim}, "count": len(rows)}
    report_path = Path(args.report) if args.report else pred_dir / "eval.json"
    report_path.write_text(json.dumps(report, indent=2), encoding="utf-8")
    return EXIT_OK


def _parse_params(items) -> dict:
    params = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--param expects key=value, got {item!r}")
        params[key] = float(value)
    return params


def cmd_degrade(args) -> int:
    if args.task not in TASK_PARAMS:
        raise UsageError(f"unknown task {args.task!r}; valid tasks: {', '.join(TASKS)}")
    spec = DegradationSpec(args.task, _parse_params(args.param), seed=args.seed)
    if args.input:
        paths = _pngs(Path(args.input))
        gts = [load_png(p) for p in paths]
        names = [p.name for p in paths]
    elif args.synthetic:
        gts = [synthetic_image(args.size, mix_seed(args.seed, i)) for i in range(args.synthetic)]
        names = None
    else:
        raise UsageError("degrade needs --in DIR or --synthetic N")
    manifest = make_paired_dataset(args.out, gts, spec, prompts_for_task(args.task), names)
    print(f"wrote {len(gts)} pair(s) and {manifest}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from ..selftest import run_all

    passed, failed = run_all(verbose=True)
    print(f"selftest: {passed}/{passed + failed} passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_make_oracle(args) -> int:
    save_checkpoint(args.out, oracle_state(PipelineConfig()))
    print(f"oracle checkpoint written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyclerdm", description="Train, run and score the three-stage diffusion restorer.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.add_argument("--loss-log", help="append per-step losses as JSON lines to this file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="restore every PNG in a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-stages", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", help="JSON report path (default: PRED/eval.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("degrade", help="materialise LQ/GT pairs and a manifest")
    p.add_argument("--task", required=True)
    p.add_argument("--in", dest="input")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synthetic", type=int, help="generate N synthetic ground-truth images instead of --in")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--param", action="append", help="task parameter override, key=value")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("make-oracle", help="write an oracle checkpoint (clean input passes through exactly)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParameterError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (CycleRDMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
