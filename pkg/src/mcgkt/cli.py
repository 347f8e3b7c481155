"""Command-line front end: ``mcgkt <command> [flags]``.

Every command first prints its effective configuration as one JSON line.
Failures print one line ``error module=<m> code=<n>: <message>`` on stderr
and exit with 1 (usage/config), 2 (I/O or file format) or 3 (numeric).
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import gradcheck, metrics, rain
from .archive import WeightArchive
from .errors import ConfigError, DataIOError, MCGKTError, UsageError
from .model import ModelConfig, import_ekt, load_model, save_model
from .train import (ALL_COMBOS, TrainConfig, ablation_csv, build_model, history_csv,
                    resume, run_ablation, train)

log = logging.getLogger("mcgkt")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, width=100)


def _rain_flags(p):
    d = rain.RainConfig()
    p.add_argument("--mode", choices=rain.MODES, default=d.mode, help="streak style")
    p.add_argument("--density", type=float, default=d.density, help="streaks per megapixel")
    p.add_argument("--angle-min", type=float, default=d.angle_range[0], help="degrees from vertical")
    p.add_argument("--angle-max", type=float, default=d.angle_range[1], help="degrees from vertical")
    p.add_argument("--length-min", type=float, default=d.length_range[0], help="streak length, px")
    p.add_argument("--length-max", type=float, default=d.length_range[1], help="streak length, px")
    p.add_argument("--width-min", type=float, default=d.width_range[0], help="streak width, px")
    p.add_argument("--width-max", type=float, default=d.width_range[1], help="streak width, px")
    p.add_argument("--intensity-min", type=float, default=d.intensity_range[0], help="streak intensity")
    p.add_argument("--intensity-max", type=float, default=d.intensity_range[1], help="streak intensity")
    p.add_argument("--blur", type=float, default=d.blur, help="Gaussian sigma of the rain layer")


def _rain_config(a, seed) -> rain.RainConfig:
    return rain.RainConfig(
        density=a.density, angle_range=(a.angle_min, a.angle_max),
        length_range=(a.length_min, a.length_max), width_range=(a.width_min, a.width_max),
        intensity_range=(a.intensity_min, a.intensity_max), blur=a.blur, mode=a.mode, seed=seed)


def _model_flags(p):
    p.add_argument("--c0", type=int, default=8, help="base channel count")
    p.add_argument("--se-ratio", type=int, default=4, help="SE reduction ratio")
    p.add_argument("--ikt", action=argparse.BooleanOptionalAction, default=True, help="ConvLSTM fusion")
    p.add_argument("--mlcg", action=argparse.BooleanOptionalAction, default=True, help="SE context gating")
    p.add_argument("--skip-fusion", choices=("sum", "concat"), default="sum",
                   help="encoder/decoder fusion when IKT is off")
    p.add_argument("--output-mode", choices=("residual", "direct"), default="residual",
                   help="predict rainy+correction or the clean image directly")


def _train_flags(p):
    p.add_argument("--epochs", type=int, default=500, help="training epochs")
    p.add_argument("--steps", type=int, default=None, help="exact step budget (overrides --epochs)")
    p.add_argument("--lr", type=float, default=2e-4, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=4, help="patches per step")
    p.add_argument("--patch", type=int, default=64, help="patch size (multiple of 8)")
    p.add_argument("--seed", type=int, default=0, help="seed for init, shuffling and crops")
    p.add_argument("--log-every", type=int, default=50, help="print a step/loss line every N steps")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcgkt", description="Single-image deraining toolkit.", formatter_class=_formatter)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="build a synthetic paired dataset", formatter_class=_formatter)
    p.add_argument("--clean-dir", default=None, help="directory of clean PNGs (procedural scenes if omitted)")
    p.add_argument("--out-dir", required=True, help="output root; writes rainy/ and clean/")
    p.add_argument("--count", type=int, default=50, help="procedural scenes when --clean-dir is omitted")
    p.add_argument("--size", type=int, default=64, help="procedural scene size, px")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    _rain_flags(p)

    p = sub.add_parser("train", help="train a model", formatter_class=_formatter)
    p.add_argument("--data", required=True, help="dataset root with rainy/ and clean/")
    p.add_argument("--out", required=True, help="output model archive")
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--ekt", default=None, metavar="ARCHIVE", help="pretrained weight archive for EKT")
    p.add_argument("--checkpoint-interval", type=int, default=0, help="steps between checkpoints, 0 = off")
    p.add_argument("--checkpoint-dir", default=None, help="checkpoint directory; None means <out stem>_ckpt beside --out")
    p.add_argument("--history", default=None, help="write the step,loss CSV here")
    p.add_argument("--resume", default=None, metavar="CHECKPOINT", help="continue from a checkpoint; model and training flags come from the checkpoint")

    p = sub.add_parser("derain", help="run a model on a directory of PNGs", formatter_class=_formatter)
    p.add_argument("--model", required=True, help="model archive")
    p.add_argument("--in", dest="input", required=True, help="directory of rainy PNGs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--batch-size", type=int, default=1, help="images per forward pass")

    p = sub.add_parser("eval", help="PSNR/SSIM of derained vs clean PNGs", formatter_class=_formatter)
    p.add_argument("--derained", required=True, help="directory of derained PNGs")
    p.add_argument("--clean", required=True, help="directory of clean PNGs")
    p.add_argument("--csv", default=None, help="write name,psnr_db,ssim rows here")

    p = sub.add_parser("ablate", help="train the IKT/EKT/MLCG combinations", formatter_class=_formatter)
    p.add_argument("--data", default=None, help="training dataset root (synthetic if omitted)")
    p.add_argument("--eval-data", default=None, help="held-out dataset root (synthetic if omitted)")
    p.add_argument("--synthetic-train", type=int, default=50, help="synthetic training pairs")
    p.add_argument("--synthetic-eval", type=int, default=10, help="synthetic held-out pairs")
    p.add_argument("--size", type=int, default=64, help="synthetic image size, px")
    p.add_argument("--combos", default="all",
                   help="comma list of ikt/ekt/mlcg bit triples such as 000,101,111, or 'all'")
    p.add_argument("--csv", default=None, help="write the ablation table here")
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--ekt", default=None, metavar="ARCHIVE", help="pretrained weight archive for EKT rows")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=_formatter)
    p.add_argument("--instances", type=int, default=20, help="random instances per op")
    p.add_argument("--seed", type=int, default=0, help="suite seed")
    p.add_argument("--no-model", action="store_true", help="skip the end-to-end model check")

    p = sub.add_parser("import-weights", help="apply EKT weights to a saved model", formatter_class=_formatter)
    p.add_argument("--archive", required=True, help="pretrained weight archive")
    p.add_argument("--model", required=True, help="model archive to update")
    p.add_argument("--out", default=None, help="where to save (default: overwrite --model)")
    return parser


@contextmanager
def _cleanup_on_failure(*paths):
    """Remove outputs that did not exist before the command if it fails."""
    fresh = [Path(p) for p in paths if p is not None and not Path(p).exists()]
    try:
        yield
    except BaseException:
        for p in fresh:
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()
        raise


def _model_config(a) -> ModelConfig:
    return ModelConfig(base_channels=a.c0, se_ratio=a.se_ratio, enable_ikt=a.ikt,
                       enable_mlcg=a.mlcg, skip_fusion=a.skip_fusion, output_mode=a.output_mode)


def _train_config(a, **extra) -> TrainConfig:
    return TrainConfig(learning_rate=a.lr, batch_size=a.batch_size, epochs=a.epochs, steps=a.steps,
                       patch_size=a.patch, seed=a.seed, ikt=a.ikt, mlcg=a.mlcg, **extra)


def _step_logger(every):
    def on_step(step, loss):
        if every > 0 and (step + 1) % every == 0:
            print(f"step {step + 1} loss {loss:.6g}", flush=True)
    return on_step


def cmd_synth(a) -> int:
    out = Path(a.out_dir)
    with _cleanup_on_failure(out):
        base = _rain_config(a, a.seed)
        if a.clean_dir:
            srcs = sorted(Path(a.clean_dir).glob("*.png"))
            if not srcs:
                raise DataIOError(f"no PNG files in {a.clean_dir}")
            pairs = []
            for i, src in enumerate(srcs):
                seed = int(np.random.SeedSequence([a.seed, i]).generate_state(1)[0])
                cfg = rain.RainConfig(**{**base.to_dict(), "seed": seed})
                pairs.append((src.stem, rain.synthesize_rain(rain.load_image(src), cfg)))
        else:
            pairs = rain.make_synthetic_dataset(a.count, a.size, base, seed=a.seed)
        rain.write_dataset(out, pairs)
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_train(a) -> int:
    out = Path(a.out)
    ckdir = Path(a.checkpoint_dir) if a.checkpoint_dir else out.parent / (out.stem + "_ckpt")
    data = rain.load_dataset(a.data)
    with _cleanup_on_failure(out, a.history, ckdir):
        on_step = _step_logger(a.log_every)
        if a.resume:
            result = resume(a.resume, data, checkpoint_dir=ckdir, on_step=on_step)
        else:
            config = _train_config(a, ekt=a.ekt is not None, ekt_archive=a.ekt,
                                   checkpoint_interval=a.checkpoint_interval)
            model, report = build_model(_model_config(a), config)
            if report is not None:
                print(report.summary())
            result = train(model, data, config, checkpoint_dir=ckdir, on_step=on_step)
        save_model(result.model, out)
        if a.history:
            Path(a.history).write_text(history_csv(result.history), encoding="utf-8")
    final = result.history[-1] if result.history else float("nan")
    print(f"trained {len(result.history)} steps, final loss {final:.6g}; saved {out}")
    return EXIT_OK


def _pad_to(x: np.ndarray, m: int) -> np.ndarray:
    _, h, w = x.shape
    return np.pad(x, ((0, 0), (0, -h % m), (0, -w % m)), mode="edge")


def cmd_derain(a) -> int:
    model = load_model(a.model)
    src = Path(a.input)
    if not src.is_dir():
        raise DataIOError(f"not a directory: {src}")
    files = sorted(src.glob("*.png"))
    out = Path(a.out)
    with _cleanup_on_failure(out):
        out.mkdir(parents=True, exist_ok=True)
        m = model.config.size_multiple
        for f in files:
            img = rain.load_image(f)
            _, h, w = img.shape
            res = model.derain(_pad_to(img, m), batch_size=a.batch_size)[:, :h, :w]
            rain.save_image(res, out / f"{f.stem}.png")
    print(f"derained {len(files)} images into {out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    report = metrics.evaluate_dir(a.derained, a.clean)
    if a.csv:
        report.write_csv(a.csv)
    print(report.table())
    return EXIT_OK


def _parse_combos(text: str) -> list:
    if text == "all":
        return list(ALL_COMBOS)
    combos = []
    for tok in text.split(","):
        tok = tok.strip()
        if len(tok) != 3 or set(tok) - {"0", "1"}:
            raise UsageError(f"bad combo {tok!r}; expected three 0/1 digits for ikt,ekt,mlcg")
        combos.append(tuple(ch == "1" for ch in tok))
    return combos


def cmd_ablate(a) -> int:
    combos = _parse_combos(a.combos)
    rc = rain.RainConfig(seed=a.seed)
    train_set = (rain.load_dataset(a.data) if a.data else
                 rain.make_synthetic_dataset(a.synthetic_train, a.size, rc, seed=a.seed, prefix="train"))
    eval_set = (rain.load_dataset(a.eval_data) if a.eval_data else
                rain.make_synthetic_dataset(a.synthetic_eval, a.size, rc, seed=a.seed + 1, prefix="eval"))
    rows = run_ablation(train_set, eval_set, _model_config(a), _train_config(a), combos, a.ekt)
    text = ablation_csv(rows)
    if a.csv:
        Path(a.csv).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    results = gradcheck.run_suite(a.instances, a.seed, include_model=not a.no_model)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:20s} worst_rel_err={r.worst:.3e} checked={r.checked} "
              f"straddled={r.straddled} {status}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_import_weights(a) -> int:
    model = load_model(a.model)
    report = import_ekt(model, WeightArchive.load(a.archive))
    save_model(model, a.out or a.model)
    print(report.summary())
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "derain": cmd_derain, "eval": cmd_eval,
    "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "import-weights": cmd_import_weights,
}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, MCGKTError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERIC
    return EXIT_USAGE


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        effective = {k: v for k, v in sorted(vars(args).items())}
        print(json.dumps(effective, sort_keys=True, default=str), flush=True)
        return COMMANDS[args.command](args)
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    except (MCGKTError, OSError, ValueError, ArithmeticError) as exc:
        module = getattr(exc, "module", "io" if isinstance(exc, OSError) else "cli")
        msg = " ".join(str(exc).split())
        print(f"error module={module} code={_exit_code(exc)}: {msg}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
