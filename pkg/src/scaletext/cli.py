"""Command-line front end.

Subcommands: generate, train, eval, ablate, gradcheck, visualize. All flags
are long-form. Precedence: command-line flags > `--config` file (key=value
lines, keys are flag names without the dashes) > built-in defaults.

Exit codes: 0 success, 2 input/usage error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional, Sequence

import numpy as np

from .autodiff import DimensionError, NumericsError, resize_plane
from .decoder import Charset, InputError, Lexicon
from .model import Recognizer
from .pgm import read_pgm, write_pgm, write_ppm
from .synth import GenSpec, generate_dataset, load_dataset, save_dataset
from .training import (AblationConfig, TrainConfig, build_model, evaluate,
                       run_ablation, train)
from . import report as rpt


def _parse_lengths(text: str) -> dict[int, float]:
    out = {}
    for part in text.split(","):
        n, _, p = part.partition(":")
        out[int(n)] = float(p)
    return out


def _parse_scales(text: str) -> tuple[tuple[int, int], ...]:
    scales = []
    for part in text.split(","):
        w, _, h = part.lower().partition("x")
        scales.append((int(w), int(h)))
    return tuple(scales)


def _parse_multiplier(text: str) -> float:
    if "/" in text:
        num, den = text.split("/")
        return float(num) / float(den)
    return float(text)


def _parse_pair(text: str) -> tuple[float, float]:
    lo, _, hi = text.partition(",")
    return (float(lo), float(hi))


def _charset(text: str) -> Charset:
    if text == "digits":
        return Charset.digits()
    if text == "alnum":
        return Charset.full()
    return Charset(text)


def _load_config(path: str) -> dict[str, str]:
    cfg = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InputError(f"bad config line (expected key=value): {line!r}")
            cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


class _Sub:
    """add_argument wrapper that lets a config file supply defaults."""

    def __init__(self, parser: argparse.ArgumentParser, cfg: dict[str, str]):
        self.parser = parser
        self.cfg = cfg
        # accepted (and already consumed) anywhere on the command line
        parser.add_argument("--config", help="key=value defaults file")

    def add(self, flag: str, **kwargs):
        key = flag.lstrip("-").replace("-", "_")
        if key in self.cfg:
            raw = self.cfg[key]
            if kwargs.get("action") == "store_true":
                kwargs["default"] = raw.lower() in ("1", "true", "yes")
            else:
                conv = kwargs.get("type", str)
                kwargs["default"] = conv(raw)
            kwargs.pop("required", None)
        self.parser.add_argument(flag, **kwargs)


def build_parser(cfg: dict[str, str]) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scaletext",
        description="multi-scale attention text recognizer: data generation, "
                    "training, evaluation, ablation, gradient checks, saliency")
    parser.add_argument("--config", help="key=value defaults file")
    subs = parser.add_subparsers(dest="command", required=True)

    g = _Sub(subs.add_parser("generate", help="write a synthetic dataset"), cfg)
    g.add("--out", required=True, help="output directory")
    g.add("--count", type=int, default=1000)
    g.add("--seed", type=int, default=0)
    g.add("--lengths", type=_parse_lengths, default="1:0.2,2:0.2,3:0.2,4:0.2,5:0.2")
    g.add("--charset", default="digits", help="digits | alnum | explicit symbols")
    g.add("--height", type=int, default=32)
    g.add("--jitter", type=_parse_pair, default="0.55,0.95")
    g.add("--noise", type=float, default=0.05)
    g.add("--invert", action="store_true")

    t = _Sub(subs.add_parser("train", help="train a recognizer"), cfg)
    t.add("--data", required=True, help="dataset directory")
    t.add("--steps", type=int, default=5000)
    t.add("--batch", type=int, default=16)
    t.add("--seed", type=int, default=0)
    t.add("--multiplier", type=_parse_multiplier, default="1/16")
    t.add("--scales", type=_parse_scales, default="48x32,24x32",
          help="pyramid levels WxH, comma separated; one level = single-CNN baseline")
    t.add("--charset", default="digits")
    t.add("--out", default=None, help="checkpoint/report directory")
    t.add("--overfit1", action="store_true", help="train on the first sample only")
    t.add("--log-every", type=int, default=50)

    e = _Sub(subs.add_parser("eval", help="evaluate a checkpoint"), cfg)
    e.add("--ckpt", required=True)
    e.add("--data", required=True)
    e.add("--lexicon", default=None, help="word list, one per line")
    e.add("--out", default=None, help="report prefix (writes .tsv and .png)")
    e.add("--workers", type=int, default=1)

    a = _Sub(subs.add_parser("ablate", help="compare encoder variants"), cfg)
    a.add("--seed", type=int, default=7)
    a.add("--steps", type=int, default=6000)
    a.add("--batch", type=int, default=16)
    a.add("--multiplier", type=_parse_multiplier, default="1/16")
    a.add("--charset", default="alnum")
    a.add("--train-count", type=int, default=5000)
    a.add("--balanced-count", type=int, default=3200)
    a.add("--single-count", type=int, default=1000)
    a.add("--long-count", type=int, default=2000)
    a.add("--variants", default="cnn_96x32=96x32;multi_24_48_96=24x32,48x32,96x32",
          help="name=WxH[,WxH...] pairs separated by ';'")
    a.add("--out", default=None, help="report prefix (writes .tsv and .png)")
    a.add("--ckpt-dir", default=None)

    c = _Sub(subs.add_parser("gradcheck", help="finite-difference gradient suite"), cfg)
    c.add("--op", default=None, help="restrict to one op")

    v = _Sub(subs.add_parser("visualize", help="emit attention saliency images"), cfg)
    v.add("--ckpt", required=True)
    v.add("--image", default=None, help="input PGM")
    v.add("--data", default=None, help="dataset directory (with --index)")
    v.add("--index", type=int, default=0)
    v.add("--out", required=True, help="output directory")

    return parser


# ---------------------------------------------------------------------------
# Subcommand bodies

def cmd_generate(args) -> int:
    charset = _charset(args.charset)
    spec = GenSpec(lengths=args.lengths, jitter=args.jitter, canvas_height=args.height,
                   noise=args.noise, seed=args.seed, count=args.count,
                   symbols=charset.symbols, invert=args.invert)
    samples = generate_dataset(spec)
    save_dataset(args.out, samples)
    hist: dict[int, int] = {}
    for s in samples:
        hist[len(s.label)] = hist.get(len(s.label), 0) + 1
    print(f"samples\t{len(samples)}")
    print("length\tcount")
    for n in sorted(hist):
        print(f"{n}\t{hist[n]}")
    return 0


def cmd_train(args) -> int:
    samples = load_dataset(args.data)
    if args.overfit1:
        samples = samples[:1]
        batch = 1
    else:
        batch = args.batch
    charset = _charset(args.charset)
    for s in samples:
        charset.encode(s.label)  # raises InputError on out-of-charset labels
    config = TrainConfig(steps=args.steps, batch_size=batch, seed=args.seed,
                         multiplier=args.multiplier, scales=args.scales,
                         charset=charset.symbols, checkpoint_dir=args.out,
                         log_every=args.log_every)
    model = build_model(config, max_label_len=max(len(s.label) for s in samples))
    print(f"parameters\t{model.param_count()}")

    def on_step(step, loss):
        if args.log_every and step % args.log_every == 0:
            print(f"step\t{step}\tloss\t{loss:.6f}", file=sys.stderr)
        return False

    result = train(model, samples, config, on_step=on_step)
    final_loss = result.loss_curve[-1][1]
    print(f"final_loss\t{final_loss:.6f}")
    if args.out:
        rpt.write_tsv(rpt.loss_curve_rows(result.loss_curve),
                      out=os.path.join(args.out, "loss_curve.tsv"))
        rpt.render_loss_curve(result.loss_curve, os.path.join(args.out, "loss_curve.png"))
        print(f"checkpoint\t{result.final_checkpoint}")
    else:
        rpt.write_tsv(rpt.loss_curve_rows(result.loss_curve))
    return 0


def cmd_eval(args) -> int:
    if not os.path.isfile(args.ckpt):
        raise InputError(f"checkpoint not found: {args.ckpt}")
    model = Recognizer.load(args.ckpt)
    samples = load_dataset(args.data)
    lexicon = Lexicon.load(args.lexicon) if args.lexicon else None
    report = evaluate(model, samples, lexicon=lexicon, workers=args.workers)
    rows = rpt.eval_report_rows(report)
    rpt.write_tsv(rows)
    if args.out:
        rpt.write_tsv(rows, out=args.out + ".tsv")
        rpt.render_eval_report(report, args.out + ".png")
    return 0


def cmd_ablate(args) -> int:
    variants = {}
    for part in args.variants.split(";"):
        name, _, scales = part.partition("=")
        if not scales:
            raise InputError(f"bad variant spec: {part!r}")
        variants[name.strip()] = _parse_scales(scales)
    config = AblationConfig(variants=variants, seed=args.seed, steps=args.steps,
                            batch_size=args.batch, multiplier=args.multiplier,
                            charset=_charset(args.charset).symbols,
                            train_count=args.train_count,
                            balanced_count=args.balanced_count,
                            single_count=args.single_count, long_count=args.long_count,
                            checkpoint_dir=args.ckpt_dir)
    result = run_ablation(config, on_progress=lambda v, p: print(f"progress\t{v}\t{p}",
                                                                 file=sys.stderr))
    rows = rpt.ablation_rows(result)
    rpt.write_tsv(rows)
    if args.out:
        rpt.write_tsv(rows, out=args.out + ".tsv")
        rpt.render_ablation(result, args.out + ".png")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    try:
        results = run_gradcheck(only=args.op)
    except KeyError as exc:
        raise InputError(str(exc)) from None
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name}\t{r.max_rel_err:.3e}\ttol={r.tolerance:g}\t"
              f"coords={r.coords_checked}\tkink_fallbacks={r.kink_fallbacks}\t{status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"FAILED\t{','.join(failed)}")
        return 1
    return 0


def _minmax_normalize(arr: np.ndarray) -> np.ndarray:
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        return np.ones_like(arr) if hi > 0 else np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def cmd_visualize(args) -> int:
    if not os.path.isfile(args.ckpt):
        raise InputError(f"checkpoint not found: {args.ckpt}")
    model = Recognizer.load(args.ckpt)
    if args.image:
        image = read_pgm(args.image)
    elif args.data:
        samples = load_dataset(args.data)
        if not 0 <= args.index < len(samples):
            raise InputError(f"--index {args.index} out of range (dataset has {len(samples)})")
        image = samples[args.index].image
    else:
        raise InputError("visualize needs --image or --data")
    os.makedirs(args.out, exist_ok=True)

    result, trace = model.recognize(image)
    written = []

    # per-scale saliency over the matching pyramid level
    omega = trace.weights[0]  # [N, H', W']
    for s, (w, h) in enumerate(model.spec.scales):
        level = np.clip(resize_plane(image, h, w), 0.0, 1.0)
        sal = _minmax_normalize(resize_plane(omega[s].astype(np.float64), h, w))
        overlay = 0.5 * level + 0.5 * sal
        path = os.path.join(args.out, f"scale_{s}_{w}x{h}.pgm")
        write_pgm(path, overlay)
        written.append(path)

    # per-step spatial attention over the input image, saliency in red
    hh, ww = image.shape
    for t, alpha in enumerate(result.trace.maps):
        total = float(alpha.sum())
        if abs(total - 1.0) > 1e-5:
            raise NumericsError(f"spatial attention map at step {t} sums to {total}")
        sal = _minmax_normalize(resize_plane(alpha.astype(np.float64), hh, ww))
        rgb = np.stack([0.5 * image + 0.5 * sal, 0.5 * image, 0.5 * image], axis=-1)
        path = os.path.join(args.out, f"spatial_step{t:02d}.ppm")
        write_ppm(path, rgb)
        written.append(path)

    print(f"decoded\t{result.text}")
    for path in written:
        print(f"wrote\t{path}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "visualize": cmd_visualize,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    cfg: dict[str, str] = {}
    if "--config" in argv:
        try:
            cfg = _load_config(argv[argv.index("--config") + 1])
        except (IndexError, OSError, InputError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    parser = build_parser(cfg)
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericsError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (InputError, DimensionError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
