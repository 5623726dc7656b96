"""Command-line entry point: ``mmgan <verb> [--config cfg.yaml] [--out DIR] [--section.key value ...]``.

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import torch

from .core import CheckpointError, ConfigError, load_config, save_config
from .data import DataError, export_dataset
from .metrics import GeometryOracle, evaluate_tuples, load_extractor
from . import trainer as T

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "MMGAN_OUT"
VERBS = ("train", "finetune", "sample", "interpolate", "evaluate", "make-dataset", "export-rgbd", "plot")

log = logging.getLogger("mmgan")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")

    def add(name, help_text, checkpoint=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or ./mmgan_out)")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True)
        return p

    p = add("train", "train from scratch")
    p.add_argument("--evaluate", action="store_true", help="record toy-FID rows during training")
    add("finetune", "fine-tune a checkpoint on the held-out class", checkpoint=True)
    p = add("sample", "write sample grids per modality", checkpoint=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p = add("interpolate", "write latent-interpolation frames", checkpoint=True)
    p.add_argument("--codes", type=int, default=11)
    p.add_argument("--fps", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p = add("evaluate", "compute a metric report", checkpoint=True)
    p.add_argument("--holdout", action="store_true", help="compare against the held-out class")
    p.add_argument("--no-oracle", action="store_true", help="skip the fitted geometry oracle (no SIE / normal stats)")
    add("make-dataset", "render the procedural dataset and write a manifest")
    p = add("export-rgbd", "export generated tuples as an RGB-D dataset", checkpoint=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-normals", action="store_true")
    p = add("plot", "plot loss / FID / p curves from metrics.csv")
    p.add_argument("--metrics", type=Path, help="metrics.csv (default OUT/metrics.csv)")
    return parser


def parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--section.key value`` or ``--section.key=value`` pairs."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {tok!r}; overrides look like --section.key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} has no value")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def _out_dir(args) -> Path:
    out = args.out or Path(os.environ.get(OUT_ENV, "mmgan_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_train(args, cfg, out):
    dataset = T.build_dataset(cfg)
    save_config(cfg, out / "config.yaml")
    res = T.train(cfg, dataset, out, evaluate=args.evaluate)
    print(f"stopped: {res.stop_reason} after {res.state.step} steps; checkpoint {res.checkpoint}")


def _cmd_finetune(args, cfg, out):
    pretrained = T.load_checkpoint(args.checkpoint)
    split = T.build_finetune_split(cfg)
    res = T.finetune(pretrained, split.target_paired, split.target_unpaired, out, cfg)
    print(f"stopped: {res.stop_reason} after {res.state.step} steps; checkpoint {res.checkpoint}")


def _cmd_sample(args, cfg, out):
    state = T.load_checkpoint(args.checkpoint)
    gen = T.generate_tuples(state.sampler, args.n, args.seed)
    for name, imgs in gen.items():
        print(T.save_grid(imgs, out / f"sample_{name}.png", name))


def _cmd_interpolate(args, cfg, out):
    frames = T.interpolation_frames(args.checkpoint, args.codes, args.fps, args.seed)
    dirs = T.write_frames(frames, out / "frames")
    n = len(next(iter(frames.values())))
    print(f"{n} frames per modality under {out / 'frames'} ({', '.join(sorted(dirs))})")


def _cmd_evaluate(args, cfg, out):
    state = T.load_checkpoint(args.checkpoint)
    if args.holdout:
        real = T.build_dataset(cfg, classes=[cfg.finetune.holdout_class], num_samples=cfg.finetune.num_samples)
    else:
        real = T.build_dataset(cfg)
    n = cfg.metrics.num_samples
    gen = T.generate_tuples(state.sampler, n, seed=12345)
    idx = torch.randperm(len(real), generator=torch.Generator().manual_seed(0))[: cfg.metrics.fid_samples]
    oracle = None
    if not args.no_oracle and cfg.metrics.oracle_steps > 0:
        oracle = GeometryOracle().fit(real.images["rgb"], real.images["depth"], real.images["normal"],
                                      steps=cfg.metrics.oracle_steps)
    report = evaluate_tuples(
        {k: v[idx] for k, v in real.images.items()}, gen, load_extractor(cfg.metrics.extractor),
        T.depth_range_of(cfg) or (1.0, 2.0), T.pixel_size_of(cfg), oracle,
    )
    (out / "report.csv").write_text(report.to_csv())
    print(report.table())


def _cmd_make_dataset(args, cfg, out):
    dataset = T.build_dataset(cfg)
    print(export_dataset(dataset, out))


def _cmd_export_rgbd(args, cfg, out):
    print(T.synthesize_dataset(args.checkpoint, args.n, out, seed=args.seed, with_normals=not args.no_normals))


def _cmd_plot(args, cfg, out):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = args.metrics or out / "metrics.csv"
    if not path.is_file():
        raise FileNotFoundError(f"metrics file not found: {path}")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no rows")

    def series(col):
        pts = [(float(r["images_seen"]), float(r[col])) for r in rows if r.get(col) not in (None, "", "nan")]
        return [x for x, _ in pts], [y for _, y in pts]

    groups = {
        "losses": [c for c in rows[0] if c in ("g_loss", "d_loss") or c.startswith("d_fd_") or c == "d_cd"],
        "fid": [c for c in rows[0] if c.startswith("fid_")],
        "augment": ["p", "blur_sigma"],
    }
    for name, cols in groups.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        for col in cols:
            xs, ys = series(col)
            if xs:
                ax.plot(xs, ys, label=col)
        ax.set_xlabel("images seen")
        if ax.lines:
            ax.legend(loc="best", fontsize=8)
        target = out / f"plot_{name}.png"
        fig.savefig(target, dpi=100)
        plt.close(fig)
        print(target)


COMMANDS = {
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "sample": _cmd_sample,
    "interpolate": _cmd_interpolate,
    "evaluate": _cmd_evaluate,
    "make-dataset": _cmd_make_dataset,
    "export-rgbd": _cmd_export_rgbd,
    "plot": _cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        overrides = parse_overrides(extra)
        cfg = load_config(args.config, overrides)
        out = _out_dir(args)
        COMMANDS[args.verb](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, DataError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
