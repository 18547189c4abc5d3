"""Command-line entry point: gen-data, train, adapt, eval, ablate, analyze.

Every subcommand takes ``--config``, ``--seed``, ``--out`` and ``--quiet``,
echoes the paths it writes, and reports failures as one ``error: CODE: ...``
line on stderr with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .artisan import UnknownLanguageError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .ctc import InfeasibleTargetError
from .datagen import build_world, low_resource_pack, read_corpus, train_eval_split, write_corpus
from .trainer import (
    DivergenceError,
    adapt_low_resource,
    build_model,
    evaluate,
    further_mask_ft,
    separate_models,
    train_multilingual,
)

EXIT_CODES = {
    "config": 2,
    "missing-file": 3,
    "checkpoint": 4,
    "unknown-language": 5,
    "infeasible-target": 6,
    "divergence": 7,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Out:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def wrote(self, path: Path) -> None:
        print(f"wrote {path}")

    def info(self, msg: str) -> None:
        if not self.quiet:
            print(msg)


def _write(out: _Out, path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    out.wrote(path)
    return path


def _world(cfg: ExperimentConfig):
    return build_world(cfg.world.n_families, cfg.world.langs_per_family, seed=cfg.seed, config=cfg.data)


def _data_dir(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    if cfg.data_dir:
        return Path(cfg.data_dir)
    return Path(args.out) / "data"


def _load_split(data: Path, group: str, tag: str, split: str):
    path = data / group / f"{tag}_{split}"
    if not path.with_suffix(".manifest").is_file():
        raise CliError("missing-file", f"{path.with_suffix('.manifest')} not found (run gen-data first)")
    return read_corpus(path)


def _load_group(data: Path, group: str) -> dict[str, tuple[list, list, tuple[int, ...]]]:
    """tag -> (train, eval, vocab) for every language stored under ``group``."""
    root = data / group
    if not root.is_dir():
        raise CliError("missing-file", f"{root} not found (run gen-data first)")
    out = {}
    for manifest in sorted(root.glob("*_train.manifest")):
        tag = manifest.name[: -len("_train.manifest")]
        meta, train = _load_split(data, group, tag, "train")
        _, held = _load_split(data, group, tag, "eval")
        out[tag] = (train, held, tuple(int(v) for v in meta["vocab"].split()))
    if not out:
        raise CliError("missing-file", f"{root} holds no corpora")
    return out


def _history_csv(result, layer_names: list[str], languages: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "layer", "language", "k", "value"])
    for it, snap in zip(result.t_history_iters, result.t_history):
        for li, name in enumerate(layer_names):
            for l, tag in enumerate(languages):
                for k, v in enumerate(snap[li, l]):
                    w.writerow([it, name, tag, k, repr(float(v))])
    return buf.getvalue()


def _read_history(path: Path) -> tuple[list[int], list[np.ndarray]]:
    rows: dict[int, list[float]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["iter"]), []).append(float(r["value"]))
    iters = sorted(rows)
    return iters, [np.asarray(rows[i]) for i in iters]


def _cer_csv(rows: list[tuple[str, int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["language", "utterances", "cer"])
    for tag, n, c in rows:
        w.writerow([tag, n, repr(c)])
    return buf.getvalue()


# subcommands -------------------------------------------------------------------


def cmd_gen_data(args, cfg: ExperimentConfig, out: _Out) -> None:
    data = _data_dir(args, cfg)
    world = _world(cfg)
    for spec in world.languages:
        train, held = train_eval_split(world, spec.tag)
        for split, utts in (("train", train), ("eval", held)):
            for p in write_corpus(data / "stage_a" / f"{spec.tag}_{split}", utts, spec, cfg.seed, split):
                out.wrote(p)
    specs, corpora = low_resource_pack(world, cfg.world.n_new_langs, cfg.world.minutes_scale, seed=cfg.seed)
    for spec in specs:
        for split, utts in zip(("train", "eval"), corpora[spec.tag]):
            for p in write_corpus(data / "low_resource" / f"{spec.tag}_{split}", utts, spec, cfg.seed, split):
                out.wrote(p)


def cmd_train(args, cfg: ExperimentConfig, out: _Out) -> None:
    data = _load_group(_data_dir(args, cfg), "stage_a")
    corpora = {tag: (train, held) for tag, (train, held, _) in data.items()}
    vocab = sorted({v for _, _, voc in data.values() for v in voc})
    tcfg = cfg.trainer
    root = Path(args.out)
    if tcfg.baseline == "separate_weight":
        res = train_multilingual(separate_models(cfg.model, tcfg, corpora, vocab), corpora, tcfg)
        for tag, m in res.models.items():
            for f in ("manifest.txt", "payload.bin"):
                out.wrote(save_checkpoint(m, root / "checkpoints" / tag, cfg) / f)
    else:
        model = build_model(cfg.model, tcfg, list(corpora), vocab)
        res = train_multilingual(model, corpora, tcfg)
        ck = save_checkpoint(res.model, root / "checkpoint", cfg)
        out.wrote(ck / "manifest.txt")
        out.wrote(ck / "payload.bin")
        if res.t_history:
            names = [n for n, _ in res.model.artisan_layers()]
            _write(out, root / "t_history.csv", _history_csv(res, names, res.model.languages))
    _write(out, root / "metrics.csv", res.log_csv())
    rows = [(tag, len(corpora[tag][1]), res.final_cer[tag]) for tag in corpora]
    _write(out, root / "final_cer.csv", _cer_csv(rows))
    out.info(f"mean eval CER {res.mean_initial_cer():.4f} -> {res.mean_final_cer():.4f}")


def cmd_adapt(args, cfg: ExperimentConfig, out: _Out) -> None:
    model, _ = _checkpoint(args.checkpoint)
    data = _data_dir(args, cfg)
    meta, train = _load_split(data, "low_resource", args.language, "train")
    _, held = _load_split(data, "low_resource", args.language, "eval")
    vocab = tuple(int(v) for v in meta["vocab"].split())
    root = Path(args.out)
    res = adapt_low_resource(model, args.language, vocab, train, held, cfg.adapt)
    stages = [("adapt", res)]
    if args.further_ft:
        stages.append(("ft", further_mask_ft(res.model, args.language, train, held, cfg.ft)))
    for name, r in stages:
        ck = save_checkpoint(r.model, root / f"{name}_{args.language}" / "checkpoint", cfg)
        out.wrote(ck / "manifest.txt")
        out.wrote(ck / "payload.bin")
        _write(out, root / f"{name}_{args.language}" / "metrics.csv", r.log_csv())
        out.info(f"{name} {args.language}: CER {r.initial_cer[args.language]:.4f} -> {r.final_cer[args.language]:.4f}")


def cmd_eval(args, cfg: ExperimentConfig, out: _Out) -> None:
    model, _ = _checkpoint(args.checkpoint)
    data = _data_dir(args, cfg)
    rows = []
    for tag in args.language or model.languages:
        model.language_index(tag)
        source = args.corpus or tag
        group = "stage_a" if (data / "stage_a" / f"{source}_{args.split}.manifest").is_file() else "low_resource"
        _, utts = _load_split(data, group, source, args.split)
        rows.append((tag, len(utts), evaluate(model, utts, tag, cfg.trainer.eval_batch).cer))
    _write(out, Path(args.out) / f"eval_{args.split}.csv", _cer_csv(rows))
    for tag, n, c in rows:
        out.info(f"{tag}: CER {c:.4f} over {n} utterances")


def _grid_value(axis: str, raw: str):
    if axis == "alpha_beta":
        a, _, b = raw.partition("/")
        return (float(a), int(b))
    if axis == "t":
        return float(raw)
    if axis == "K":
        return int(raw)
    if axis == "gamma" and raw not in ("M_only", "M-only"):
        return int(raw)
    return raw


def cmd_ablate(args, cfg: ExperimentConfig, out: _Out) -> None:
    if args.axis not in analysis.SWEEP_AXES:
        raise CliError("config", f"unknown axis {args.axis!r}; expected one of {', '.join(analysis.SWEEP_AXES)}")
    try:
        grid = [_grid_value(args.axis, v) for v in args.grid.split(",")]
        seeds = [int(s) for s in args.seeds.split(",")]
        rows = analysis.ablation_sweep(
            args.axis,
            grid,
            cfg.model,
            cfg.trainer,
            cfg.data,
            (cfg.world.n_families, cfg.world.langs_per_family),
            seeds=seeds,
            workers=args.workers,
        )
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    _write(out, Path(args.out) / f"ablation_{args.axis}.csv", analysis.sweep_to_csv(rows))
    for r in rows:
        out.info(f"{args.axis}={r[args.axis]}: mean CER {r['mean_cer']:.4f}")


def cmd_analyze(args, cfg: ExperimentConfig, out: _Out) -> None:
    model, saved = _checkpoint(args.checkpoint)
    world_cfg = saved or cfg
    families = {s.tag: s.family for s in _world(world_cfg).languages}
    missing = [t for t in model.languages if t not in families]
    if missing:
        raise CliError("unknown-language", f"no family known for {', '.join(missing)}")
    acfg = cfg.analysis
    rep = analysis.similarity_report(model, acfg.n_parts, acfg.binary_features, acfg.standardize)
    root = Path(args.out)
    for p in range(len(rep.matrices)):
        _write(out, root / f"similarity_part{p}.csv", rep.to_csv(p))
    fams = [families[t] for t in model.languages]
    contrasts = analysis.family_contrast_report(rep, fams, acfg.permutations, seed=cfg.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["part", "gap", "p_value", "permutations"])
    for p, c in enumerate(contrasts):
        w.writerow([p if p < len(rep.matrices) else "all", repr(c.gap), repr(c.p_value), c.n_permutations])
    _write(out, root / "family_contrast.csv", buf.getvalue())
    history = Path(args.history) if args.history else Path(args.checkpoint).parent / "t_history.csv"
    if history.is_file():
        iters, snaps = _read_history(history)
        if len(snaps) >= 2:
            _write(out, root / "collapse.csv", analysis.collapse_metrics(snaps, iters).to_csv())
    elif args.history:
        raise CliError("missing-file", f"{history} not found")


def _checkpoint(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError("missing-file", str(exc)) from None
    except CheckpointError as exc:
        raise CliError("checkpoint", str(exc)) from None


# parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="run", help="output directory (default: run)")
    common.add_argument("--data", help="corpus directory (default: config data_dir, else OUT/data)")
    common.add_argument("--quiet", action="store_true", help="only echo written paths")
    parser = argparse.ArgumentParser(prog="modasr", description="Multilingual masked-encoder CTC toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic stage-A and low-resource corpora")
    sub.add_parser("train", parents=[common], help="multilingual training from the stage-A corpora")
    p = sub.add_parser("adapt", parents=[common], help="add a low-resource language to a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--language", required=True)
    p.add_argument("--further-ft", action="store_true", help="also run dedicated-score fine-tuning")
    p = sub.add_parser("eval", parents=[common], help="CER of a checkpoint per language")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--language", action="append", help="repeatable; default: every registered language")
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--corpus", help="read this language's corpus instead of each evaluated language's own")
    p = sub.add_parser("ablate", parents=[common], help="3-seed sweep of one hyperparameter axis")
    p.add_argument("--axis", required=True, help=f"one of {', '.join(analysis.SWEEP_AXES)}")
    p.add_argument("--grid", required=True, help="comma-separated values; alpha_beta uses a/b pairs")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("analyze", parents=[common], help="mapping similarity, family contrast and collapse")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--history", help="t_history.csv (default: next to the checkpoint)")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = _Out(args.quiet)
    try:
        try:
            cfg = load_config(args.config)
        except FileNotFoundError as exc:
            raise CliError("missing-file", str(exc)) from None
        except ConfigError as exc:
            raise CliError("config", str(exc)) from None
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        cfg = cfg.seeded()
        with warnings.catch_warnings():
            if args.quiet:
                warnings.simplefilter("ignore")
            COMMANDS[args.command](args, cfg, out)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.code]
    except UnknownLanguageError as exc:
        print(f"error: unknown-language: {exc.args[0]}", file=sys.stderr)
        return EXIT_CODES["unknown-language"]
    except InfeasibleTargetError as exc:
        print(f"error: infeasible-target: {exc}", file=sys.stderr)
        return EXIT_CODES["infeasible-target"]
    except DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return EXIT_CODES["divergence"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
