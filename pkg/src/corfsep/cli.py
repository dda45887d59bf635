"""``corfsep`` command line: simulate, train the three models, separate, evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .audio_io import AudioError, ManifestError, read_wav, write_wav
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_assignment

log = logging.getLogger("corfsep")


class CliError(RuntimeError):
    pass


# flag name -> config key; only set when the flag is given
FLAG_KEYS = {
    "seed": "seed",
    "workers": "workers",
    "out": "out",
    "corpus": "simulate.corpus",
    "split": "simulate.split",
    "n_speakers": "simulate.n_speakers",
    "count": "simulate.count",
    "max_seconds": "simulate.max_seconds",
    "synthetic_speakers": "simulate.synthetic_speakers",
    "train": "data.train",
    "valid": "data.valid",
    "manifest": "data.test",
    "stage1": "checkpoints.stage1",
    "stop": "checkpoints.stop",
    "stage2": "checkpoints.stage2",
    "max_iterations": "separate.max_iterations",
    "terminal": "separate.terminal",
}


def _nest(key: str, value) -> dict:
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = []
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(_nest(key, value))
    if args.deterministic:
        overrides.append({"deterministic": True})
    overrides.extend(parse_assignment(s) for s in args.set or [])
    return RunConfig.build(args.config, tuple(overrides))


def _out_path(cfg: RunConfig, name: str) -> Path:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _require(value, what: str):
    if not value:
        raise CliError(f"missing {what}")
    return value


def _examples(cfg: RunConfig, manifests) -> list:
    from .training import load_examples

    t = cfg["train"]
    examples = []
    for m in manifests:
        if not Path(m).is_file():
            raise CliError(f"manifest not found: {m}")
        examples.extend(load_examples(m, t["segment_seconds"], t["segment_hop"]))
    return examples


def cmd_simulate(cfg: RunConfig) -> int:
    from . import mixsim, synth

    s = cfg["simulate"]
    corpus = s["corpus"]
    if s["synthetic_speakers"]:
        corpus = _out_path(cfg, "corpus") / s["split"]
        synth.make_corpus(
            corpus,
            s["synthetic_speakers"],
            s["synthetic_utterances"],
            s["synthetic_seconds"],
            seed=cfg.seed,
            prefix=f"{s['split']}_",
        )
    index = mixsim.ingest_corpus(_require(corpus, "corpus (--corpus or --synthetic-speakers)"), s["split"])
    manifest = mixsim.build_dataset(
        index,
        s["n_speakers"],
        s["count"],
        cfg.seed,
        cfg.out / f"{s['split']}_{s['n_speakers']}mix",
        max_seconds=s["max_seconds"],
        workers=cfg["workers"],
    )
    print(manifest)
    return 0


def cmd_train_stage1(cfg: RunConfig) -> int:
    from .training import train_stage1

    train = _examples(cfg, _require(cfg["data"]["train"], "training manifests (--train)"))
    valid = _examples(cfg, cfg["data"]["valid"]) or None
    ckpt = train_stage1(train, cfg.train(), cfg.separator(), valid, _out_path(cfg, "stage1_log.jsonl"))
    path = _out_path(cfg, "stage1.pt")
    save_checkpoint(path, ckpt)
    print(path)
    return 0


def cmd_finetune_stage1(cfg: RunConfig) -> int:
    from .training import finetune_stage1

    base = load_checkpoint(_require(cfg["checkpoints"]["stage1"], "--stage1 checkpoint"), "stage1")
    train = _examples(cfg, _require(cfg["data"]["train"], "3-speaker manifest (--train)"))
    valid = _examples(cfg, cfg["data"]["valid"]) or None
    ckpt = finetune_stage1(base, train, cfg.train(), valid, _out_path(cfg, "stage1_ft_log.jsonl"))
    path = _out_path(cfg, "stage1_ft.pt")
    save_checkpoint(path, ckpt)
    print(path)
    return 0


def cmd_train_stop(cfg: RunConfig) -> int:
    from .stop import residual_training_data, train_stop_classifier
    from .training import build_cue_extractor

    s1 = load_checkpoint(_require(cfg["checkpoints"]["stage1"], "--stage1 checkpoint"), "stage1")
    examples = _examples(cfg, _require(cfg["data"]["train"], "manifests (--train)"))
    data = residual_training_data(
        build_cue_extractor(s1), [(e.mixture, e.num_speakers) for e in examples], cfg["stop"]["max_depth"]
    )
    ckpt = train_stop_classifier(data, cfg.stop(), s1)
    path = _out_path(cfg, "stop.pt")
    save_checkpoint(path, ckpt)
    with open(_out_path(cfg, "stop_log.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(ckpt.train_state, sort_keys=True) + "\n")
    print(path)
    return 0


def cmd_train_stage2(cfg: RunConfig) -> int:
    from .extractor import train_stage2

    s1 = load_checkpoint(_require(cfg["checkpoints"]["stage1"], "--stage1 checkpoint"), "stage1")
    train = _examples(cfg, _require(cfg["data"]["train"], "3-speaker manifest (--train)"))
    valid = _examples(cfg, cfg["data"]["valid"]) or None
    ckpt = train_stage2(
        s1,
        train,
        cfg.train(),
        cfg.conditioned(),
        valid,
        _out_path(cfg, "stage2_log.jsonl"),
        warm=cfg.warm_start,
        terminal=cfg["separate"]["terminal"],
    )
    path = _out_path(cfg, "stage2.pt")
    save_checkpoint(path, ckpt)
    print(path)
    return 0


def _models(cfg: RunConfig):
    from .extractor import build_target_extractor
    from .pipeline import Models
    from .stop import build_stop_classifier
    from .training import build_cue_extractor

    c = cfg["checkpoints"]
    s1 = build_cue_extractor(load_checkpoint(_require(c["stage1"], "--stage1 checkpoint"), "stage1"))
    stop = build_stop_classifier(load_checkpoint(_require(c["stop"], "--stop checkpoint"), "stop"))
    s2 = build_target_extractor(load_checkpoint(c["stage2"], "stage2")) if c["stage2"] else None
    models = Models(s1, stop, s2)
    models.check_compatible()
    return models


def cmd_separate(cfg: RunConfig, mixture: Optional[str]) -> int:
    from .pipeline import separate

    x = read_wav(_require(mixture, "--mixture"))
    sp = cfg["separate"]
    result = separate(x, _models(cfg), sp["max_iterations"], sp["terminal"])
    files = []
    for i, w in enumerate(result.fine_sources, start=1):
        p = _out_path(cfg, f"source_{i}.wav")
        write_wav(p, w)
        files.append(p.name)
    record = {"mixture": str(mixture), "sources": files, **result.to_record()}
    _out_path(cfg, "result.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"{result.iterations} sources written to {cfg.out}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    from .pipeline import evaluate, format_table, write_report

    manifest = _require(cfg["data"]["test"], "--manifest")
    sp = cfg["separate"]
    report, _ = evaluate(manifest, _models(cfg), sp["max_iterations"], sp["terminal"], workers=cfg["workers"])
    write_report(report, cfg.out)
    print(format_table(report), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--out", help="output directory (all files go here)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--deterministic", action="store_true", default=False)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="corfsep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate an N-speaker mixture dataset")
    p.add_argument("--corpus", help="directory with one subdirectory per speaker")
    p.add_argument("--split")
    p.add_argument("--n-speakers", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--max-seconds", type=float)
    p.add_argument("--synthetic-speakers", type=int, help="generate a synthetic corpus with this many speakers")

    for name, help_text in [
        ("train-stage1", "train the recursive cue extractor"),
        ("finetune-stage1", "fine-tune stage 1 on first-iteration residuals"),
        ("train-stop", "train the repeat-or-stop classifier"),
        ("train-stage2", "train the cue-conditioned target extractor"),
    ]:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--train", action="append", help="training manifest (repeatable)")
        p.add_argument("--valid", action="append", help="validation manifest (repeatable)")
        if name != "train-stage1":
            p.add_argument("--stage1", help="stage-1 checkpoint")

    for name, help_text in [("separate", "separate one mixture"), ("evaluate", "score a test manifest")]:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--stage1")
        p.add_argument("--stop")
        p.add_argument("--stage2")
        p.add_argument("--max-iterations", type=int)
        p.add_argument("--terminal", choices=["residual", "pass"])
        if name == "separate":
            p.add_argument("--mixture", required=True)
        else:
            p.add_argument("--manifest")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "train-stage1": cmd_train_stage1,
    "finetune-stage1": cmd_finetune_stage1,
    "train-stop": cmd_train_stop,
    "train-stage2": cmd_train_stage2,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = resolve_config(args)
        from .training import set_determinism

        set_determinism(cfg.seed, cfg.deterministic)
        if args.command == "separate":
            return cmd_separate(cfg, args.mixture)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"corfsep {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (CliError, CheckpointError, AudioError, ManifestError, OSError, ValueError, RuntimeError) as exc:
        print(f"corfsep {args.command}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
