"""Command-line entry point: ``python -m fava <subcommand> [flags]``.

Configuration comes from an optional ``key = value`` file (``--config``)
overridden by flags. Values are parsed as JSON when possible and taken as
strings otherwise; ``model.<field>`` keys override model-preset fields.
Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, namespace
from .data import Corpus, CorpusSpec, generate_corpus
from .evaluation import CONDITIONS, evaluate, transcribe, write_hypotheses
from .model import FavaModel, ModelConfig, parameter_table
from .rnnt import Vocabulary
from .trainer import (
    FINETUNE_MODES,
    MODE_COMPONENTS,
    MODES,
    PRETRAIN_MODES,
    TrainConfig,
    load_model,
    run_finetune,
    run_pretrain,
)

logger = logging.getLogger("fava")

SUBCOMMANDS = ("gen-data", "pretrain", "finetune", "adapt", "evaluate", "decode", "inspect")


class UsageError(Exception):
    pass


def parse_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fava", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out_dir", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true", help="overwrite a non-empty --out_dir")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        if name != "gen-data":
            p.add_argument("--preset", choices=("desk", "paper"))
        if name in ("pretrain", "finetune", "adapt", "inspect"):
            p.add_argument("--mode", choices=MODES)
        if name in ("pretrain", "finetune", "adapt"):
            p.add_argument("--steps", type=int)
            p.add_argument("--resume", help="checkpoint to resume from")
        if name in ("finetune", "adapt"):
            p.add_argument("--init", help="checkpoint to start from")
        if name in ("pretrain", "finetune", "adapt", "evaluate", "decode"):
            p.add_argument("--corpus", help="generated corpus directory")
        if name in ("evaluate", "decode", "inspect"):
            p.add_argument("--ckpt", help="checkpoint directory")
        if name in ("evaluate", "decode"):
            p.add_argument("--split", default=None)
        if name == "evaluate":
            p.add_argument("--condition", choices=CONDITIONS)
    return parser


def resolve(args) -> dict:
    """File config, then ``--set`` overrides, then dedicated flags."""
    cfg = parse_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _parse_value(value.strip())
    for key in ("out_dir", "seed", "preset", "mode", "steps", "init", "resume", "corpus",
                "ckpt", "split", "condition"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _prepare_out_dir(path, force: bool, allow_existing: bool = False) -> Path:
    if path is None:
        raise UsageError("--out_dir is required")
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not allow_existing:
        if not force:
            raise RuntimeError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg: dict, out_dir: Path | None = None):
    text = json.dumps(cfg, sort_keys=True, default=str)
    print(f"resolved config: {text}")
    if out_dir is not None:
        (out_dir / "resolved_config.json").write_text(text + "\n")


def _pop(cfg: dict, *keys):
    return [cfg.pop(k, None) for k in keys]


def _train_config(cfg: dict, default_mode: str, allowed) -> TrainConfig:
    cfg = dict(cfg)
    model = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("model.")}
    cfg = {k: v for k, v in cfg.items() if not k.startswith("model.")}
    cfg.setdefault("mode", default_mode)
    if cfg["mode"] not in allowed:
        raise UsageError(f"mode {cfg['mode']!r} is not valid here; expected one of {allowed}")
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg) - names
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    if model:
        cfg["model"] = dict(cfg.get("model") or {}, **model)
    return TrainConfig(**cfg).validate()


def cmd_gen_data(cfg: dict, force: bool) -> int:
    out_dir = _prepare_out_dir(cfg.pop("out_dir", None), force)
    counts = {k[4:]: cfg.pop(k) for k in list(cfg) if k.startswith("num_")}
    names = {f.name for f in fields(CorpusSpec)}
    unknown = set(cfg) - names
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    if "grammar" in cfg:
        cfg["grammar"] = tuple(cfg["grammar"])
    spec = CorpusSpec(**cfg)
    if counts:
        spec = CorpusSpec(**dict(cfg, num_utterances=dict(spec.num_utterances, **counts)))
    _echo(dict(cfg, num_utterances=spec.num_utterances), out_dir)
    manifests = generate_corpus(spec, out_dir)
    print(" ".join(f"{s}={len(r)}" for s, r in manifests.items()))
    return 0


def cmd_train(command: str, cfg: dict, force: bool) -> int:
    out, corpus_dir, init, resume = _pop(cfg, "out_dir", "corpus", "init", "resume")
    if corpus_dir is None:
        raise UsageError("--corpus is required")
    if command == "pretrain":
        tcfg = _train_config(cfg, "pretrain_audio", PRETRAIN_MODES)
    elif command == "adapt":
        tcfg = _train_config(cfg, "adapt_audio_to_av", ("adapt_audio_to_av",))
    else:
        tcfg = _train_config(cfg, "finetune_av", FINETUNE_MODES)
    if command == "adapt" and init is None and resume is None:
        raise UsageError("adapt needs --init <audio-only checkpoint>")
    out_dir = _prepare_out_dir(out, force, allow_existing=resume is not None)
    _echo(dict(tcfg.to_dict(), corpus=corpus_dir, init=init, resume=resume, out_dir=str(out_dir)),
          out_dir)
    corpus = Corpus(corpus_dir)
    if tcfg.is_pretrain:
        result = run_pretrain(tcfg, corpus, out_dir, resume=resume)
    else:
        result = run_finetune(tcfg, corpus, out_dir, init=init, resume=resume)
    print(f"final checkpoint: {result.final_checkpoint}")
    if result.best_checkpoint is not None:
        print(f"best checkpoint: {result.best_checkpoint}")
    return 0


def _model_from(cfg: dict):
    ckpt = cfg.get("ckpt")
    if ckpt is None:
        raise UsageError("--ckpt is required")
    model, normalizer, _, _, meta = load_model(ckpt)
    if not model.is_av and "predictor" not in model.components:
        raise RuntimeError(f"{ckpt} holds no recognizer (components {meta['components']})")
    return model, normalizer


def cmd_evaluate(cfg: dict, force: bool) -> int:
    out_dir = _prepare_out_dir(cfg.get("out_dir"), force)
    _echo(cfg, out_dir)
    if cfg.get("corpus") is None:
        raise UsageError("--corpus is required")
    model, normalizer = _model_from(cfg)
    corpus = Corpus(cfg["corpus"])
    split = cfg.get("split") or "test"
    conditions = [cfg["condition"]] if cfg.get("condition") else list(CONDITIONS)
    lines = []
    for cond in conditions:
        report = evaluate(model, corpus, corpus.records(split), cond, normalizer,
                          seed=int(cfg.get("seed") or 0), vocab=Vocabulary(corpus.spec.symbols),
                          dump=out_dir / f"refhyp_{split}_{cond}.txt")
        report.checkpoint = str(cfg["ckpt"])
        lines.append(report.to_json())
        print(f"{cond}: WER {100 * report.wer:.2f}% (S={report.substitutions} "
              f"D={report.deletions} I={report.insertions} N={report.ref_words})")
    (out_dir / "wer_report.jsonl").write_text("\n".join(lines) + "\n")
    return 0


def cmd_decode(cfg: dict, force: bool) -> int:
    out_dir = _prepare_out_dir(cfg.get("out_dir"), force)
    _echo(cfg, out_dir)
    if cfg.get("corpus") is None:
        raise UsageError("--corpus is required")
    model, normalizer = _model_from(cfg)
    corpus = Corpus(cfg["corpus"])
    vocab = Vocabulary(corpus.spec.symbols)
    records = corpus.records(cfg.get("split") or "test")
    hyps = []
    for rec in records:
        wave, video, _ = corpus.load(rec)
        hyps.append(vocab.decode(transcribe(model, normalizer(wave), video)))
    write_hypotheses(out_dir / "hypotheses.txt", [r.id for r in records], hyps)
    print(f"wrote {len(hyps)} hypotheses to {out_dir / 'hypotheses.txt'}")
    return 0


def cmd_inspect(cfg: dict, force: bool) -> int:
    _echo(cfg)
    if cfg.get("ckpt"):
        tensors, meta = load_checkpoint(cfg["ckpt"])
        rows = [(k, tuple(v.shape), int(v.size)) for k, v in sorted(namespace(tensors, "params").items())]
        print(f"checkpoint {cfg['ckpt']}: mode={meta.get('mode')} step={meta.get('step')} "
              f"preset={meta.get('preset')}")
    else:
        mode = cfg.get("mode") or "finetune_av"
        mcfg = ModelConfig.from_preset(cfg.get("preset") or "desk")
        with torch.device("meta"):
            model = FavaModel(mcfg, MODE_COMPONENTS[mode], seed=None)
        rows = parameter_table(model)
    width = max(len(r[0]) for r in rows)
    for name, shape, count in rows:
        print(f"{name:<{width}}  {str(list(shape)):<20} {count:>12,}")
    print(f"total parameters: {sum(r[2] for r in rows):,}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.force)
        if args.command in ("pretrain", "finetune", "adapt"):
            return cmd_train(args.command, cfg, args.force)
        return {"evaluate": cmd_evaluate, "decode": cmd_decode, "inspect": cmd_inspect}[
            args.command](cfg, args.force)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
