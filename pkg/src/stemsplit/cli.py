"""Command-line entry point: ``stemsplit {mix,train,separate,evaluate,stats,pool,fixtures}``.

Exit codes: 0 success, 2 usage or validation error, 3 runtime error.
Every command writes the resolved configuration to ``config.json`` next
to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import corpus
from .audio_io import AudioBuffer, ManifestError, WavFormatError, read_manifest, read_wav, resample, write_wav
from .metrics import SOURCES, evaluate, format_table, merge_reports, oracle_psf
from .mixgen import (
    ClipCache,
    MixConfig,
    MixgenError,
    build_pool,
    corpus_overlap_stats,
    default_profiles,
    generate_mixture,
    load_pool,
    profiles_from_json,
    save_pool,
)
from .mrx import TOY_CONFIG, MrxConfig, MrxModel, TrainConfig, Trainer, infer, load_model
from .nn.checkpoint import CheckpointError
from .synth import make_fixture_corpus, toy_training_example

log = logging.getLogger("stemsplit")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

TOY_RATE = 8000
CONFIG_FILE = "config.json"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION, field: str | None = None):
        super().__init__(message)
        self.code = code
        self.field = field


VALIDATION_ERRORS = (MixgenError, ManifestError, WavFormatError, CheckpointError)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _snapshot(args, out_dir, extra: dict | None = None) -> None:
    """Write the resolved config (all flags after config-file merging) into ``out_dir``."""
    skip = {"func", "out", "json_errors", "log_level", "config", "jobs"}
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    resolved.update(extra or {})
    _write_json(Path(out_dir) / CONFIG_FILE, resolved)


def _read_json(path, what: str):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise CliError(f"{what}: file not found: {path}", field=what) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{what}: invalid JSON in {path}: {exc}", field=what) from None


# --------------------------------------------------------------------------
# mix
# --------------------------------------------------------------------------


def _mix_worker(job):
    index, pool, config, seed, out = job
    rendered = generate_mixture(index, pool, config, seed, ClipCache(pool))
    corpus.write_mixture(Path(out) / rendered.manifest.mixture_id, rendered, "float32")
    return rendered.manifest


def _map(fn, jobs: list, workers: int) -> list:
    """Ordered map, in-process for one worker."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
        return list(ex.map(fn, jobs))


def cmd_mix(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.pools:
        pool = load_pool(args.pools)
    elif args.preset == "toy":
        fixtures = out / "pools"
        if not (fixtures / "pools.json").exists():
            make_fixture_corpus(fixtures, sample_rate=TOY_RATE, seed=args.seed)
            save_pool(fixtures / "pools.json", build_pool(fixtures))
        pool = load_pool(fixtures / "pools.json")
    else:
        raise CliError("pools: --pools is required unless --preset toy is given", field="pools")

    profiles = profiles_from_json(_read_json(args.profiles, "profiles")) if args.profiles else default_profiles()
    rate = args.sample_rate or (TOY_RATE if args.preset == "toy" else pool.sample_rate)
    if args.count < 1:
        raise CliError("count: must be >= 1", field="count")
    if args.duration <= 0:
        raise CliError("duration: must be positive", field="duration")
    config = MixConfig(duration_s=args.duration, sample_rate=rate, split=args.split, profiles=profiles)
    # surface a missing class before spawning workers
    for cls, p in profiles.items():
        if p.enabled and not pool.clips(args.split, cls):
            raise CliError(
                f"pools.splits.{args.split}.{cls}: no clips for class {cls!r} with lambda > 0", field=f"pools.splits.{args.split}.{cls}"
            )

    jobs = [(i, pool, config, args.seed, str(out)) for i in range(args.count)]
    manifests = _map(_mix_worker, jobs, args.jobs)
    stats = corpus_overlap_stats(manifests)
    stats["mixtures"] = len(manifests)
    _write_json(out / "corpus_stats.json", stats)
    _snapshot(args, out, {"sample_rate": rate, "profiles": {c: p.to_json() for c, p in profiles.items()}})
    log.info("wrote %d mixtures to %s", len(manifests), out)
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _model_config(args) -> MrxConfig:
    base = dict(TOY_CONFIG) if args.preset == "toy" else {}
    for key, flag in (
        ("window_ms", "window_ms"),
        ("sample_rate", "sample_rate"),
        ("hidden", "hidden"),
        ("lstm_hidden", "lstm_hidden"),
        ("lstm_layers", "lstm_layers"),
        ("num_stacks", "stacks"),
        ("chunk_s", "chunk_s"),
    ):
        value = getattr(args, flag)
        if value is not None:
            base[key] = tuple(value) if key == "window_ms" else value
    try:
        return MrxConfig(**base)
    except ValueError as exc:
        raise CliError(f"model: {exc}", field="model") from None


TRAIN_DEFAULTS = TrainConfig()


def _train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """Flags override ``base`` (the checkpointed config on resume, else the defaults)."""
    if base is None:
        base = TrainConfig(epochs=20 if args.preset == "toy" else TRAIN_DEFAULTS.epochs)
    cfg = TrainConfig(**{k: (getattr(args, k) if getattr(args, k) is not None else v) for k, v in vars(base).items()})
    for name in ("epochs", "batch_size", "patience"):
        if getattr(cfg, name) < 1:
            raise CliError(f"{name}: must be >= 1", field=name)
    if cfg.lr <= 0:
        raise CliError("lr: must be positive", field="lr")
    return cfg


def _dataset(path, model_cfg: MrxConfig, what: str):
    if not corpus.list_mixtures(path):
        raise CliError(f"{what}: no mixtures found under {path}", field=what)
    return corpus.chunk_corpus(path, model_cfg.sample_rate, model_cfg.chunk_s, np.float32)


def cmd_train(args) -> int:
    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = Trainer.load(args.resume)
        tcfg = trainer.config = _train_config(args, trainer.config)
        model = trainer.model
    else:
        tcfg = _train_config(args)
        model = MrxModel(_model_config(args), seed=tcfg.seed, dtype=np.float32)
        trainer = Trainer(model, tcfg)
    mcfg = model.config

    if args.data:
        data = _dataset(args.data, mcfg, "data")
    elif args.preset == "toy":
        mix, stems = toy_training_example(mcfg.sample_rate, mcfg.chunk_s, seed=tcfg.seed)
        data = [(mix.astype(np.float32), stems.astype(np.float32))]
    else:
        raise CliError("data: --data is required unless --preset toy is given", field="data")
    val = _dataset(args.val_data, mcfg, "val_data") if args.val_data else None

    _snapshot(args, out, {"model": mcfg.to_json(), "train": vars(tcfg), "chunks": len(data)})
    log.info("training %d parameters on %d chunks", model.n_parameters(), len(data))
    while trainer.epoch < tcfg.epochs:
        trainer.run_epoch(data, val)
        trainer.save(ckpt_dir / f"epoch_{trainer.epoch:04d}.ckpt")
        _write_json(out / "history.json", trainer.history)
        if tcfg.max_steps is not None and trainer.step_count >= tcfg.max_steps:
            break
    trainer.save(out / "last.ckpt")
    _write_json(out / "history.json", trainer.history)
    return EXIT_OK


# --------------------------------------------------------------------------
# separate
# --------------------------------------------------------------------------


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    return x[:n] if len(x) >= n else np.pad(x, (0, n - len(x)))


def cmd_separate(args) -> int:
    model = load_model(args.checkpoint)
    buf = read_wav(args.input)
    model_rate = model.config.sample_rate
    if args.process_rate is not None and args.process_rate != model_rate:
        raise CliError(f"process_rate: {args.process_rate} Hz does not match the model rate {model_rate} Hz", field="process_rate")
    if buf.sample_rate != model_rate and args.process_rate is None:
        raise CliError(
            f"input: sample rate {buf.sample_rate} Hz differs from the model rate {model_rate} Hz; pass --process-rate {model_rate}",
            field="sample_rate",
        )
    work = resample(buf, model_rate) if buf.sample_rate != model_rate else buf
    stems = infer(model, work)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, stem in zip(SOURCES, stems):
        if stem.sample_rate != buf.sample_rate:
            stem = resample(stem, buf.sample_rate)
        write_wav(out / f"{name}.wav", AudioBuffer(_fit_length(stem.samples, len(buf)), buf.sample_rate))
    _snapshot(args, out, {"model_rate": model_rate, "input_rate": buf.sample_rate})
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def _eval_worker(job):
    ref_dir, est_dir, segment_s, oracle = job
    mix, refs, manifest = corpus.load_mixture(ref_dir)
    if est_dir is None:
        est = {s: mix for s in SOURCES}
    else:
        est = corpus.read_stems(est_dir)
        for s, b in est.items():
            if b.sample_rate != mix.sample_rate:
                raise CliError(f"estimates.{manifest.mixture_id}.{s}: sample rate {b.sample_rate} != reference {mix.sample_rate}")
    try:
        report = evaluate(est, refs, mix, manifest, segment_s)
        oracle_report = None
        if oracle == "psf":
            psf = oracle_psf(mix, [refs[s] for s in SOURCES])
            oracle_report = evaluate(dict(zip(SOURCES, psf)), refs, mix, manifest, segment_s)
    except ValueError as exc:
        raise CliError(f"{manifest.mixture_id}: {exc}") from None
    return report, oracle_report


def cmd_evaluate(args) -> int:
    refs = corpus.list_mixtures(args.references)
    if not refs:
        raise CliError(f"references: no mixtures found under {args.references}", field="references")
    if args.segment <= 0:
        raise CliError("segment: must be positive", field="segment")
    jobs = []
    for ref in refs:
        if args.estimates == "mixture":
            est = None
        else:
            est = Path(args.estimates) / ref.name
            if not est.is_dir():
                raise CliError(f"estimates: missing directory for mixture {ref.name}", field="estimates")
        jobs.append((str(ref), None if est is None else str(est), args.segment, args.oracle))
    results = _map(_eval_worker, jobs, args.jobs)
    report = merge_reports([r for r, _ in results])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_json()
    table = format_table(report)
    if args.oracle == "psf":
        oracle = merge_reports([o for _, o in results])
        doc["oracle_psf"] = oracle.to_json()
        table += "\nOracle PSF\n" + format_table(oracle)
    doc["mixtures"] = [Path(r).name for r in refs]
    _write_json(out / "report.json", doc)
    (out / "report.txt").write_text(table, encoding="utf-8")
    _snapshot(args, out)
    sys.stdout.write(table)
    return EXIT_OK


# --------------------------------------------------------------------------
# stats, pool, fixtures
# --------------------------------------------------------------------------


def cmd_stats(args) -> int:
    dirs = corpus.list_mixtures(args.data)
    if not dirs:
        raise CliError(f"data: no mixtures found under {args.data}", field="data")
    manifests = [read_manifest(d / corpus.MANIFEST_FILE) for d in dirs]
    stats = corpus_overlap_stats(manifests, args.frame)
    stats["mixtures"] = len(manifests)
    counts = {}
    for cls in ("music", "speech", "sfx_fg", "sfx_bg"):
        counts[cls] = float(np.mean([len(m.events_of(cls)) for m in manifests]))
    stats["mean_events"] = counts
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "corpus_stats.json", stats)
        _snapshot(args, out)
    sys.stdout.write(json.dumps(stats, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_pool(args) -> int:
    pool = build_pool(args.root)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # store paths relative to the pool file's directory
    root = Path(args.root).resolve()
    base = out.resolve().parent
    for classes in pool.splits.values():
        for clips in classes.values():
            for clip in clips:
                clip.path = str((root / clip.path).relative_to(base)) if (root / clip.path).is_relative_to(base) else str(root / clip.path)
    save_pool(out, pool)
    _snapshot(args, out.parent)
    return EXIT_OK


def cmd_fixtures(args) -> int:
    root = make_fixture_corpus(args.out, sample_rate=args.sample_rate, seed=args.seed)
    save_pool(root / "pools.json", build_pool(root))
    _snapshot(args, root)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json-errors", action="store_true", help="report errors on stderr as one-line JSON")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--config", help="JSON file of option defaults (keys are option names); flags override it")

    parser = _Parser(prog="stemsplit", description="Cinematic audio source separation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mix", parents=[common], help="synthesize a mixture corpus from clip pools")
    p.add_argument("--pools", help="pools.json clip index")
    p.add_argument("--profiles", help="profiles.json with per-class lambda / target_lufs overrides")
    p.add_argument("--preset", choices=["toy"], help="toy: generate 8 kHz fixture pools under OUT/pools")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--duration", type=float, default=60.0, help="mixture length in seconds")
    p.add_argument("--sample-rate", type=int, help="output rate (default: pool rate, 8000 for the toy preset)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", parents=[common], help="train a multi-resolution separation model")
    p.add_argument("--data", help="corpus directory written by mix")
    p.add_argument("--val-data", help="validation corpus directory")
    p.add_argument("--preset", choices=["toy"], help="toy: small 8 kHz model; without --data trains on one synthetic chunk")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, help="default 4")
    p.add_argument("--lr", type=float, help="initial learning rate, default 1e-3")
    p.add_argument("--patience", type=int, help="epochs without improvement before halving the lr, default 3")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int, help="default 0")
    p.add_argument("--window-ms", type=float, nargs="+")
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lstm-hidden", type=int)
    p.add_argument("--lstm-layers", type=int)
    p.add_argument("--stacks", type=int)
    p.add_argument("--chunk-s", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", parents=[common], help="split a mixture WAV into music/speech/sfx")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--process-rate", type=int, help="resample to this (model) rate for processing and back afterwards")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", parents=[common], help="score estimates against references")
    p.add_argument("--references", required=True, help="corpus directory written by mix")
    p.add_argument("--estimates", required=True, help="directory of <mixture_id>/{music,speech,sfx}.wav, or 'mixture'")
    p.add_argument("--oracle", choices=["psf"], help="also score the oracle phase-sensitive filter")
    p.add_argument("--segment", type=float, default=1.0, help="segment length in seconds")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", parents=[common], help="overlap statistics of a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pool", parents=[common], help="index ROOT/<split>/<class>/*.wav into a pools.json")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("fixtures", parents=[common], help="write synthetic fixture clip pools")
    p.add_argument("--sample-rate", type=int, default=44100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fixtures)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # read --config first so the file can also supply required options
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("command", nargs="?")
    early, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if early.config and early.command in subparsers:
        cfg = _read_json(early.config, "config")
        if not isinstance(cfg, dict):
            raise CliError("config: expected a JSON object", field="config")
        sub = subparsers[early.command]
        known = {a.dest for a in sub._actions} - {"help", "config"}
        defaults = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in known:
                raise CliError(f"config.{key}: unknown option for {early.command}", field=f"config.{key}")
            defaults[dest] = value
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


def _emit_error(exc: Exception, code: int, json_errors: bool, field: str | None = None) -> None:
    kind = "validation" if code == EXIT_VALIDATION else "runtime"
    if json_errors:
        payload = {"error": {"code": code, "type": kind, "message": str(exc)}}
        if field:
            payload["error"]["field"] = field
        sys.stderr.write(json.dumps(payload) + "\n")
    else:
        sys.stderr.write(f"stemsplit: {kind} error: {exc}\n")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    json_errors = "--json-errors" in argv
    try:
        args = parse_args(argv)
    except CliError as exc:
        _emit_error(exc, exc.code, json_errors, exc.field)
        return exc.code
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        _emit_error(exc, exc.code, args.json_errors, exc.field)
        return exc.code
    except VALIDATION_ERRORS as exc:
        _emit_error(exc, EXIT_VALIDATION, args.json_errors)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        _emit_error(exc, EXIT_VALIDATION, args.json_errors)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("unhandled error", exc_info=True)
        _emit_error(exc, EXIT_RUNTIME, args.json_errors)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
