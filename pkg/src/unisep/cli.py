"""Subcommand CLI: every pipeline stage behind one TOML config file.

The config file is the single source of truth; flags only name inputs and
outputs and may override the seed. Exit codes: 0 success, 2 validation
error, 3 numerical failure. Artifact-writing commands drop a ``run.json``
manifest (config hash, version tag, wall time) and a copy of the canonical
config next to their outputs; given identical inputs, seed, and config the
artifacts themselves are byte-identical across runs.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

from . import __version__
from .codec import TokenGrid, load_codec, read_tokens, save_codec, train_codec, write_tokens
from .config import _fmt_value
from .errors import NumericalError, ValidationError
from .model.core import ModelConfig, init_model_params, load_model, sequence_loss
from .numerics.gradcheck import check_gradients
from .pipeline import (
    build_codec_corpus,
    build_separation_layouts,
    evaluate,
    pretrain,
    prompt_relevance,
    read_triples,
    separate,
    simulate_triples,
    train_separation,
    write_report,
    write_triples,
)
from .rng import stream
from .runconfig import RunConfig, load_runconfig
from .sequence import PREFIX, build_continuation_layout, build_separation_layout
from .signal import read_wav, write_wav

VERSION_TAG = f"unisep-{__version__}"

# Fixed micro configuration for the finite-difference gradient audit:
# 5 codes x 1 stage + 6 specials = 11-way vocabulary at width 8.
GRADCHECK_CONFIG = ModelConfig(embed_dim=8, global_layers=1, local_layers=1,
                               heads=2, ff_dim=16, max_frames=16, n_q=1,
                               codebook_size=5)


def _apply_thread_cap() -> None:
    """UNISEP_THREADS caps worker parallelism for numba and child processes.

    BLAS pools initialized before this process started are not resized; on
    the single-core targets this package is sized for, every backend already
    runs one thread.
    """
    raw = os.environ.get("UNISEP_THREADS", "").strip()
    if not raw:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        raise ValidationError(f"UNISEP_THREADS must be an integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    try:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:  # pragma: no cover - stripped installs
        pass


def _prepare_out(args, cfg: RunConfig | None) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (out / "config.toml").write_text(cfg.canonical())
    return out


def _write_manifest(out: Path, command: str, cfg: RunConfig | None, seed,
                    t0: float, outputs: list, extra: dict | None = None) -> None:
    record = {
        "command": command,
        "config_hash": cfg.hash() if cfg is not None else "",
        "version": VERSION_TAG,
        "wall_time_s": round(time.time() - t0, 3),
        "seed": seed,
        "outputs": sorted(str(p) for p in outputs),
    }
    if extra:
        record.update(extra)
    (out / "run.json").write_text(json.dumps(record, indent=2,
                                             sort_keys=True) + "\n")


def _seed_for(args, config_seed: int) -> int:
    return config_seed if args.seed is None else args.seed


def _load_config(args) -> RunConfig:
    if not args.config:
        raise ValidationError("this command requires --config")
    return load_runconfig(args.config)


def _load_codec_checked(path, cfg: RunConfig):
    codec = load_codec(path)
    if codec.config != cfg.codec:
        raise ValidationError(
            f"codec checkpoint {path} was trained with a different [codec] "
            f"section than the supplied config")
    return codec


def _load_model_checked(path, cfg: RunConfig):
    store, model_config, step = load_model(path)
    if model_config != cfg.model:
        raise ValidationError(
            f"model checkpoint {path} was trained with a different [model] "
            f"section than the supplied config")
    return store, step


def cmd_train_codec(args) -> int:
    t0 = time.time()
    cfg = _load_config(args)
    seed = _seed_for(args, cfg.train.seed)
    corpus = build_codec_corpus(
        cfg.data, seed, items_per_family=cfg.train.codec_items_per_family,
        duration_s=cfg.train.codec_corpus_duration_s,
        mixture_items=cfg.train.codec_mixture_items)
    codec, log = train_codec(corpus, cfg.codec, steps=cfg.train.codec_steps,
                             batch_frames=cfg.train.codec_batch_frames,
                             base_lr=cfg.train.codec_lr, seed=seed)
    out = _prepare_out(args, cfg)
    save_codec(out / "codec.uspt", codec, step=cfg.train.codec_steps)
    (out / "history.json").write_text(json.dumps(
        {"loss_history": [float(v) for v in log.loss_history]},
        sort_keys=True) + "\n")
    _write_manifest(out, "train-codec", cfg, seed, t0,
                    ["codec.uspt", "history.json"],
                    {"corpus_items": len(corpus),
                     "final_loss": float(log.loss_history[-1])})
    print(f"trained codec on {len(corpus)} items for {cfg.train.codec_steps} "
          f"steps -> {out / 'codec.uspt'}")
    return 0


def cmd_tokenize(args) -> int:
    codec = load_codec(args.codec)
    grid = codec.tokenize(read_wav(args.inp))
    write_tokens(args.out, grid)
    print(f"{grid.num_frames} frames x {grid.n_q} stages -> {args.out}")
    return 0


def cmd_detokenize(args) -> int:
    codec = load_codec(args.codec)
    grid = read_tokens(args.inp)
    if (grid.n_q != codec.config.n_q
            or grid.codebook_size != codec.config.codebook_size):
        raise ValidationError(
            f"token file is {grid.n_q}x{grid.codebook_size} but the codec is "
            f"{codec.config.n_q}x{codec.config.codebook_size}")
    write_wav(args.out, codec.decode(grid))
    print(f"{grid.num_frames} frames -> {args.out}")
    return 0


def cmd_simulate(args) -> int:
    t0 = time.time()
    cfg = _load_config(args)
    seed = _seed_for(args, cfg.data.seed)
    triples = simulate_triples(args.n, cfg.data, seed)
    out = _prepare_out(args, cfg)
    write_triples(out, triples)
    _write_manifest(out, "simulate", cfg, seed, t0, ["manifest.jsonl"],
                    {"n_triples": len(triples)})
    print(f"simulated {len(triples)} triples -> {out / 'manifest.jsonl'}")
    return 0


def cmd_pretrain(args) -> int:
    t0 = time.time()
    cfg = _load_config(args)
    seed = _seed_for(args, cfg.train.seed)
    codec = _load_codec_checked(args.codec, cfg)
    corpus_seed = int(stream(seed, "pretrain-corpus").integers(2 ** 31))
    per_family = max(1, math.ceil(cfg.train.pretrain_items
                                  / len(cfg.data.families)))
    waves = build_codec_corpus(cfg.data, corpus_seed,
                               items_per_family=per_family,
                               duration_s=cfg.train.pretrain_duration_s,
                               mixture_items=cfg.train.pretrain_items // 8)
    store = init_model_params(cfg.model, seed)
    out = _prepare_out(args, cfg)
    log = pretrain(store, cfg.model, codec, waves, cfg.train, seed=seed,
                   out_dir=out)
    (out / "history.json").write_text(json.dumps(
        {"loss_history": [float(v) for v in log.loss_history],
         "task_history": log.task_history}, sort_keys=True) + "\n")
    _write_manifest(out, "pretrain", cfg, seed, t0,
                    ["model.uspt", "trainer.uspt", "history.json"],
                    {"steps": log.steps, "corpus_items": len(waves),
                     "final_loss": float(log.loss_history[-1])})
    print(f"pre-trained for {log.steps} steps on {len(waves)} items -> "
          f"{out / 'model.uspt'}")
    return 0


def cmd_train_sep(args) -> int:
    t0 = time.time()
    cfg = _load_config(args)
    seed = _seed_for(args, cfg.train.seed)
    codec = _load_codec_checked(args.codec, cfg)
    triples = read_triples(args.inp)
    layouts, skipped = build_separation_layouts(codec, cfg.model, triples,
                                                mode=cfg.train.mode)
    eval_layouts = None
    if args.eval_in:
        eval_triples = read_triples(args.eval_in)
        eval_layouts, _ = build_separation_layouts(codec, cfg.model,
                                                   eval_triples,
                                                   mode=cfg.train.mode)
    if args.init:
        store, _ = _load_model_checked(args.init, cfg)
    else:
        store = init_model_params(cfg.model, seed)
    out = _prepare_out(args, cfg)
    log = train_separation(store, cfg.model, codec, layouts, cfg.train,
                           seed=seed, eval_layouts=eval_layouts, out_dir=out,
                           skipped_items=skipped)
    (out / "history.json").write_text(json.dumps(
        {"loss_history": [float(v) for v in log.loss_history],
         "eval_history": [[s, float(v)] for s, v in log.eval_history]},
        sort_keys=True) + "\n")
    _write_manifest(out, "train-sep", cfg, seed, t0,
                    ["model.uspt", "trainer.uspt", "history.json"],
                    {"steps": log.steps, "trained_items": log.trained_items,
                     "skipped_items": log.skipped_items,
                     "init": str(args.init) if args.init else "scratch",
                     "final_loss": float(log.loss_history[-1])})
    print(f"trained {log.steps} steps on {log.trained_items} triples "
          f"({log.skipped_items} skipped) -> {out / 'model.uspt'}")
    return 0


def cmd_separate(args) -> int:
    t0 = time.time()
    cfg = _load_config(args)
    seed = _seed_for(args, cfg.sampling.seed)
    codec = _load_codec_checked(args.codec, cfg)
    store, _ = _load_model_checked(args.model, cfg)
    mixture = read_wav(args.mixture)
    prompt = read_wav(args.prompt)
    result = separate(store, cfg.model, codec, mixture, prompt,
                      sampling=cfg.sampling.sampling(), seed=seed,
                      attention_mode=cfg.train.mode,
                      max_new_frames=cfg.sampling.frame_cap)
    out = _prepare_out(args, cfg)
    write_wav(out / "separated.wav", result.waveform)
    _write_manifest(out, "separate", cfg, seed, t0, ["separated.wav"],
                    {"generated_frames": result.generated_frames,
                     "truncated": result.truncated})
    print(f"generated {result.generated_frames} frames "
          f"(truncated={result.truncated}) -> {out / 'separated.wav'}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.time()
    cfg = _load_config(args)
    seed = _seed_for(args, cfg.eval.seed)
    codec = _load_codec_checked(args.codec, cfg)
    store, _ = _load_model_checked(args.model, cfg)
    triples = read_triples(args.inp)
    if cfg.eval.max_items > 0:
        triples = triples[:cfg.eval.max_items]
    report = evaluate(store, cfg.model, codec, triples,
                      sampling=cfg.sampling.sampling(), seed=seed,
                      attention_mode=cfg.train.mode,
                      max_new_frames=cfg.sampling.frame_cap)
    out = _prepare_out(args, cfg)
    write_report(report, out)
    outputs = ["report.json", "report.csv"]
    extra = {"n_items": report.n, "win_rate": report.win_rate,
             "mean_output_distance": report.mean_output_distance,
             "mean_baseline_distance": report.mean_baseline_distance}
    if cfg.eval.prompt_swap:
        swap = prompt_relevance(store, cfg.model, codec, triples,
                                sampling=cfg.sampling.sampling(), seed=seed,
                                attention_mode=cfg.train.mode,
                                max_new_frames=cfg.sampling.frame_cap)
        (out / "prompt_swap.json").write_text(json.dumps(
            swap.to_json_dict(), indent=2, sort_keys=True) + "\n")
        outputs.append("prompt_swap.json")
        extra["flip_rate"] = swap.flip_rate
    _write_manifest(out, "eval", cfg, seed, t0, outputs, extra)
    print(f"evaluated {report.n} items: win rate {report.win_rate:.1%}, "
          f"output {report.mean_output_distance:.4f} vs baseline "
          f"{report.mean_baseline_distance:.4f} -> {out / 'report.json'}")
    return 0


def _gradcheck_layouts(config: ModelConfig):
    vocab = config.vocabulary()
    rng = stream(1, "gradcheck-tokens")

    def grid(frames):
        return TokenGrid(
            tokens=rng.integers(0, config.codebook_size,
                                size=(frames, config.n_q)),
            n_q=config.n_q, frame_hop_samples=160, sample_rate_hz=16000,
            codebook_size=config.codebook_size)

    return {
        "causal": build_continuation_layout(vocab, grid(4), 2, full_loss=True),
        "prefix": build_separation_layout(vocab, grid(1), grid(1), grid(2),
                                          mode=PREFIX),
    }


def cmd_gradcheck(args) -> int:
    t0 = time.time()
    config = GRADCHECK_CONFIG
    results = {}
    worst = 0.0
    passed = True
    for name, lay in _gradcheck_layouts(config).items():
        store = init_model_params(config, seed=1)
        report = check_gradients(
            lambda leaves: sequence_loss(lay, leaves, config),
            store.state_dict(), tolerance=args.tolerance)
        results[name] = report
        worst = max(worst, report.max_rel_err)
        passed = passed and report.passed
        print(f"[{name}] {report}")
    print(f"gradient audit {'PASS' if passed else 'FAIL'}: "
          f"max relative error {worst:.3e} (tolerance {args.tolerance:.0e})")
    if args.out:
        out = _prepare_out(args, None)
        (out / "gradcheck.json").write_text(json.dumps(
            {name: {"max_rel_err": rep.max_rel_err, "passed": rep.passed,
                    "per_param": rep.per_param}
             for name, rep in results.items()}, indent=2, sort_keys=True) + "\n")
        _write_manifest(out, "gradcheck", None, None, t0, ["gradcheck.json"],
                        {"passed": passed, "max_rel_err": worst})
    return 0 if passed else 3


def _config_key_listing() -> str:
    lines = ["config keys and defaults (TOML sections for --config):"]
    for section, body in RunConfig.defaults().to_sections().items():
        lines.append(f"  [{section}]")
        for key in sorted(body):
            lines.append(f"    {key} = {_fmt_value(body[key])}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unisep",
        description="Prompt-conditioned audio separation with a token "
                    "language model over a residual-vector-quantized codec.",
        epilog=_config_key_listing(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=VERSION_TAG)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, config=True, seed=True, out_dir=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", required=True,
                           help="TOML run configuration")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed this command uses")
        if out_dir:
            p.add_argument("--out", required=True,
                           help="output directory for artifacts and run.json")
        p.set_defaults(func=func)
        return p

    add("train-codec", cmd_train_codec,
        "train the RVQ codec on the synthetic corpus")

    p = sub.add_parser("tokenize", help="waveform -> token file")
    p.add_argument("--codec", required=True, help="codec checkpoint (.uspt)")
    p.add_argument("--in", dest="inp", required=True, help="input WAV")
    p.add_argument("--out", required=True, help="output token file (.utok)")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("detokenize", help="token file -> waveform")
    p.add_argument("--codec", required=True, help="codec checkpoint (.uspt)")
    p.add_argument("--in", dest="inp", required=True,
                   help="input token file (.utok)")
    p.add_argument("--out", required=True, help="output WAV")
    p.set_defaults(func=cmd_detokenize)

    p = add("simulate", cmd_simulate,
            "render (mixture, prompt, target) triples to a manifest")
    p.add_argument("--n", type=int, required=True, help="number of triples")

    p = add("pretrain", cmd_pretrain,
            "audio-only pre-training (continuation + inpaint)")
    p.add_argument("--codec", required=True, help="codec checkpoint (.uspt)")

    p = add("train-sep", cmd_train_sep,
            "train separation on a simulated triples manifest")
    p.add_argument("--codec", required=True, help="codec checkpoint (.uspt)")
    p.add_argument("--in", dest="inp", required=True,
                   help="triples directory or manifest")
    p.add_argument("--eval-in", default=None,
                   help="held-out triples for the periodic eval hook")
    p.add_argument("--init", default=None,
                   help="model checkpoint to initialize from (default scratch)")

    p = add("separate", cmd_separate, "separate one mixture given a prompt")
    p.add_argument("--codec", required=True, help="codec checkpoint (.uspt)")
    p.add_argument("--model", required=True, help="model checkpoint (.uspt)")
    p.add_argument("--mixture", required=True, help="mixture WAV")
    p.add_argument("--prompt", required=True, help="prompt WAV")

    p = add("eval", cmd_eval, "score separations against codec references")
    p.add_argument("--codec", required=True, help="codec checkpoint (.uspt)")
    p.add_argument("--model", required=True, help="model checkpoint (.uspt)")
    p.add_argument("--in", dest="inp", required=True,
                   help="triples directory or manifest")

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of model gradients")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="max allowed relative error (default 1e-4)")
    p.add_argument("--out", default=None,
                   help="optional directory for gradcheck.json")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
