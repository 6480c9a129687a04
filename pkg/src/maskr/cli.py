"""Command-line entry points: ``maskr <command> [--config run.cfg] [flags]``.

Every command reads a flat ``key = value`` run config; flags override it.
All randomness derives from ``--seed``.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import sys
from pathlib import Path

from . import dsp
from .codec import CodebookSet, CodecConfig, encode_clip, train_codec, write_codegram
from .config import RunConfig, dump_run_config, load_run_config
from .data import DatasetManifest, build_examples, write_corpus
from .errors import MaskrError
from .masked_lm import RestorerModel, train_restorer
from .metrics import HeldOutItem, bench_decode, evaluate, summarize, sweep_guidance, write_csv
from .sampler import DecodeConfig, decode_windows

log = logging.getLogger("maskr")

# offsets keep the per-stage random streams apart while deriving from one seed
CODEC_SEED, EXAMPLE_SEED, TRAIN_SEED = 1, 2, 3


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fp:
        for chunk in iter(lambda: fp.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path, what, hint):
    if not os.path.exists(path):
        raise MaskrError(f"{what} not found at {path}; {hint}")


def _manifest(cfg: RunConfig, split):
    path = os.path.join(cfg.data_dir, f"{split}.jsonl")
    _require(path, f"{split} manifest", "run `maskr synth-data` first")
    return DatasetManifest.load(path)


def _codec(cfg: RunConfig):
    _require(cfg.codec_path, "codec checkpoint", "run `maskr train-codec` first")
    return CodebookSet.load(cfg.codec_path)


def _model(cfg: RunConfig, codec):
    _require(cfg.model_path, "restorer checkpoint", "run `maskr train-restorer` first")
    return RestorerModel.load(cfg.model_path, codec)


def _decode_cfg(cfg: RunConfig, **over):
    d = DecodeConfig(iterations=cfg.iterations, guidance=cfg.guidance,
                     noise_var_start=cfg.noise_var_start, temperature=cfg.temperature, seed=cfg.seed)
    return dataclasses.replace(d, **over) if over else d


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _out(cfg: RunConfig, name):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(cfg: RunConfig, args):
    mc = cfg.model_config()
    counts = {"train": cfg.num_train, "dev": cfg.num_dev, "test": cfg.num_test}
    write_corpus(cfg.data_dir, counts, cfg.seed, mc.sample_rate, cfg.clip_seconds)
    print(f"wrote {sum(counts.values())} clips to {cfg.data_dir}")


def codec_config(cfg: RunConfig) -> CodecConfig:
    mc = cfg.model_config()
    return CodecConfig(num_codebooks=mc.num_codebooks, codebook_size=mc.codebook_size,
                       latent_dim=mc.codec_latent_dim, window=mc.window, hop=mc.hop,
                       sample_rate=mc.sample_rate, iterations=cfg.codec_iterations,
                       seed=cfg.seed + CODEC_SEED)


def cmd_train_codec(cfg: RunConfig, args):
    man = _manifest(cfg, "train")
    ccfg = codec_config(cfg)
    if man.sample_rate != ccfg.sample_rate:
        raise MaskrError(f"corpus is {man.sample_rate} Hz but the preset expects {ccfg.sample_rate} Hz")
    codec = train_codec(man.clean_clips(), ccfg)
    Path(cfg.codec_path).parent.mkdir(parents=True, exist_ok=True)
    codec.save(cfg.codec_path)
    print(f"codec saved to {cfg.codec_path}")


def cmd_train_restorer(cfg: RunConfig, args):
    codec = _codec(cfg)
    model = RestorerModel(cfg.model_config(), codec)
    history = []
    if cfg.steps > 0:
        man = _manifest(cfg, "train")
        examples = build_examples(man.clean_clips(), model, codec, cfg.variants,
                                  seed=cfg.seed + EXAMPLE_SEED)
        history = train_restorer(model, examples, cfg.steps, cfg.batch_size, cfg.lr,
                                 seed=cfg.seed + TRAIN_SEED, log_every=cfg.log_every)
    Path(cfg.model_path).parent.mkdir(parents=True, exist_ok=True)
    model.save(cfg.model_path)
    if history:
        write_csv(_out(cfg, "train_loss.csv"), ["step", "loss"],
                  [{"step": i + 1, "loss": v} for i, v in enumerate(history)])
        if cfg.figures:
            from .report import plot_loss
            plot_loss(history, _out(cfg, "train_loss.png"))
    print(f"restorer saved to {cfg.model_path} (sha256 {file_sha256(cfg.model_path)[:16]})")


def cmd_restore(cfg: RunConfig, args):
    codec = _codec(cfg)
    model = _model(cfg, codec)
    _require(args.input, "input audio", "pass an existing WAV file")
    clip = dsp.read_wav(args.input)
    sr = model.cfg.sample_rate
    audio, cg = decode_windows(model, codec, dsp.resample(clip, sr), cfg.window_seconds,
                               _decode_cfg(cfg), cfg.decoder, cfg.griffin_lim_iters)
    audio = dsp.resample(audio, clip.sample_rate)
    dsp.write_wav(args.output, audio)
    if args.codegram:
        write_codegram(args.codegram, cg)
    print(f"restored {clip.duration:.2f}s -> {audio.duration:.2f}s, wrote {args.output}")


def _test_items(cfg: RunConfig, codec, split="test"):
    man = _manifest(cfg, split)
    items = []
    for e in man.entries:
        if e.corrupted_path is None:
            continue
        clean = dsp.read_wav(man.path(e.clean_path))
        tag = "bandlimited" if e.recipe is not None and e.recipe.cutoff_hz is not None else "other"
        items.append(HeldOutItem(clean, dsp.read_wav(man.path(e.corrupted_path)),
                                 encode_clip(clean, codec).tokens, tag))
    if not items:
        raise MaskrError(f"{split} manifest has no corrupted clips")
    return items


def cmd_evaluate(cfg: RunConfig, args):
    codec = _codec(cfg)
    model = _model(cfg, codec)
    report = evaluate(model, codec, _test_items(cfg, codec, args.split), _decode_cfg(cfg),
                      cfg.decoder, cfg.window_seconds, cfg.griffin_lim_iters)
    path = _out(cfg, "eval.csv")
    report.to_csv(path)
    rows = []
    for tag in (None, "bandlimited", "other"):
        s = summarize(report, tag)
        if s["n"]:
            rows.append({"subset": tag or "all", **s})
    write_csv(_out(cfg, "eval_summary.csv"), list(rows[0]), rows)
    if cfg.figures:
        from .report import plot_evaluation
        plot_evaluation(report, _out(cfg, "eval.png"))
    for r in rows:
        print(f"{r['subset']:>12}: n={r['n']} lsd corrupted {r['lsd_corrupted']:.4f} "
              f"restored {r['lsd_restored']:.4f}")
    print(f"wrote {path}")


def cmd_bench_decode(cfg: RunConfig, args):
    codec = _codec(cfg)
    model = _model(cfg, codec)
    decoders = args.decoders.split(",") if args.decoders else ["parallel", "hierarchical", "ar"]
    report = bench_decode(model, _floats(cfg.bench_lengths), decoders, cfg.bench_repeats,
                          _decode_cfg(cfg))
    path = _out(cfg, "bench.csv")
    report.to_csv(path)
    if cfg.figures:
        from .report import plot_bench
        plot_bench(report, _out(cfg, "bench.png"))
    for r in report.rows:
        print(f"{r['decoder']:>12} {r['length_s']:5.1f}s  {r['runtime_s']:8.3f}s  sweeps {r['sweeps']}")
    print(f"wrote {path}")


def cmd_sweep_guidance(cfg: RunConfig, args):
    codec = _codec(cfg)
    model = _model(cfg, codec)
    items = _test_items(cfg, codec, args.split)
    if args.limit:
        items = items[: args.limit]
    report = sweep_guidance(model, codec, items, _floats(cfg.guidance_grid), _decode_cfg(cfg),
                            cfg.decoder, cfg.window_seconds, cfg.griffin_lim_iters)
    path = _out(cfg, "guidance.csv")
    report.to_csv(path)
    if cfg.figures:
        from .report import plot_guidance
        plot_guidance(report, _out(cfg, "guidance.png"))
    print(f"wrote {path}")


# ---------------------------------------------------------------------------
# argument parsing

# flag -> RunConfig key, shared by every command
_COMMON = {
    "--seed": ("seed", int, "global seed; every random stream derives from it"),
    "--data-dir": ("data_dir", str, "corpus directory holding the split manifests"),
    "--codec": ("codec_path", str, "codec checkpoint path"),
    "--model": ("model_path", str, "restorer checkpoint path"),
    "--out-dir": ("out_dir", str, "directory for CSV reports and figures"),
    "--preset": ("preset", str, "model preset (tiny, masksr-s, masksr-m)"),
    "--frontend": ("frontend", str, "stft, waveform or codec_tokens"),
    "--objective": ("objective", str, "masksr, soundstorm or ar"),
    "--sample-rate": ("sample_rate", int, "working sample rate in Hz (0 = preset)"),
    "--window": ("window", int, "STFT window in samples, a power of two (0 = preset)"),
    "--hop": ("hop", int, "STFT hop in samples (0 = preset)"),
}

_DECODE = {
    "--iterations": ("iterations", int, "parallel decoding iterations"),
    "--guidance": ("guidance", float, "classifier-free guidance weight w"),
    "--decoder": ("decoder", str, "parallel, hierarchical or ar"),
    "--temperature": ("temperature", float, "sampling temperature (0 = argmax)"),
    "--window-seconds": ("window_seconds", float, "length of the independently decoded windows"),
    "--gl-iters": ("griffin_lim_iters", int, "Griffin-Lim iterations"),
}

_COMMANDS = {
    "synth-data": (cmd_synth_data, "synthesize a speech-like corpus and split manifests", {
        "--num-train": ("num_train", int, "training clips"),
        "--num-dev": ("num_dev", int, "dev clips"),
        "--num-test": ("num_test", int, "test clips"),
        "--clip-seconds": ("clip_seconds", float, "clip duration in seconds"),
    }),
    "train-codec": (cmd_train_codec, "fit the residual vector quantizer on the training split", {
        "--codec-iterations": ("codec_iterations", int, "k-means iterations per stage"),
    }),
    "train-restorer": (cmd_train_restorer, "train the restoration language model", {
        "--steps": ("steps", int, "optimizer steps (0 writes an untrained checkpoint)"),
        "--batch-size": ("batch_size", int, "examples per step"),
        "--lr": ("lr", float, "Adam learning rate"),
        "--variants": ("variants", int, "corrupted copies per clean clip"),
        "--log-every": ("log_every", int, "steps between loss log lines"),
    }),
    "restore": (cmd_restore, "restore one WAV file", _DECODE),
    "evaluate": (cmd_evaluate, "LSD and token accuracy on the held-out split", _DECODE),
    "bench-decode": (cmd_bench_decode, "wall-clock decode benchmark per decoder and length", {
        **_DECODE,
        "--lengths": ("bench_lengths", str, "comma-separated clip lengths in seconds"),
        "--repeats": ("bench_repeats", int, "timed runs per setting"),
    }),
    "sweep-guidance": (cmd_sweep_guidance, "evaluate over a grid of guidance weights", {
        **_DECODE,
        "--grid": ("guidance_grid", str, "comma-separated guidance weights"),
    }),
}


def _add_flags(p, flags):
    for flag, (key, typ, help_) in flags.items():
        p.add_argument(flag, dest=key, type=typ, default=None, help=help_)


def build_parser():
    parser = argparse.ArgumentParser(prog="maskr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_, flags) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="run config file (key = value lines)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        _add_flags(p, _COMMON)
        _add_flags(p, flags)
        p.add_argument("--no-figures", dest="figures", action="store_const", const=False,
                       default=None, help="skip rendering PNG figures")
        if name == "restore":
            p.add_argument("input", help="corrupted WAV")
            p.add_argument("output", help="restored WAV to write")
            p.add_argument("--codegram", help="also write the decoded codegram here")
        if name in ("evaluate", "sweep-guidance"):
            p.add_argument("--split", default="test", choices=("dev", "test"))
        if name == "sweep-guidance":
            p.add_argument("--limit", type=int, default=0, help="use only the first N clips")
        if name == "bench-decode":
            p.add_argument("--decoders", default="", help="comma-separated subset of decoders")
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    keys = {f.name for f in dataclasses.fields(RunConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in keys}
    try:
        cfg = load_run_config(args.config, overrides)
        cfg.model_config()  # validates preset, frontend, objective and geometry early
        log.debug("run config:\n%s", dump_run_config(cfg))
        args.func(cfg, args)
    except (MaskrError, OSError) as exc:
        print(f"maskr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
