"""Command-line entry point: ``nasalsi <command> [options]``.

Every command writes into ``<run-dir>/<command>/`` together with a
``repro.json`` record (seed, config hash, library versions).
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import shutil
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, dump_config, read_config
from .corpus import CorpusManifest, SyntheticSpec, child_domain, make_synthetic_corpus
from .dsp import Signal, highpass, resample_to_100hz, rms_envelope
from .errors import InsufficientSpeakers, InvalidArgument, NasalSIError, RunExists
from .evaluation import (
    ABLATION_CONFIGS,
    FoldSpec,
    SplitManifest,
    ablation_matrix,
    aggregate,
    echo_predictor,
    evaluate,
    make_folds,
    split_items,
)
from .features import export_feature_stack, extract_feature_stack
from .model import HEADS_FULL
from .pipeline import map_items, prepare_dataset
from .targets import (
    SMOOTHING_MS,
    combined_audio,
    normalize_dataset,
    prepare_targets,
    stats_to_dict,
    write_traces_csv,
)
from .trainer import finetune, predict, train

log = logging.getLogger("nasalsi")

COMMANDS = ("prepare", "features", "train", "finetune", "eval", "ablate", "trace", "split", "synth")


# ---------------------------------------------------------------------------
# Run directory and reproducibility record
# ---------------------------------------------------------------------------

def _open_run(args, command) -> Path:
    out = Path(args.run_dir) / command
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise RunExists(f"{out} already exists (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_repro(out: Path, command, args, cfg: RunConfig):
    record = {
        "command": command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")},
        "seed": args.seed,
        "config_hash": config_hash(cfg),
        "versions": {
            "nasalsi": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / "repro.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    (out / "config.txt").write_text(dump_config(cfg))


def _load_config(args) -> RunConfig:
    cfg = read_config(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, model=replace(cfg.model, seed=args.seed), train=replace(cfg.train, seed=args.seed))
    if cfg.model.n_layers != cfg.frontend.n_layers or cfg.model.input_dim != cfg.frontend.n_mels:
        raise InvalidArgument("model.n_layers/input_dim must match frontend.n_layers/n_mels")
    return cfg


def _manifest(args) -> CorpusManifest:
    if not args.manifest:
        raise InvalidArgument("--manifest is required for this command")
    m = CorpusManifest.read(args.manifest)
    m.validate(allow_egg=args.allow_egg)
    return m


def _records(manifest, ids=None):
    entries = manifest.entries if ids is None else [e for e in manifest.entries if e.utterance_id in ids]
    return [manifest.load_record(e) for e in entries]


def _dataset(args, cfg):
    records = _records(_manifest(args))
    return prepare_dataset(records, cfg.frontend, workers=args.workers)


def _split(speakers, fold, seed, split_file=None) -> SplitManifest:
    """Fold ``fold`` of the rotation design, or a proportional split for small speaker sets."""
    if split_file:
        spec = FoldSpec.from_dict(json.loads(Path(split_file).read_text()))
        return spec[fold]
    try:
        return make_folds(speakers, seed=seed)[fold]
    except InsufficientSpeakers:
        n = len(speakers)
        if n < 3:
            raise
        order = [sorted(speakers)[i] for i in np.random.default_rng(seed).permutation(n)]
        k = max(1, round(n * 3 / 14))
        order = order[fold * k:] + order[:fold * k]
        log.info("%d speakers: using proportional %d/%d/%d split", n, n - 2 * k, k, k)
        return SplitManifest(frozenset(order[2 * k:]), frozenset(order[k:2 * k]), frozenset(order[:k]))


def _heads_for(items, heads):
    return tuple(h for h in heads if all(h in it.targets for it in items))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = _load_config(args)
    out = _open_run(args, "synth")
    spec = SyntheticSpec(n_speakers=args.speakers, n_utterances=args.utterances,
                         seed=args.seed if args.seed is not None else 0)
    if args.child:
        spec = child_domain(spec)
    corpus = make_synthetic_corpus(spec, out)
    _write_repro(out, "synth", args, cfg)
    print(f"wrote {len(corpus.utterances)} utterances to {out / 'manifest.jsonl'}")


def cmd_prepare(args):
    cfg = _load_config(args)
    manifest = _manifest(args)
    out = _open_run(args, "prepare")
    records = _records(manifest)
    raw = map_items(prepare_targets, records, args.workers)
    normed, stats = normalize_dataset(raw)
    (out / "traces").mkdir()
    for rec, tr in zip(records, normed):
        write_traces_csv(out / "traces" / f"{rec.id}.csv", tr)
    (out / "norm_stats.json").write_text(json.dumps(stats_to_dict(stats), indent=2, sort_keys=True) + "\n")
    _write_repro(out, "prepare", args, cfg)
    print(f"prepared {len(records)} utterances into {out}")


def cmd_features(args):
    cfg = _load_config(args)
    manifest = _manifest(args)
    out = _open_run(args, "features")
    records = _records(manifest)

    def one(rec):
        stack = extract_feature_stack(combined_audio(rec.oral, rec.nasal), cfg.frontend)
        export_feature_stack(out / f"{rec.id}.nstk", stack)
        return stack.n_frames

    frames = map_items(one, records, args.workers)
    _write_repro(out, "features", args, cfg)
    print(f"extracted {len(frames)} feature stacks ({sum(frames)} frames) into {out}")


def cmd_split(args):
    cfg = _load_config(args)
    if args.manifest:
        speakers = _manifest(args).speakers
    else:
        speakers = [f"spk{i:02d}" for i in range(args.speakers)]
    seed = args.seed if args.seed is not None else 0
    spec = make_folds(speakers, seed=seed, n_folds=args.folds)
    out = _open_run(args, "split")
    (out / "folds.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    _write_repro(out, "split", args, cfg)
    for k, f in enumerate(spec.folds):
        print(f"fold {k}: train {len(f.train)} dev {len(f.dev)} test {len(f.test)}")
    print(f"repeated test speakers: {', '.join(spec.repeated_test_speakers) or 'none'}")


def cmd_train(args):
    cfg = _load_config(args)
    ds = _dataset(args, cfg)
    seed = args.seed if args.seed is not None else 0
    split = _split(sorted({it.speaker_id for it in ds.items}), args.fold or 0, seed, args.split)
    corpus, _ = split_items(ds.items, split)
    heads = _heads_for(ds.items, cfg.model.heads)
    out = _open_run(args, "train")
    params, history = train(replace(cfg.model, heads=heads), cfg.train, corpus)
    meta = {"frontend": asdict(cfg.frontend), "split": split.to_dict()}
    save_checkpoint(out / "model.ckpt", params, stats_to_dict(ds.stats), meta)
    history.write_csv(out / "history.csv")
    _write_repro(out, "train", args, cfg)
    print(f"best epoch {history.best_epoch}; checkpoint {out / 'model.ckpt'}")


def cmd_finetune(args):
    cfg = _load_config(args)
    if not args.checkpoint:
        raise InvalidArgument("--checkpoint (pretrained model) is required")
    pretrained, _ = load_checkpoint(args.checkpoint)
    ds = _dataset(args, cfg)
    seed = args.seed if args.seed is not None else 0
    split = _split(sorted({it.speaker_id for it in ds.items}), args.fold or 0, seed, args.split)
    corpus, _ = split_items(ds.items, split)
    out = _open_run(args, "finetune")
    params, history = finetune(pretrained, corpus, cfg.train)
    meta = {"frontend": asdict(cfg.frontend), "split": split.to_dict(), "pretrained": str(args.checkpoint)}
    save_checkpoint(out / "model.ckpt", params, stats_to_dict(ds.stats), meta)
    history.write_csv(out / "history.csv")
    _write_repro(out, "finetune", args, cfg)
    print(f"best epoch {history.best_epoch}; checkpoint {out / 'model.ckpt'}")


def _predictor(spec):
    if spec == "@echo":
        return echo_predictor
    params, _ = load_checkpoint(spec)
    return params


def cmd_eval(args):
    cfg = _load_config(args)
    if not args.checkpoint:
        raise InvalidArgument("--checkpoint is required (a path, or @echo for the ground-truth stub)")
    model = _predictor(args.checkpoint)
    ds = _dataset(args, cfg)
    items = ds.items
    if args.fold is not None:
        seed = args.seed if args.seed is not None else 0
        split = _split(sorted({it.speaker_id for it in items}), args.fold, seed, args.split)
        items = [it for it in items if it.speaker_id in split.test]
    out = _open_run(args, "eval")
    scores = evaluate(model, items)
    report = aggregate([scores])
    report.write_aggregate_csv(out / "scores.csv")
    with open(out / "pooled.json", "w") as fh:
        json.dump({"utterance_mean": scores.ppmc, "pooled": scores.pooled, "excluded": scores.excluded,
                   "n_utterances": scores.n_utterances}, fh, indent=2, sort_keys=True)
    _write_repro(out, "eval", args, cfg)
    for h in HEADS_FULL:
        if h in scores.ppmc:
            print(f"{h:8s} PPMC {scores.ppmc[h]:.4f}")


def cmd_ablate(args):
    cfg = _load_config(args)
    ds = _dataset(args, cfg)
    seed = args.seed if args.seed is not None else 0
    split = _split(sorted({it.speaker_id for it in ds.items}), args.fold or 0, seed, args.split)
    corpus, test = split_items(ds.items, split)
    out = _open_run(args, "ablate")
    table = ablation_matrix(corpus, test, cfg.model, cfg.train, ABLATION_CONFIGS)
    table.write_csv(out / "ablation.csv")
    _write_repro(out, "ablate", args, cfg)
    header, body = table.as_table()
    print("  ".join(f"{c:>16s}" for c in header))
    for row in body:
        print("  ".join(f"{c:>16s}" for c in row))


# ---------------------------------------------------------------------------
# trace: figure data and a static SVG
# ---------------------------------------------------------------------------

def log_spectrogram(sig: Signal, window_ms=25.0, hop_ms=10.0):
    """Log-magnitude STFT frames (display only). Returns (times, freqs, frames x bins)."""
    fs = sig.sample_rate_hz
    win = int(round(fs * window_ms / 1000))
    hop = int(round(fs * hop_ms / 1000))
    x = sig.samples
    n = max(1, 1 + (len(x) - win) // hop) if len(x) >= win else 1
    x = np.pad(x, (0, max(0, win - len(x))))
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n] * np.hanning(win)
    n_fft = 1 << (win - 1).bit_length()
    mag = np.abs(np.fft.rfft(frames, n_fft, axis=1))
    times = (np.arange(n) * hop + win / 2) / fs
    return times, np.fft.rfftfreq(n_fft, 1 / fs), np.log(mag + 1e-10)


def _write_csv(path, header, columns):
    cols = [np.asarray(c) for c in columns]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _polyline(xs, ys, x0, y0, w, h, t_max, lo, hi, color):
    span = (hi - lo) or 1.0
    t_max = t_max or 1.0
    pts = " ".join(f"{x0 + w * x / t_max:.1f},{y0 + h * (1 - (y - lo) / span):.1f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>'


def render_trace_svg(panels, duration_s, width=900, row_h=110):
    """Stacked panels; each is (title, kind, data). ``kind`` is 'lines' or 'image'."""
    left, pad = 70, 18
    height = len(panels) * (row_h + pad) + pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    w = width - left - 20
    for i, (title, kind, data) in enumerate(panels):
        y0 = pad + i * (row_h + pad)
        parts.append(f'<text x="4" y="{y0 + 12}">{title}</text>')
        parts.append(f'<rect x="{left}" y="{y0}" width="{w}" height="{row_h}" fill="none" stroke="#999"/>')
        if kind == "image":
            img = data
            lo, hi = float(img.min()), float(img.max())
            nt, nf = img.shape
            cw, ch = w / nt, row_h / nf
            for a in range(nt):
                for b in range(nf):
                    g = int(255 * (1 - (img[a, b] - lo) / ((hi - lo) or 1.0)))
                    parts.append(f'<rect x="{left + a * cw:.1f}" y="{y0 + row_h - (b + 1) * ch:.1f}" '
                                 f'width="{cw + 0.5:.1f}" height="{ch + 0.5:.1f}" fill="rgb({g},{g},{g})"/>')
        else:
            lo = min(float(np.min(y)) for _, y, _, _ in data)
            hi = max(float(np.max(y)) for _, y, _, _ in data)
            for k, (xs, ys, color, label) in enumerate(data):
                parts.append(_polyline(xs, ys, left, y0, w, row_h, duration_s, lo, hi, color))
                parts.append(f'<text x="{left + w - 120}" y="{y0 + 12 + 12 * k}" fill="{color}">{label}</text>')
    parts.append(f'<text x="{left}" y="{height - 3}">time (s), 0 to {duration_s:.2f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _minmax_decimate(x, n_out):
    n_out = max(1, min(n_out, len(x)))
    edges = np.linspace(0, len(x), n_out + 1).astype(int)
    return np.array([x[a:b].max() if b > a else 0.0 for a, b in zip(edges[:-1], edges[1:])])


def cmd_trace(args):
    cfg = _load_config(args)
    if not args.checkpoint:
        raise InvalidArgument("--checkpoint is required")
    manifest = _manifest(args)
    ids = [e.utterance_id for e in manifest.entries]
    if args.utterance not in ids:
        raise InvalidArgument(f"utterance {args.utterance!r} not in manifest")
    # targets are normalized with the whole dataset, as in training
    ds = prepare_dataset(_records(manifest), cfg.frontend, workers=args.workers)
    k = ids.index(args.utterance)
    item, rec = ds.items[k], _records(manifest, {args.utterance})[0]
    params, _ = load_checkpoint(args.checkpoint)
    columns = {"vp_pred": predict(params, [item])[0]["vp"]}
    if args.finetuned_checkpoint:
        ft, _ = load_checkpoint(args.finetuned_checkpoint)
        columns["vp_pred_ft"] = predict(ft, [item])[0]["vp"]
    gt = item.targets["vp"]
    t = np.arange(len(gt)) / 100.0

    out = _open_run(args, "trace")
    _write_csv(out / "trace.csv", ["t_s", "nasalance_gt", *columns], [t, gt, *columns.values()])

    # far-field audio is unavailable; the combined model input stands in for it
    audio = combined_audio(rec.oral, rec.nasal)
    ta = np.arange(len(audio.samples)) / audio.sample_rate_hz
    _write_csv(out / "waveform.csv", ["t_s", "combined"], [ta, audio.samples])
    st, sf, spec = log_spectrogram(audio)
    with open(out / "spectrogram.csv", "w") as fh:
        fh.write("t_s," + ",".join(f"{f:.1f}" for f in sf) + "\n")
        for ti, row in zip(st, spec):
            fh.write(f"{ti!r}," + ",".join(f"{v:.5f}" for v in row) + "\n")
    envs = []
    for ch in (rec.oral, rec.nasal):
        envs.append(resample_to_100hz(rms_envelope(highpass(ch, rec.cutoff_hz), SMOOTHING_MS)).values)
    n = min(map(len, envs))
    _write_csv(out / "envelopes.csv", ["t_s", "oral_env", "nasal_env"],
               [np.arange(n) / 100.0, envs[0][:n], envs[1][:n]])

    dur = audio.duration_s
    n_cols = min(180, len(st))
    tbin = np.linspace(0, len(st), n_cols + 1).astype(int)
    fbin = np.linspace(0, spec.shape[1], 49).astype(int)
    coarse = np.array([[spec[a:b, c:d].mean() for c, d in zip(fbin[:-1], fbin[1:])]
                       for a, b in zip(tbin[:-1], tbin[1:]) if b > a])
    wave = _minmax_decimate(np.abs(audio.samples), 900)
    traces = [(t, gt, "black", "ground truth")]
    colors = {"vp_pred": "#d62728", "vp_pred_ft": "#1f77b4"}
    traces += [(t, v, colors[name], name) for name, v in columns.items()]
    panels = [
        ("waveform*", "lines", [(np.linspace(0, dur, len(wave)), wave, "#444", "|combined|")]),
        ("spectrogram*", "image", coarse),
        ("oral env", "lines", [(np.arange(n) / 100.0, envs[0][:n], "#2ca02c", "oral")]),
        ("nasal env", "lines", [(np.arange(n) / 100.0, envs[1][:n], "#9467bd", "nasal")]),
        ("nasalance", "lines", traces[:1]),
        ("estimates", "lines", traces),
    ]
    (out / "trace.svg").write_text(render_trace_svg(panels, dur))
    (out / "NOTE.txt").write_text("* waveform and spectrogram use the combined oral+nasal signal "
                                  "in place of a far-field microphone.\n")
    _write_repro(out, "trace", args, cfg)
    print(f"trace for {args.utterance} written to {out}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="corpus manifest (JSON lines)")
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--run-dir", default="runs", help="output root (default: runs)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--checkpoint")
    common.add_argument("--fold", type=int, default=None)
    common.add_argument("--split", help="folds.json written by the split command")
    common.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    common.add_argument("--allow-egg", action="store_true", help="accept child entries that list EGG")
    common.add_argument("--workers", type=int, default=1, help="utterance-level worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nasalsi", description="Nasalance speech-inversion toolkit")
    p.add_argument("--version", action="version", version=f"nasalsi {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    add("prepare", cmd_prepare, "compute normalized target traces")
    add("features", cmd_features, "extract feature stacks")
    add("train", cmd_train, "train a model on one fold")
    add("finetune", cmd_finetune, "fine-tune a pretrained model on EGG-free data")
    add("eval", cmd_eval, "score a checkpoint (or @echo)")
    add("ablate", cmd_ablate, "train the four head-subset configurations")
    sp = add("trace", cmd_trace, "export figure data for one utterance")
    sp.add_argument("utterance")
    sp.add_argument("--finetuned-checkpoint")
    sp = add("split", cmd_split, "write speaker-independent folds")
    sp.add_argument("--speakers", type=int, default=14)
    sp.add_argument("--folds", type=int, default=5)
    sp = add("synth", cmd_synth, "generate a synthetic corpus")
    sp.add_argument("--speakers", type=int, default=14)
    sp.add_argument("--utterances", type=int, default=15, help="per speaker")
    sp.add_argument("--child", action="store_true", help="child-like domain without EGG")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("train", "finetune", "eval", "trace") and args.fold is not None and args.fold < 0:
        print("error: --fold must be non-negative", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except NasalSIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
