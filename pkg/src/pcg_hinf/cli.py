"""pcg-hinf command line: preprocess, train, evaluate, synth.

Exit codes: 0 success, 1 internal fault, 2 input/layout error,
3 validation or data-degeneracy error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import THREADS_ENV, ConfigError, default_threads, dump_config, load_config
from .data_io import (SPLITS, DataError, DataValidationError, DatasetManifest, SyntheticSpec,
                      ingest_directory, load_wav, patient_split, synthesize_dataset,
                      write_dataset, write_wav)
from .features_mel import MelConfig
from .model import (HInfCnnLstm, ModelConfig, ModelConfigError, model_from_checkpoint,
                    shape_report, transfer_and_freeze)
from .pipeline import DspConfig, build_clipset
from .report import (learning_curves, preprocessing_figure, spectrum_figure, write_csv,
                     write_json)
from .signal_dsp import SignalError, fft_magnitude, preprocess_recording
from .training import REPORT_COLUMNS, TrainingError, evaluate_scores, predict_proba, recording_scores, train

log = logging.getLogger("pcg_hinf")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_VALIDATION = 0, 1, 2, 3
CHECKPOINT_NAME = "model.ckpt"


class UsageError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def _prepare_out(out, force=True) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if not force and out.exists() and any(out.iterdir()):
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        raise UsageError(f"input directory {in_dir} does not exist")
    wavs = sorted(in_dir.glob("*.wav"))
    if not wavs:
        raise UsageError(f"no records found in {in_dir}")
    dsp = DspConfig(args.levels, args.order, args.cutoff, args.clip_seconds, args.shrinkage)
    problems = dsp.problems()
    if problems:
        raise ConfigError(problems)
    out = _prepare_out(args.out)
    labels = {}
    if (in_dir / "REFERENCE.csv").exists():
        labels = {e.record_id: e for e in ingest_directory(in_dir)}

    rows, failures, ref_rows, pat_rows = [], [], [], []
    for path in wavs:
        rec = path.stem
        try:
            raw = load_wav(path)
            den, filt, clips = preprocess_recording(raw, dsp.dwt_levels, dsp.filter_order,
                                                    dsp.cutoff_hz, dsp.clip_seconds, dsp.shrinkage)
        except (DataError, SignalError) as exc:
            failures.append(f"{path.name}: {exc}")
            continue
        entry = labels.get(rec)
        for k, clip in enumerate(clips):
            clip_id = f"{rec}_clip{k:02d}"
            write_wav(out / f"{clip_id}.wav", clip)
            if entry is not None:
                ref_rows.append((clip_id, "1" if entry.label else "-1"))
                pat_rows.append((clip_id, entry.patient_id))
        rows.append({"record_id": rec, "label": "" if entry is None else entry.label,
                     "n_samples": len(raw), "n_clips": len(clips), "rms_raw": _rms(raw.samples),
                     "rms_denoised": _rms(den.samples), "rms_filtered": _rms(filt.samples)})
        if args.emit_fft:
            for tag, w in (("raw", raw), ("filtered", filt)):
                f, m = fft_magnitude(w)
                write_csv(out / f"{rec}_fft_{tag}.csv", zip(f, m), ["frequency_hz", "magnitude"])
            if args.plots:
                spectrum_figure(out / f"{rec}_fft.svg", fft_magnitude(raw), fft_magnitude(filt))
        if args.plots:
            preprocessing_figure(out / f"{rec}_stages.svg", raw, den, filt)

    write_csv(out / "summary.csv", rows, ["record_id", "label", "n_samples", "n_clips", "rms_raw",
                                          "rms_denoised", "rms_filtered"])
    if ref_rows:
        # header-less, so the clip directory is itself ingestible
        write_csv(out / "REFERENCE.csv", ref_rows, ["record_id", "label"], header=False)
        write_csv(out / "PATIENTS.csv", pat_rows, ["record_id", "patient_id"], header=False)
    print(f"preprocessed {len(rows)} records into {sum(r['n_clips'] for r in rows)} clips -> {out}")
    for msg in failures:
        print(f"error: {msg}", file=sys.stderr)
    return EXIT_INPUT if failures else EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_overrides(args) -> list:
    out = list(args.set or [])
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    if args.out is not None:
        out.append(f"out={args.out}")
    for flag, key in (("data", "data.dir"), ("epochs", "train.epochs"), ("batch_size", "train.batch_size"),
                      ("lr", "train.lr"), ("loss", "train.loss"), ("threshold", "train.threshold"),
                      ("cell_mode", "model.cell_mode"), ("threads", "threads")):
        val = getattr(args, flag, None)
        if val is not None:
            out.append(f"{key}={val}")
    return out


def _load_dataset(cfg, out: Path):
    """Entries from data.dir, or from a synthetic set materialised under <out>/dataset."""
    if cfg.data.synthetic is not None:
        ds_dir = out / "dataset"
        if ds_dir.exists():
            shutil.rmtree(ds_dir)
        entries, waves, _ = synthesize_dataset(cfg.data.synthetic)
        write_dataset(ds_dir, entries, waves)
        return ingest_directory(ds_dir)
    return ingest_directory(cfg.data.dir)


def _checkpoint_meta(model, cfg, tau, mel: MelConfig, dsp: DspConfig) -> dict:
    meta = model.state_meta()
    meta.update({"tau": tau, "mel_config": asdict(mel), "mel_fingerprint": mel.fingerprint(),
                 "dsp_config": dsp.to_dict(), "seed": cfg.seed})
    return meta


def cmd_train(args) -> int:
    cfg = load_config(args.config, _train_overrides(args))
    if cfg.data.synthetic is None and cfg.data.dir is None:
        raise ConfigError(["data: set data.dir or data.synthetic"])
    # the model is built first so a bad --fine-tune-from fails before any data work
    if args.fine_tune_from:
        arrays, meta = ad.load_checkpoint(args.fine_tune_from)
        model = transfer_and_freeze(arrays, meta, cfg.model, seed=cfg.seed)
    else:
        model = HInfCnnLstm(cfg.model, seed=cfg.seed)
    out = _prepare_out(cfg.out)
    dump_config(cfg, out / "resolved_config.yaml")
    (out / "shapes.txt").write_text("\n".join(shape_report(cfg.model).lines()) + "\n")

    entries = _load_dataset(cfg, out)
    manifest = patient_split(entries, cfg.data.test_ratio, cfg.data.val_per_class, cfg.seed)
    manifest.save(out / "manifest.json")
    cache = out / "cache" if cfg.data.cache else None
    data = {s: build_clipset(manifest.records(s), cfg.mel, cfg.dsp, cache_dir=cache, threads=cfg.threads)
            for s in SPLITS}
    for s in ("train", "val"):
        if len(data[s]) == 0:
            raise DataValidationError(f"{s} split is empty")
    log.info("clips: %s", {s: len(c) for s, c in data.items()})

    report = train(model, data, cfg.train, cfg.pwl, cfg.sapt, seed=cfg.seed, threads=cfg.threads)
    ad.save_checkpoint(out / CHECKPOINT_NAME, model.state_arrays(),
                       _checkpoint_meta(model, cfg, report.final_tau, cfg.mel, cfg.dsp))
    write_csv(out / "report.csv", report.rows, REPORT_COLUMNS)
    metrics = report.metrics_json()
    metrics["split_counts"] = manifest.class_counts
    metrics["clip_counts"] = {s: len(c) for s, c in data.items()}
    write_json(out / "metrics.json", metrics)
    learning_curves(out, report.rows)
    v = report.validation
    print(f"trained {len(report.rows)} epochs; tau {report.final_tau:.2f}; val f1 {v['f1']:.4f} "
          f"acc {v['accuracy']:.4f} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    try:
        arrays, meta = ad.load_checkpoint(args.checkpoint)
    except (OSError, ad.CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}")
    ck_mel = MelConfig(**meta["mel_config"])
    if ck_mel.fingerprint() != meta.get("mel_fingerprint"):
        raise DataValidationError("checkpoint mel fingerprint does not match its stored mel config")
    dsp = DspConfig(**meta.get("dsp_config", {}))
    mel = ck_mel
    if args.config:
        run_cfg = load_config(args.config, check_paths=False)
        if run_cfg.mel.fingerprint() != ck_mel.fingerprint():
            raise DataValidationError(
                f"config mel fingerprint {run_cfg.mel.fingerprint()} does not match "
                f"checkpoint fingerprint {ck_mel.fingerprint()}")
        dsp = run_cfg.dsp

    entries = ingest_directory(args.data)
    if args.manifest:
        manifest = DatasetManifest.load(args.manifest)
        wanted = {r for r, s in manifest.split_assignment.items() if s == args.split}
        entries = [e for e in entries if e.record_id in wanted]
        if not entries:
            raise DataValidationError(f"no records of split {args.split!r} found in {args.data}")
    clips = build_clipset(entries, mel, dsp, threads=args.threads or default_threads())
    if len(set(clips.y.tolist())) < 2:
        raise DataValidationError(
            f"evaluation set has a single class ({sorted(set(clips.y.tolist()))}); F1 is undefined")

    model = model_from_checkpoint(arrays, meta)
    tau = float(meta["tau"]) if args.tau is None else args.tau
    if not 0 <= tau <= 1:
        raise DataValidationError(f"--tau must lie in [0, 1], got {tau}")
    scores = predict_proba(model, clips.X, 64, args.threads or default_threads())
    _, rprobs, rlabels = recording_scores(scores, clips.record_ids, clips.record_labels)
    result = {"tau": tau, "clip": evaluate_scores(scores, clips.y, tau),
              "recording": evaluate_scores(rprobs, rlabels, tau),
              "n_clips": len(clips), "n_records": len(rlabels)}
    # flat copy of the clip-level numbers for quick consumption
    for k in ("f1", "accuracy", "sensitivity", "specificity", "precision"):
        result[k] = result["clip"][k]
    if args.out:
        out = _prepare_out(args.out)
        write_json(out / "eval_metrics.json", result)
    if args.json:
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        print(f"tau {tau:.2f}  clip f1 {result['f1']:.4f} acc {result['accuracy']:.4f} "
              f"sens {result['sensitivity']:.4f} spec {result['specificity']:.4f}  "
              f"recording f1 {result['recording']['f1']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_normal=args.n_normal, n_abnormal=args.n_abnormal,
                         duration_s=tuple(args.duration), seed=args.seed if args.seed is not None else 0)
    problems = spec.problems()
    if problems:
        raise ConfigError(problems)
    if args.out is None:
        raise UsageError("synth needs --out")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    entries, waves, _ = synthesize_dataset(spec)
    write_dataset(out, entries, waves)
    n_abn = sum(e.label for e in entries)
    print(f"wrote {len(entries)} recordings ({len(entries) - n_abn} normal, {n_abn} abnormal) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # a subparser from clobbering a value given at the top level
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML run configuration")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help=f"worker threads (default from ${THREADS_ENV}, else 1)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="pcg-hinf", parents=[common],
                                description="Heart-sound abnormality detection with an H-infinity LSTM.")
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("preprocess", parents=[common], help="denoise and segment recordings")
    pp.add_argument("in_dir")
    pp.add_argument("--levels", type=int, default=4)
    pp.add_argument("--order", type=int, default=5)
    pp.add_argument("--cutoff", type=float, default=500.0)
    pp.add_argument("--clip-seconds", type=float, default=5.0)
    pp.add_argument("--shrinkage", choices=("hard", "soft"), default="hard")
    pp.add_argument("--emit-fft", action="store_true", help="write raw and filtered spectrum CSVs")
    pp.add_argument("--plots", action="store_true", help="render per-record SVG figures")

    pt = sub.add_parser("train", parents=[common], help="train a model from a config")
    pt.add_argument("--data", default=None, help="dataset directory (overrides data.dir)")
    pt.add_argument("--epochs", type=int)
    pt.add_argument("--batch-size", type=int)
    pt.add_argument("--lr", type=float)
    pt.add_argument("--loss", choices=("pwl", "bce"))
    pt.add_argument("--threshold", choices=("sapt", "fixed"))
    pt.add_argument("--cell-mode", choices=("h_infinity", "standard"))
    pt.add_argument("--fine-tune-from", default=None, help="standard-cell checkpoint to transfer from")
    pt.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override any config value, e.g. --set pwl.alpha=0.9")

    pe = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a dataset")
    pe.add_argument("checkpoint")
    pe.add_argument("data")
    pe.add_argument("--tau", type=float, default=None, help="override the stored threshold")
    pe.add_argument("--manifest", default=None, help="restrict to one split of a training manifest")
    pe.add_argument("--split", default="test", choices=SPLITS)
    pe.add_argument("--json", action="store_true", help="print metrics JSON to stdout")

    ps = sub.add_parser("synth", parents=[common], help="write a synthetic heart-sound dataset")
    ps.add_argument("--n-normal", type=int, default=174)
    ps.add_argument("--n-abnormal", type=int, default=26)
    ps.add_argument("--duration", type=float, nargs=2, default=(10.0, 20.0), metavar=("MIN", "MAX"))
    ps.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    return p


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "evaluate": cmd_evaluate, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("seed", "out", "config", "threads", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, DataValidationError, ModelConfigError, ad.CheckpointError,
            TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
