"""Command-line entry point: ``ecglin <command> [options] [--key=value ...]``.

Any ``--dotted.key=value`` argument not recognised by a subcommand is applied
as a config override (the value is parsed as JSON when possible).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, datasets, dsp, rpeaks, synthetic, wfdb_io
from .pipeline import Pipeline, PipelineConfig, StageError, parse_override, report_per_patient_profile, run_grid_search

logger = logging.getLogger("ecglin")

STAGES = ("segment", "features", "augment", "refine", "train", "evaluate", "run-all")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--data-dir", help="WFDB directory (default: $ECG_DATA_DIR)")
    p.add_argument("--output-dir", "-o", help="run directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ecglin", description="Two-lead ECG beat classification pipeline")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="decode one WFDB record to CSV")
    p.add_argument("record", help="record path without extension")
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    p.add_argument("--annotations", action="store_true", help="print annotations instead of samples")

    p = sub.add_parser("records", help="list records in a data directory")
    p.add_argument("data_dir")

    p = sub.add_parser("required-records", help="record names a dataset run expects")
    p.add_argument("dataset", choices=sorted(datasets.REQUIRED))
    p.add_argument("--check", metavar="DIR", help="list files missing from DIR instead")

    p = sub.add_parser("peaks", help="detect R-peaks in one record")
    p.add_argument("record")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--tolerance-ms", type=float, default=50.0, help="match tolerance against annotations")
    p.add_argument("--summary", action="store_true", help="print counts and accuracy as JSON instead of CSV")

    p = sub.add_parser("filter-response", help="magnitude response of the band-pass filter")
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--band", type=float, nargs=2, default=(0.5, 40.0))
    p.add_argument("--fs", type=float, default=360.0)
    p.add_argument("--points", type=int, default=64)

    p = sub.add_parser("synth", help="write a synthetic WFDB corpus")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--records", type=int, default=6)
    p.add_argument("--seconds", type=float, default=90.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fs", type=float, default=360.0)

    p = sub.add_parser("config", help="print the effective config and its hash")
    _common(p)

    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        _common(p)
        if name == "segment":
            p.add_argument("--alpha", type=float, help="pre-R window fraction of the previous RR")
            p.add_argument("--beta", type=float, help="post-R window fraction of the next RR")
            p.add_argument("--target-len", type=int, help="resampled segment length")
            p.add_argument("--grid-search", action="store_true", help="pick alpha/beta by grid search first")

    p = sub.add_parser("grid-search", help="alpha/beta loss surface and robust optimum")
    _common(p)

    p = sub.add_parser("profile", help="per-record latency from an existing run")
    _common(p)
    return ap


def load_config(args, extra: list[str]) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = dict(parse_override(s) for s in args.set)
    for tok in extra:
        if not tok.startswith("--") or "=" not in tok:
            raise SystemExit(f"ecglin: unrecognized argument {tok!r}")
        k, v = parse_override(tok)
        overrides[k] = v
    if args.data_dir:
        overrides["data_dir"] = args.data_dir
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    for flag, key in (("alpha", "segmentation.alpha"), ("beta", "segmentation.beta"),
                      ("target_len", "segmentation.target_len")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if getattr(args, "grid_search", False):
        overrides["segmentation.grid_search"] = True
    return cfg.with_overrides(overrides).validate() if overrides else cfg.validate()


def _cmd_parse(args) -> int:
    rec = wfdb_io.load_record(args.record)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        if args.annotations:
            out.write("sample,symbol,aami\n")
            for a in rec.annotations:
                out.write(f"{a.sample},{a.symbol},{wfdb_io.map_to_aami(a.symbol) or ''}\n")
        else:
            wfdb_io.record_to_csv(rec, out)
    finally:
        if args.out:
            out.close()
    logger.info("%s: %d samples x %d channels at %g Hz, %d annotations", rec.record_id, rec.n_samples,
                len(rec.channels), rec.fs, len(rec.annotations))
    return 0


def _cmd_peaks(args) -> int:
    rec = wfdb_io.load_record(args.record)
    x = rec.signal[:, args.channel]
    peaks, sets = rpeaks.detect_rpeaks(x, rec.fs)
    if not args.summary:
        print("detector,sample_index,sqi_weight")
        for s in sets:
            for p in s.peaks:
                print(f"{s.detector_id},{p},{s.weight_at(p):.6g}")
        # merged peaks carry the summed weight of the detectors that voted for them
        tol = int(round(0.05 * rec.fs))
        for p in peaks:
            w = sum(s.weight_at(p) for s in sets if len(s.peaks) and np.min(np.abs(s.peaks - p)) <= tol)
            print(f"ensemble,{p},{w:.6g}")
        return 0
    report = {"record": rec.record_id, "n_peaks": int(len(peaks)),
              "detectors": {s.detector_id: int(len(s.peaks)) for s in sets}}
    beats = np.array([a.sample for a in rec.annotations if wfdb_io.map_to_aami(a.symbol)])
    if len(beats):
        tp, fn, fp = rpeaks.match_peaks(peaks, beats, int(round(args.tolerance_ms * rec.fs / 1000)))
        report.update(tp=tp, fp=fp, fn=fn, sensitivity=tp / max(1, tp + fn), ppv=tp / max(1, tp + fp))
    print(json.dumps(report, indent=1))
    return 0


def _cmd_filter_response(args) -> int:
    bp = dsp.design_butterworth_bandpass(args.order, args.band[0], args.band[1], args.fs)
    freqs = np.linspace(0, args.fs / 2, args.points)
    mag = np.abs(dsp.frequency_response(bp, freqs, args.fs))
    print("freq_hz,magnitude_db")
    for f, m in zip(freqs, mag):
        # filtfilt squares the single-pass magnitude
        print(f"{f:.4f},{20 * np.log10(max(m * m, 1e-300)):.3f}")
    return 0


def _run_stage(name: str, cfg: PipelineConfig) -> int:
    pl = Pipeline(cfg)
    if name == "run-all":
        m = pl.run_all()
        for kind, v in m["models"].items():
            print(f"{kind:20s} acc={v['acc']:.4f} f1={v['f1_weighted']:.4f} size_kb={v['size_kb']:.2f}")
        print(f"dimensions: {m['dimensions']}  segments: {m['segments']}  -> {pl.out}")
        return 0
    if name in ("segment", "features"):
        base, _, outs = pl.stage_records()
        for o in outs:
            print(f"{o.record_id}: {o.base.n_rows} segments from {o.n_peaks} peaks{' (cached)' if o.cached else ''}")
        print(f"total {base.n_rows} segments x {base.n_cols} features -> {pl.out / 'features_base.bin'}")
    elif name == "augment":
        aug = pl.stage_augment()
        print(f"{aug.n_rows} rows x {aug.n_cols} columns -> {pl.out / 'features_augmented.bin'}")
    elif name == "refine":
        sp = pl.stage_refine()
        print(f"train {sp.train.n_rows} / test {sp.test.n_rows} rows x {sp.train.n_cols} columns")
    elif name == "train":
        for kind, (m, secs) in pl.stage_train().items():
            print(f"{kind:20s} {secs:.3f} s converged={m.converged}")
    elif name == "evaluate":
        for kind, v in pl.stage_evaluate().items():
            print(f"{kind:20s} acc={v['acc']:.4f} f1={v['f1_weighted']:.4f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if extra and not hasattr(args, "set"):
        ap.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        if args.command == "parse":
            return _cmd_parse(args)
        if args.command == "records":
            from .pipeline import discover_records
            print("\n".join(discover_records(args.data_dir)))
            return 0
        if args.command == "required-records":
            if args.check:
                missing = datasets.missing_files(args.check, args.dataset)
                print("\n".join(missing) if missing else f"{args.check}: complete")
                return 1 if missing else 0
            print("\n".join(datasets.required_records(args.dataset)))
            return 0
        if args.command == "peaks":
            return _cmd_peaks(args)
        if args.command == "filter-response":
            return _cmd_filter_response(args)
        if args.command == "synth":
            names = synthetic.write_corpus(args.out_dir, args.records, args.seconds, args.seed, args.fs)
            print(f"wrote {len(names)} records to {args.out_dir}")
            return 0
        cfg = load_config(args, extra)
        if args.command == "config":
            print(json.dumps({**cfg.to_dict(), "config_hash": cfg.config_hash}, indent=1, sort_keys=True))
            return 0
        if args.command == "grid-search":
            opt = run_grid_search(cfg)
            print(f"robust optimum alpha={opt.alpha:.4f} beta={opt.beta:.4f} -> {Path(cfg.output_dir) / 'grid_search'}")
            return 0
        if args.command == "profile":
            prof = report_per_patient_profile(cfg.output_dir)
            print(f"mean per-beat latency {prof['mean_per_beat_ms']:.3f} ms "
                  f"(budget {prof['realtime_budget_ms']:.0f} ms, feasible={prof['realtime_feasible']})")
            return 0
        return _run_stage(args.command, cfg)
    except StageError as e:
        logger.error("%s", e)
        return 1
    except (ValueError, FileNotFoundError, wfdb_io.WfdbError) as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
