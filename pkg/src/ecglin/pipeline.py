"""End-to-end orchestration: records -> segments -> features -> models -> reports.

Each stage writes its artifacts under ``output_dir`` and can be rerun on its
own; record-level and augmentation results are cached under
``output_dir/cache`` keyed by the configuration that produced them.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, augmentation, datasets, dsp, features, models, refinement, rpeaks, segmentation, wfdb_io

logger = logging.getLogger(__name__)

DATA_ENV = "ECG_DATA_DIR"
BALANCE_MODES = ("split_then_balance", "balance_then_split", "none")
DATASETS = ("mitbih", "incart", "custom")
REALTIME_BUDGET_MS = 800.0
SYNTHETIC_RECORD = "synthetic"


class StageError(RuntimeError):
    def __init__(self, stage: str, record_id: str | None, cause: Exception):
        where = f" (record {record_id})" if record_id else ""
        super().__init__(f"stage {stage!r} failed{where}: {cause}")
        self.stage = stage
        self.record_id = record_id


# --------------------------------------------------------------------------
# Configuration


@dataclass
class FilterConfig:
    order: int = 4
    band: list[float] = field(default_factory=lambda: [0.5, 40.0])


@dataclass
class SegmentationConfig:
    alpha: float = segmentation.DEFAULT_ALPHA
    beta: float = segmentation.DEFAULT_BETA
    target_len: int = 324
    weights: list[float] = field(default_factory=lambda: list(segmentation.DEFAULT_WEIGHTS))
    grid_search: bool = False
    alpha_grid: list[float] = field(default_factory=lambda: list(segmentation.ALPHA_GRID))
    beta_grid: list[float] = field(default_factory=lambda: list(segmentation.BETA_GRID))
    top_fraction: float = 0.05


@dataclass
class GraphConfig:
    k: int = augmentation.GRAPH_K
    tau: float = augmentation.GRAPH_TAU


@dataclass
class RefinementConfig:
    mi_top: int = refinement.MI_TOP
    rfe_target: int = refinement.RFE_TARGET
    pca_n: int = refinement.PCA_COMPONENTS


@dataclass
class BalanceConfig:
    mode: str = "split_then_balance"
    seed: int | None = None


@dataclass
class SplitConfig:
    ratio: float = 0.8
    stratified: bool = True
    seed: int | None = None


@dataclass
class PipelineConfig:
    data_dir: str | None = None
    dataset: str = "mitbih"
    records: list[str] | None = None
    record_seconds: float | None = 20.0
    leads: list[list[str]] = field(default_factory=lambda: [list(p) for p in wfdb_io.DEFAULT_LEAD_PREFERENCES])
    fs_target: float = 360.0
    detect_lead: int = 0
    filter: FilterConfig = field(default_factory=FilterConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    balance: BalanceConfig = field(default_factory=BalanceConfig)
    models: list[str] = field(default_factory=lambda: list(models.MODEL_KINDS))
    split: SplitConfig = field(default_factory=SplitConfig)
    cv_folds: int = 5
    cross_validate: bool = True
    seed: int = 0
    latency_repeats: int = 30
    write_csv: bool = True
    workers: int = 1
    output_dir: str = "runs/default"

    # fields that do not influence results and stay out of the config hash
    _NON_SEMANTIC = ("output_dir", "workers", "write_csv", "latency_repeats")

    def __post_init__(self):
        for name, cls in _NESTED.items():
            val = getattr(self, name)
            if isinstance(val, dict):
                setattr(self, name, cls(**val))
        if self.data_dir is None and os.environ.get(DATA_ENV):
            self.data_dir = os.environ[DATA_ENV]

    def validate(self) -> "PipelineConfig":
        errs = []
        if self.dataset not in DATASETS:
            errs.append(f"dataset must be one of {DATASETS}")
        if self.detect_lead not in (0, 1):
            errs.append("detect_lead must be 0 or 1 (index into the two chosen leads)")
        if self.fs_target <= 0:
            errs.append("fs_target must be positive")
        if self.record_seconds is not None and self.record_seconds < 5:
            errs.append("record_seconds must be at least 5 (or null for whole records)")
        if self.filter.order not in (2, 4, 6, 8):
            errs.append("filter.order must be 2, 4, 6 or 8")
        lo, hi = self.filter.band
        if not 0 < lo < hi < self.fs_target / 2:
            errs.append("filter.band must satisfy 0 < low < high < fs_target/2")
        s = self.segmentation
        if not (0 < s.alpha <= 1 and 0 < s.beta <= 1):
            errs.append("segmentation.alpha/beta must lie in (0, 1]")
        if s.target_len < 64:
            errs.append("segmentation.target_len must be >= 64")
        if len(s.weights) != 3 or min(s.weights) < 0:
            errs.append("segmentation.weights must be three non-negative numbers")
        if not s.alpha_grid or not s.beta_grid:
            errs.append("segmentation grids must be non-empty")
        if not 0 < s.top_fraction <= 1:
            errs.append("segmentation.top_fraction must lie in (0, 1]")
        if self.graph.k < 1 or self.graph.tau <= 0:
            errs.append("graph.k must be >= 1 and graph.tau > 0")
        r = self.refinement
        if not r.mi_top >= r.rfe_target >= r.pca_n >= 1:
            errs.append("refinement needs mi_top >= rfe_target >= pca_n >= 1")
        if r.pca_n != refinement.PCA_COMPONENTS:
            errs.append(f"refinement.pca_n is fixed at {refinement.PCA_COMPONENTS} by the final registry")
        if self.balance.mode not in BALANCE_MODES:
            errs.append(f"balance.mode must be one of {BALANCE_MODES}")
        bad = [m for m in self.models if m not in models.MODEL_KINDS]
        if bad or not self.models:
            errs.append(f"models must be a non-empty subset of {models.MODEL_KINDS}")
        if not 0 < self.split.ratio < 1:
            errs.append("split.ratio must lie in (0, 1)")
        if self.cv_folds < 2:
            errs.append("cv_folds must be >= 2")
        if self.workers < 1:
            errs.append("workers must be >= 1")
        if errs:
            raise ValueError("invalid configuration: " + "; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, overrides: dict[str, Any]) -> "PipelineConfig":
        """Apply ``{"a.b": value}`` overrides to a copy."""
        d = self.to_dict()
        for key, val in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ValueError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config key {key!r}")
            node[parts[-1]] = val
        return PipelineConfig.from_dict(d)

    def semantic_dict(self) -> dict:
        d = self.to_dict()
        for k in self._NON_SEMANTIC:
            d.pop(k, None)
        return d

    @property
    def config_hash(self) -> str:
        return _hash(self.semantic_dict())

    def derived_seed(self, name: str, explicit: int | None = None) -> int:
        if explicit is not None:
            return int(explicit)
        h = hashlib.sha256(f"{self.seed}:{name}".encode()).digest()
        return int.from_bytes(h[:4], "little")


_NESTED = {
    "filter": FilterConfig,
    "segmentation": SegmentationConfig,
    "graph": GraphConfig,
    "refinement": RefinementConfig,
    "balance": BalanceConfig,
    "split": SplitConfig,
}


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with a JSON value, falling back to the raw string."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip().lstrip("-"), val


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# Record discovery and per-record processing


def discover_records(data_dir: str | Path, names: list[str] | None = None, dataset: str = "custom") -> list[str]:
    """Explicit names, else the dataset's fixed list if complete, else RECORDS or ``*.hea``."""
    data_dir = Path(data_dir)
    if names:
        return list(names)
    if dataset in datasets.REQUIRED:
        absent = datasets.missing_files(data_dir, dataset)
        if not absent:
            return list(datasets.required_records(dataset))
        logger.warning("%s: %d expected files absent (e.g. %s); using the records present",
                       dataset, len(absent), absent[0])
    listing = data_dir / "RECORDS"
    if listing.exists():
        recs = [l.strip() for l in listing.read_text().splitlines() if l.strip()]
    else:
        recs = sorted(p.stem for p in data_dir.glob("*.hea"))
    if not recs:
        raise FileNotFoundError(f"no WFDB records found in {data_dir}")
    return recs


@dataclass
class PreparedRecord:
    record_id: str
    fs: float
    signal: np.ndarray  # filtered, two leads, fs_target
    annotations: list
    lead_names: list[str]


def prepare_record(cfg: PipelineConfig, record_id: str) -> PreparedRecord:
    """Load, pick two leads, resample to ``fs_target`` and band-pass."""
    path = Path(cfg.data_dir) / record_id
    header = wfdb_io.parse_header((path.parent / f"{path.name}.hea").read_bytes())
    max_samples = None if cfg.record_seconds is None else int(round(cfg.record_seconds * header.fs))
    rec = wfdb_io.load_record(path, max_samples=max_samples)
    leads = wfdb_io.pick_leads(rec.channel_names, cfg.leads)
    if len(leads) == 1:
        logger.warning("%s has one channel; it is used for both leads", record_id)
        leads = leads * 2
    sig = rec.signal[:, leads[:2]]
    anns = list(rec.annotations)
    fs = rec.fs
    if abs(fs - cfg.fs_target) > 1e-9:
        sig = dsp.resample_polyphase(sig, fs, cfg.fs_target)
        scale = cfg.fs_target / fs
        last = len(sig) - 1
        anns = [a._replace(sample=min(last, int(round(a.sample * scale)))) for a in anns]
        fs = cfg.fs_target
    bp = dsp.design_butterworth_bandpass(cfg.filter.order, cfg.filter.band[0], cfg.filter.band[1], fs)
    return PreparedRecord(record_id, fs, dsp.filtfilt(bp, sig), anns, [rec.channel_names[i] for i in leads[:2]])


@dataclass
class RecordOutput:
    record_id: str
    base: features.FeatureMatrix
    rr: np.ndarray
    n_peaks: int
    seconds: dict
    cached: bool = False


def process_record(cfg: PipelineConfig, record_id: str, window: segmentation.WindowParams) -> RecordOutput:
    t0 = time.perf_counter()
    stage = "parse"
    try:
        prep = prepare_record(cfg, record_id)
        stage = "peaks"
        peaks, _ = rpeaks.detect_rpeaks(prep.signal[:, cfg.detect_lead], prep.fs)
        stage = "segment"
        segs = segmentation.segment_record(prep.signal, prep.fs, peaks, window, cfg.segmentation.target_len,
                                           prep.annotations, record_id)
        t1 = time.perf_counter()
        stage = "features"
        rr = np.diff(peaks) / prep.fs
        base = features.base_feature_matrix(segs, {record_id: rr})
        t2 = time.perf_counter()
    except Exception as e:  # noqa: BLE001 - re-raised with stage context
        raise StageError(stage, record_id, e) from e
    return RecordOutput(record_id, base, rr, len(peaks), {"segmentation_s": t1 - t0, "features_s": t2 - t1})


def _process_record_job(args):
    cfg_dict, rid, alpha, beta = args
    return process_record(PipelineConfig.from_dict(cfg_dict), rid, segmentation.WindowParams(alpha, beta))


# --------------------------------------------------------------------------
# Artifact helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


REGISTRY_VERSIONS = {
    "base": features.BASE_REGISTRY_VERSION,
    "augmented": augmentation.AUG_REGISTRY_VERSION,
    "final": refinement.FINAL_REGISTRY_VERSION,
}


@dataclass
class Split:
    train: features.FeatureMatrix
    test: features.FeatureMatrix
    state: refinement.RefinementState
    balance: refinement.BalanceReport | None


class Pipeline:
    """Stage runner bound to one configuration and output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg.validate()
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache = self.out / "cache"
        self.timing: dict[str, Any] = {}
        self.window = segmentation.WindowParams(cfg.segmentation.alpha, cfg.segmentation.beta)
        _write_json(self.out / "config.json", {**cfg.to_dict(), "config_hash": cfg.config_hash})

    # -- provenance ---------------------------------------------------------

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.cfg.config_hash, "registries": REGISTRY_VERSIONS, "version": __version__}

    def _csv_comment(self) -> str:
        regs = ",".join(f"{k}={v}" for k, v in REGISTRY_VERSIONS.items())
        return f"config_hash={self.cfg.config_hash} registries={regs}"

    def _need_data(self) -> Path:
        if not self.cfg.data_dir:
            raise StageError("parse", None, FileNotFoundError(f"no data_dir configured and {DATA_ENV} unset"))
        d = Path(self.cfg.data_dir)
        if not d.is_dir():
            raise StageError("parse", None, FileNotFoundError(f"data_dir {d} does not exist"))
        return d

    def _record_key(self, rid: str) -> str:
        c = self.cfg
        files = []
        for ext in ("hea", "dat", "atr"):
            p = Path(c.data_dir) / f"{rid}.{ext}"
            if p.exists():
                st = p.stat()
                files.append([ext, st.st_size, st.st_mtime_ns])
        return _hash({
            "rid": rid, "files": files, "record_seconds": c.record_seconds, "leads": c.leads,
            "fs_target": c.fs_target, "filter": dataclasses.asdict(c.filter),
            "window": [self.window.alpha, self.window.beta], "target_len": c.segmentation.target_len,
            "registry": features.BASE_REGISTRY.hash, "version": __version__,
        })

    # -- stage: records -----------------------------------------------------

    def record_ids(self) -> list[str]:
        return discover_records(self._need_data(), self.cfg.records, self.cfg.dataset)

    def stage_grid_search(self) -> segmentation.WindowParams:
        res = run_grid_search(self.cfg, self.out / "grid_search")
        self.window = res
        return res

    def stage_records(self) -> tuple[features.FeatureMatrix, dict[str, np.ndarray], list[RecordOutput]]:
        rids = self.record_ids()
        if self.cfg.segmentation.grid_search:
            self.stage_grid_search()
        self.cache.joinpath("records").mkdir(parents=True, exist_ok=True)
        outputs: dict[str, RecordOutput] = {}
        todo = []
        for rid in rids:
            key = self._record_key(rid)
            p = self.cache / "records" / f"{rid}-{key}.bin"
            if p.exists():
                t0 = time.perf_counter()
                meta = json.loads(p.with_suffix(".meta.json").read_text())
                outputs[rid] = RecordOutput(rid, features.FeatureMatrix.from_binary(p),
                                            np.load(p.with_suffix(".rr.npy")), meta["n_peaks"],
                                            {"segmentation_s": time.perf_counter() - t0, "features_s": 0.0}, True)
            else:
                todo.append(rid)
        if todo:
            if self.cfg.workers > 1 and len(todo) > 1:
                jobs = [(self.cfg.to_dict(), rid, self.window.alpha, self.window.beta) for rid in todo]
                with ProcessPoolExecutor(self.cfg.workers) as ex:
                    done = list(ex.map(_process_record_job, jobs))
            else:
                done = [process_record(self.cfg, rid, self.window) for rid in todo]
            for r in done:
                outputs[r.record_id] = r
                p = self.cache / "records" / f"{r.record_id}-{self._record_key(r.record_id)}.bin"
                r.base.to_binary(p)
                np.save(p.with_suffix(".rr.npy"), r.rr)
                _write_json(p.with_suffix(".meta.json"), {"n_peaks": r.n_peaks, "seconds": r.seconds})
        ordered = [outputs[rid] for rid in rids]
        nonempty = [o.base for o in ordered if o.base.n_rows]
        if not nonempty:
            raise StageError("segment", None, ValueError("no beats were segmented"))
        base = features.FeatureMatrix.vstack(nonempty)
        base.registry_version = features.BASE_REGISTRY_VERSION
        rr = {o.record_id: o.rr for o in ordered}
        self.timing["records"] = {
            o.record_id: {**o.seconds, "beats": o.base.n_rows, "peaks": o.n_peaks, "cached": o.cached}
            for o in ordered
        }
        self.timing["segmentation_s"] = sum(o.seconds["segmentation_s"] for o in ordered)
        self.timing["features_s"] = sum(o.seconds["features_s"] for o in ordered)
        self.timing["n_records"] = len(ordered)
        base.to_binary(self.out / "features_base.bin", {"provenance": self.provenance})
        np.savez(self.out / "rr.npz", **rr)
        if self.cfg.write_csv:
            base.to_csv(self.out / "features_base.csv", self._csv_comment())
        logger.info("records: %d, segments: %d", len(ordered), base.n_rows)
        return base, rr, ordered

    def load_base(self) -> tuple[features.FeatureMatrix, dict[str, np.ndarray]]:
        p = self.out / "features_base.bin"
        if not p.exists():
            base, rr, _ = self.stage_records()
            return base, rr
        with np.load(self.out / "rr.npz") as z:
            rr = {k: z[k] for k in z.files}
        return features.FeatureMatrix.from_binary(p), rr

    # -- stage: augment -----------------------------------------------------

    def stage_augment(self, base=None, rr=None) -> features.FeatureMatrix:
        if base is None:
            base, rr = self.load_base()
        t0 = time.perf_counter()
        key = _hash({"base": hashlib.sha256(base.values.tobytes() + base.missing.tobytes()).hexdigest(),
                     "graph": dataclasses.asdict(self.cfg.graph), "registry": augmentation.AUG_REGISTRY.hash})
        cached = self.cache / "augment" / f"aug-{key}.bin"
        if cached.exists():
            aug = features.FeatureMatrix.from_binary(cached)
        else:
            try:
                aug = augmentation.augment_matrix(base, rr, self.cfg.graph.k, self.cfg.graph.tau,
                                                  edge_dir=self._edge_dir())
            except Exception as e:  # noqa: BLE001
                raise StageError("augment", None, e) from e
            cached.parent.mkdir(parents=True, exist_ok=True)
            aug.to_binary(cached)
        aug.registry_version = augmentation.AUG_REGISTRY_VERSION
        self.timing["augmentation_s"] = time.perf_counter() - t0
        aug.to_binary(self.out / "features_augmented.bin", {"provenance": self.provenance})
        if self.cfg.write_csv:
            aug.to_csv(self.out / "features_augmented.csv", self._csv_comment())
        return aug

    def _edge_dir(self) -> Path:
        d = self.out / "graphs"
        d.mkdir(exist_ok=True)
        return d

    def load_augmented(self) -> features.FeatureMatrix:
        p = self.out / "features_augmented.bin"
        return features.FeatureMatrix.from_binary(p) if p.exists() else self.stage_augment()

    # -- stage: refine ------------------------------------------------------

    def _labelled(self, fm: features.FeatureMatrix) -> features.FeatureMatrix:
        keep = np.array([l is not None for l in fm.labels], dtype=bool)
        if not keep.any():
            raise StageError("refine", None, ValueError("no labelled beats"))
        return fm.take(keep)

    def _balanced(self, fm: features.FeatureMatrix, seed: int) -> tuple[features.FeatureMatrix, refinement.BalanceReport]:
        x, y, rep, src = refinement.smote_enn(fm.values, fm.labels, seed=seed)
        refs = [fm.beat_refs[s] if s >= 0 else features.BeatRef(SYNTHETIC_RECORD, i, -1) for i, s in enumerate(src)]
        out = features.FeatureMatrix(fm.columns, x, np.zeros(x.shape, dtype=bool), refs, y, fm.registry_version)
        return out, rep

    def refine_split(self, aug: features.FeatureMatrix, train_idx=None, test_idx=None, seed_tag: str = "") -> Split:
        """Fit refinement and balance per the configured mode.

        With explicit indices (cross-validation) the split is taken as given;
        otherwise a stratified split is drawn from the master seed.
        """
        c = self.cfg
        lab = self._labelled(aug) if train_idx is None else aug
        bseed = c.derived_seed("balance" + seed_tag, c.balance.seed)
        sseed = c.derived_seed("split" + seed_tag, c.split.seed)
        fit = lambda fm, rows=None: refinement.fit_refinement(fm, rows, c.refinement.mi_top, c.refinement.rfe_target,
                                                              c.refinement.pca_n)
        if c.balance.mode == "balance_then_split" and train_idx is None:
            state = fit(lab)
            final = state.transform(lab)
            bal, rep = self._balanced(final, bseed)
            tr, te = self._split_indices(bal.labels, sseed)
            return Split(bal.take(tr), bal.take(te), state, rep)
        if train_idx is None:
            train_idx, test_idx = self._split_indices(lab.labels, sseed)
        state = fit(lab, train_idx)
        final = state.transform(lab)
        train, test = final.take(train_idx), final.take(test_idx)
        rep = None
        if c.balance.mode != "none":
            train, rep = self._balanced(train, bseed)
        return Split(train, test, state, rep)

    def _split_indices(self, labels, seed) -> tuple[np.ndarray, np.ndarray]:
        if self.cfg.split.stratified:
            return models.stratified_split(labels, 1 - self.cfg.split.ratio, seed)
        perm = np.random.default_rng(seed).permutation(len(labels))
        n_test = int(round((1 - self.cfg.split.ratio) * len(labels)))
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])

    def stage_refine(self, aug=None) -> Split:
        if aug is None:
            aug = self.load_augmented()
        t0 = time.perf_counter()
        try:
            sp = self.refine_split(aug)
        except StageError:
            raise
        except Exception as e:  # noqa: BLE001
            raise StageError("refine", None, e) from e
        self.timing["selection_balancing_s"] = time.perf_counter() - t0
        sp.state.meta["provenance"] = self.provenance
        sp.state.save(self.out / "refinement.json")
        sp.train.to_binary(self.out / "final_train.bin", {"provenance": self.provenance})
        sp.test.to_binary(self.out / "final_test.bin", {"provenance": self.provenance})
        if self.cfg.write_csv:
            sp.train.to_csv(self.out / "final_train.csv", self._csv_comment())
            sp.test.to_csv(self.out / "final_test.csv", self._csv_comment())
        _write_json(self.out / "balance.json", {
            "provenance": self.provenance, "mode": self.cfg.balance.mode,
            "report": None if sp.balance is None else refinement.balance_report_dict(sp.balance),
        })
        return sp

    def load_split(self) -> Split:
        p = self.out / "refinement.json"
        if not p.exists():
            return self.stage_refine()
        bal = json.loads((self.out / "balance.json").read_text())["report"]
        return Split(
            features.FeatureMatrix.from_binary(self.out / "final_train.bin"),
            features.FeatureMatrix.from_binary(self.out / "final_test.bin"),
            refinement.RefinementState.load(p),
            None if bal is None else refinement.BalanceReport(**bal),
        )

    # -- stage: train / evaluate --------------------------------------------

    def stage_train(self, sp: Split | None = None) -> dict[str, tuple[models.Model, float]]:
        sp = sp or self.load_split()
        out = {}
        mdir = self.out / "models"
        mdir.mkdir(exist_ok=True)
        t0 = time.perf_counter()
        for kind in self.cfg.models:
            try:
                m, secs = models.train_model(kind, sp.train.values, sp.train.labels, feature_names=sp.train.columns)
            except Exception as e:  # noqa: BLE001
                raise StageError("train", None, e) from e
            path = mdir / f"{kind}.bin"
            models.save_model(m, path)
            side = path.with_suffix(".bin.json")
            _write_json(side, {**json.loads(side.read_text()), "provenance": self.provenance})
            out[kind] = (m, secs)
        self.timing["training_s"] = time.perf_counter() - t0
        _write_json(mdir / "train_times.json", {k: s for k, (_, s) in out.items()})
        return out

    def stage_evaluate(self, sp: Split | None = None, trained=None) -> dict:
        sp = sp or self.load_split()
        if trained is None:
            times = json.loads((self.out / "models" / "train_times.json").read_text())
            trained = {k: (models.load_model(self.out / "models" / f"{k}.bin"), times[k]) for k in self.cfg.models}
        t0 = time.perf_counter()
        ref_bytes = (self.out / "refinement.json").stat().st_size
        det, res = {}, {}
        for kind, (m, secs) in trained.items():
            size = models.model_size_bytes(m)
            rep = models.evaluate(m, sp.test.values, sp.test.labels, secs, self.cfg.latency_repeats, size + ref_bytes)
            det[kind] = {
                "acc": rep.accuracy, "f1_weighted": rep.f1_w, "precision_weighted": rep.precision_w,
                "recall_weighted": rep.recall_w, "size_kb": rep.model_size_kb, "per_class_recall": rep.per_class_recall,
                "confusion": rep.confusion, "classes": list(m.classes), "converged": bool(m.converged),
            }
            res[kind] = {**rep.table_row(), "infer_single_row_ms": rep.infer_single_row_ms,
                         "bundle_size_kb": rep.bundle_size_kb}
            imp = models.feature_importance_report(m, sp.train.columns)
            with open(self.out / f"importance_{kind}.csv", "w") as fh:
                fh.write(f"# {self._csv_comment()}\nfeature,importance\n")
                fh.writelines(f"{n},{float(v)!r}\n" for n, v in imp)
        self.timing["evaluation_s"] = time.perf_counter() - t0
        self._eval = (det, res)
        _write_json(self.out / "evaluation.json", {"provenance": self.provenance, "models": det, "resources": res})
        return det

    # -- cross-validation ----------------------------------------------------

    def stage_cross_validate(self, aug: features.FeatureMatrix | None = None, sp: Split | None = None) -> dict:
        c = self.cfg
        aug = aug if aug is not None else self.load_augmented()
        seed = c.derived_seed("cv")
        out = {}
        if c.balance.mode == "balance_then_split":
            sp = sp or self.load_split()
            pool = features.FeatureMatrix.vstack([sp.train, sp.test])
            folds = models.stratified_kfold(pool.labels, c.cv_folds, seed)
            prepared = [(pool.take(tr), pool.take(te)) for tr, te in folds]
        else:
            lab = self._labelled(aug)
            folds = models.stratified_kfold(lab.labels, c.cv_folds, seed)
            prepared = []
            for f, (tr, te) in enumerate(folds):
                s = self.refine_split(lab, tr, te, seed_tag=f":fold{f}")
                prepared.append((s.train, s.test))
        for kind in c.models:
            scores = []
            for train, test in prepared:
                m, _ = models.train_model(kind, train.values, train.labels)
                scores.append(models.classification_metrics(test.labels, m.predict(test.values), m.classes).f1_w)
            ci = models.t_confidence_interval(scores)
            out[kind] = {"scores": scores, "mean": ci.mean, "std": ci.std, "ci_low": ci.low, "ci_high": ci.high}
        return out

    # -- reports ------------------------------------------------------------

    def write_reports(self, base, aug, sp: Split, det: dict, cv: dict | None) -> dict:
        det_res = getattr(self, "_eval", (det, {}))[1]
        labels = [l for l in base.labels if l is not None]
        metrics = {
            "provenance": self.provenance,
            "dimensions": {
                "base": base.n_cols, "augmented": aug.n_cols, "mi_top": len(sp.state.mi_top),
                "selected": len(sp.state.selected), "pca": int((~sp.state.pca.padded).sum()),
                "final": sp.train.n_cols,
            },
            "segments": base.n_rows,
            "labelled_segments": len(labels),
            "class_counts": {k: labels.count(k) for k in models.class_order(labels)},
            "window": {"alpha": self.window.alpha, "beta": self.window.beta},
            "selected_features": sp.state.selected,
            "pca_variance_ratios": sp.state.pca.variance_ratios.tolist(),
            "pca_cumulative_variance": float(sp.state.pca.variance_ratios.sum()),
            "balance": {
                "mode": self.cfg.balance.mode,
                "size": None if sp.balance is None else sum(sp.balance.after_enn.values()),
                "class_counts": None if sp.balance is None else sp.balance.after_enn,
                "synthetic": None if sp.balance is None else sp.balance.synthetic,
                "removed": None if sp.balance is None else sp.balance.removed,
            },
            "split": {"train": sp.train.n_rows, "test": sp.test.n_rows},
            "models": det,
            "cv": cv,
        }
        _write_json(self.out / "metrics.json", metrics)
        _write_json(self.out / "resource_report.json", {"provenance": self.provenance, "models": det_res})
        t = self.timing
        t["aug_sel_bal_s"] = t.get("augmentation_s", 0.0) + t.get("selection_balancing_s", 0.0)
        n_files = max(1, t.get("n_records", 1))
        summary = {
            "provenance": self.provenance,
            "extracted_segments": base.n_rows,
            "initial_dimension": base.n_cols,
            "augmented_dimension": aug.n_cols,
            "selected_subset": {"count": len(sp.state.selected), "examples": sp.state.selected[:2]},
            "pca_components": {"count": int((~sp.state.pca.padded).sum()),
                               "variance": float(sp.state.pca.variance_ratios.sum())},
            "final_dimension": sp.train.n_cols,
            "balanced_dataset_size": metrics["balance"]["size"],
            "segmentation_time_s": t.get("segmentation_s", 0.0) + t.get("features_s", 0.0),
            "segmentation_time_s_per_file": (t.get("segmentation_s", 0.0) + t.get("features_s", 0.0)) / n_files,
            "aug_sel_bal_time_s": t["aug_sel_bal_s"],
            "aug_sel_bal_time_s_per_file": t["aug_sel_bal_s"] / n_files,
            "total_time_s": t.get("total_s"),
        }
        _write_json(self.out / "processing_summary.json", summary)
        _write_json(self.out / "timing.json", {"provenance": self.provenance, **t})
        return metrics

    # -- everything ---------------------------------------------------------

    def run_all(self) -> dict:
        t0 = time.perf_counter()
        base, rr, _ = self.stage_records()
        aug = self.stage_augment(base, rr)
        sp = self.stage_refine(aug)
        trained = self.stage_train(sp)
        det = self.stage_evaluate(sp, trained)
        cv = None
        if self.cfg.cross_validate:
            try:
                cv = self.stage_cross_validate(aug, sp)
            except ValueError as e:
                # too few beats of some class for the fold count; the hold-out results still stand
                logger.warning("cross-validation skipped: %s", e)
                cv = {"skipped": str(e)}
        self.timing["total_s"] = time.perf_counter() - t0
        metrics = self.write_reports(base, aug, sp, det, cv)
        report_per_patient_profile(self.out)
        return metrics


def run_pipeline(cfg: PipelineConfig) -> dict:
    return Pipeline(cfg).run_all()


# --------------------------------------------------------------------------
# Grid search and profile


def run_grid_search(cfg: PipelineConfig, out_dir: str | Path | None = None) -> segmentation.WindowParams:
    """Loss surface over the (alpha, beta) grid for every record; returns the robust optimum."""
    cfg.validate()
    out = Path(out_dir or Path(cfg.output_dir) / "grid_search")
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for rid in discover_records(cfg.data_dir, cfg.records, cfg.dataset):
        try:
            prep = prepare_record(cfg, rid)
            peaks, _ = rpeaks.detect_rpeaks(prep.signal[:, cfg.detect_lead], prep.fs)
            if len(peaks) < 2:
                logger.warning("%s: fewer than two beats, skipped", rid)
                continue
            results.append(segmentation.grid_search_window(
                prep.signal[:, cfg.detect_lead], prep.fs, peaks, cfg.segmentation.alpha_grid, cfg.segmentation.beta_grid,
                cfg.segmentation.weights, rid))
        except Exception as e:  # noqa: BLE001
            raise StageError("grid-search", rid, e) from e
    if not results:
        raise StageError("grid-search", None, ValueError("no beats found"))
    res = segmentation.GridSearchResult.concat(results)
    surface = res.surface
    with open(out / "loss_surface.csv", "w") as fh:
        fh.write(f"# config_hash={cfg.config_hash}\nalpha,beta,mean_loss\n")
        for i, a in enumerate(res.alphas):
            for j, b in enumerate(res.betas):
                fh.write(f"{float(a)!r},{float(b)!r},{float(surface[i, j])!r}\n")
    a, b, l = res.per_beat_optima()
    beat_idx = np.concatenate([np.arange(len(r.r_peaks)) for r in results])
    with open(out / "per_beat_optima.csv", "w") as fh:
        fh.write(f"# config_hash={cfg.config_hash}\nrecord_id,beat_index,r_peak,alpha,beta,loss\n")
        for k in range(len(a)):
            fh.write(f"{res.record_ids[k]},{beat_idx[k]},{res.r_peaks[k]},{float(a[k])!r},{float(b[k])!r},{float(l[k])!r}\n")
    opt = res.robust(cfg.segmentation.top_fraction)
    gmin, gloss = res.global_minimum()
    _write_json(out / "robust_optimum.json", {
        "config_hash": cfg.config_hash, "alpha": opt.alpha, "beta": opt.beta,
        "top_fraction": cfg.segmentation.top_fraction, "n_beats": int(len(a)),
        "global_minimum": {"alpha": gmin.alpha, "beta": gmin.beta, "mean_loss": gloss},
    })
    return opt


def robust_from_csv(path: str | Path, fraction: float = 0.05) -> segmentation.WindowParams:
    """Recompute the robust optimum from an emitted ``per_beat_optima.csv``."""
    rows = [l.split(",") for l in Path(path).read_text().splitlines() if l and not l.startswith(("#", "record_id"))]
    a = np.array([float(r[3]) for r in rows])
    b = np.array([float(r[4]) for r in rows])
    loss = np.array([float(r[5]) for r in rows])
    return segmentation.robust_optimum(a, b, loss, fraction)


def report_per_patient_profile(run_dir: str | Path) -> dict:
    """Per-record pipeline time, per-beat latency and real-time feasibility."""
    run_dir = Path(run_dir)
    timing = json.loads((run_dir / "timing.json").read_text())
    res = json.loads((run_dir / "resource_report.json").read_text())["models"]
    recs = timing.get("records", {})
    total_beats = sum(r["beats"] for r in recs.values()) or 1
    shared = timing.get("aug_sel_bal_s", 0.0)
    cls_ms = {k: v["infer_ms"] for k, v in res.items()}
    rows = {}
    for rid, r in recs.items():
        # record-level stages plus this record's beat share of the global stages
        t = r["segmentation_s"] + r["features_s"] + shared * r["beats"] / total_beats
        per_beat = 1000.0 * t / r["beats"] if r["beats"] else None
        rows[rid] = {
            "pipeline_s": t, "beats": r["beats"], "per_beat_ms": per_beat, "cached": r.get("cached", False),
            "realtime_feasible": per_beat is not None and per_beat < REALTIME_BUDGET_MS,
        }
    per_beat = [v["per_beat_ms"] for v in rows.values() if v["per_beat_ms"] is not None]
    mean_pb = float(np.mean(per_beat)) if per_beat else None
    total_s = timing.get("total_s")
    overall = 1000.0 * total_s / total_beats if total_s is not None and recs else None
    profile = {
        "records": rows,
        "total_pipeline_s": total_s,
        "total_beats": total_beats if recs else 0,
        "overall_per_beat_ms": overall,
        "mean_pipeline_s": float(np.mean([v["pipeline_s"] for v in rows.values()])) if rows else None,
        "mean_per_beat_ms": mean_pb,
        "classification_ms_per_beat": cls_ms,
        "realtime_budget_ms": REALTIME_BUDGET_MS,
        "realtime_feasible": mean_pb is not None and mean_pb < REALTIME_BUDGET_MS,
    }
    _write_json(run_dir / "profile.json", profile)
    return profile
