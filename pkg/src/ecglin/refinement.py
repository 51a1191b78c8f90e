"""Imputation, scaling, feature selection, PCA append and SMOTE-ENN balancing.

All statistics are fitted once on training rows (``fit_refinement``) and then
applied unchanged to any rows (``RefinementState.transform``).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import models
from .augmentation import AUG_REGISTRY, AUG_REGISTRY_VERSION
from .features import FeatureMatrix, FeatureSpec

logger = logging.getLogger(__name__)

FINAL_REGISTRY_VERSION = "final-v1"
MI_BINS = 16
MI_TOP = 100
RFE_TARGET = 50
RFE_DROP_FRACTION = 0.10
PCA_COMPONENTS = 5
SMOTE_K = 5
ENN_K = 3
PCA_NAMES = tuple(f"pca_{i}" for i in range(PCA_COMPONENTS))
FINAL_REGISTRY = AUG_REGISTRY.extend(FINAL_REGISTRY_VERSION, [FeatureSpec(n, None, "pca") for n in PCA_NAMES])
assert len(FINAL_REGISTRY) == 202


# --------------------------------------------------------------------------
# Imputation and scaling


@dataclass
class Scaler:
    medians: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    constant: np.ndarray

    def transform(self, values: np.ndarray, missing: np.ndarray) -> np.ndarray:
        x = np.where(missing, self.medians[None, :], values)
        safe = np.where(self.constant, 1.0, self.stds)
        z = (x - self.means) / safe
        z[:, self.constant] = 0.0
        return z


def fit_scaler(values: np.ndarray, missing: np.ndarray, fit_rows: np.ndarray | None = None) -> Scaler:
    """Per-column median (non-missing fit rows) for imputation, then mean/std of the imputed fit rows."""
    values = np.asarray(values, dtype=float)
    missing = np.asarray(missing, dtype=bool)
    rows = np.arange(values.shape[0]) if fit_rows is None else np.asarray(fit_rows)
    if rows.size == 0:
        raise ValueError("no rows to fit on")
    v, m = values[rows], missing[rows]
    d = values.shape[1]
    med = np.zeros(d)
    for j in range(d):
        ok = ~m[:, j]
        if ok.any():
            med[j] = np.median(v[ok, j])
        else:
            logger.warning("column %d is missing on every fit row; zeroed", j)
    x = np.where(m, med, v)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    const = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    return Scaler(med, mu, sd, const)


# --------------------------------------------------------------------------
# Mutual information


def quantile_bins(x: np.ndarray, n_bins: int = MI_BINS) -> np.ndarray:
    """Equal-frequency bin index per value (ties share a bin)."""
    x = np.asarray(x, dtype=float)
    edges = np.unique(np.quantile(x, np.linspace(0, 1, n_bins + 1)[1:-1]))
    return np.searchsorted(edges, x, side="right")


def mutual_information(x: np.ndarray, labels: np.ndarray, n_bins: int = MI_BINS) -> float:
    """Plug-in MI (nats) between a quantile-binned column and integer labels."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("need at least two distinct labels")
    x = np.asarray(x, dtype=float)
    if np.ptp(x) == 0:
        return 0.0
    bx = quantile_bins(x, n_bins)
    _, by = np.unique(labels, return_inverse=True)
    joint = np.zeros((bx.max() + 1, by.max() + 1))
    np.add.at(joint, (bx, by), 1.0)
    p = joint / joint.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return max(0.0, float(np.sum(p[nz] * np.log(p[nz] / (px @ py)[nz]))))


def entropy_nats(labels: np.ndarray) -> float:
    _, c = np.unique(labels, return_counts=True)
    p = c / c.sum()
    return float(-np.sum(p * np.log(p)))


# --------------------------------------------------------------------------
# RFE


def rfe_select(x: np.ndarray, labels: Sequence, target: int = RFE_TARGET, drop_fraction: float = RFE_DROP_FRACTION,
               c: float = models.SVC_C) -> np.ndarray:
    """Column indices (ascending) kept by recursive elimination under the linear SVC."""
    x = np.asarray(x, dtype=float)
    keep = np.arange(x.shape[1])
    if len(keep) <= target:
        if len(keep) < target:
            logger.warning("only %d columns available for RFE target %d", len(keep), target)
        return keep
    while len(keep) > target:
        m = models.train_linear_svc(x[:, keep], labels, c=c)
        score = np.abs(m.coef).sum(axis=0)
        n_drop = min(max(1, int(drop_fraction * len(keep))), len(keep) - target)
        drop = np.argsort(score, kind="stable")[:n_drop]
        keep = np.delete(keep, drop)
        logger.debug("RFE kept %d columns", len(keep))
    return keep


# --------------------------------------------------------------------------
# PCA


@dataclass
class PcaFit:
    mean: np.ndarray
    basis: np.ndarray  # (components, features), orthonormal rows
    variance_ratios: np.ndarray
    padded: np.ndarray  # component slots with no variance behind them

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.basis.T


def fit_pca(x: np.ndarray, n_components: int = PCA_COMPONENTS) -> PcaFit:
    """Top covariance eigenvectors via SVD; each component's largest-|loading| entry is positive."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    if d < n_components:
        raise ValueError(f"need at least {n_components} columns")
    mu = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mu, full_matrices=False)
    lam = s**2 / max(n - 1, 1)
    total = lam.sum()
    basis = np.zeros((n_components, d))
    ratios = np.zeros(n_components)
    padded = np.ones(n_components, dtype=bool)
    for i in range(min(n_components, len(lam))):
        if total <= 0 or lam[i] <= 1e-12 * lam[0]:
            break
        v = vt[i]
        if v[int(np.argmax(np.abs(v)))] < 0:
            v = -v
        basis[i], ratios[i], padded[i] = v, lam[i] / total, False
    if padded.any():
        logger.warning("covariance rank below %d; %d zero components appended", n_components, int(padded.sum()))
    return PcaFit(mu, basis, ratios, padded)


# --------------------------------------------------------------------------
# State


@dataclass
class RefinementState:
    columns: list[str]
    scaler: Scaler
    mi_scores: np.ndarray
    mi_top: list[str]
    selected: list[str]
    pca: PcaFit
    meta: dict = field(default_factory=dict)

    @property
    def output_columns(self) -> list[str]:
        return list(self.columns) + list(PCA_NAMES)

    def transform_array(self, values: np.ndarray, missing: np.ndarray) -> np.ndarray:
        if values.shape[1] != len(self.columns):
            raise ValueError("column count differs from the fitted state")
        z = self.scaler.transform(values, missing)
        sel = [self.columns.index(c) for c in self.selected]
        return np.hstack([z, self.pca.transform(z[:, sel])])

    def transform(self, fm: FeatureMatrix) -> FeatureMatrix:
        if fm.columns != self.columns:
            raise ValueError("matrix columns differ from the fitted state")
        out = self.transform_array(fm.values, fm.missing)
        return FeatureMatrix(self.output_columns, out, np.zeros(out.shape, dtype=bool), list(fm.beat_refs),
                             list(fm.labels), FINAL_REGISTRY_VERSION, dict(fm.meta))

    def to_dict(self) -> dict:
        return {
            "columns": self.columns,
            "medians": self.scaler.medians.tolist(),
            "means": self.scaler.means.tolist(),
            "stds": self.scaler.stds.tolist(),
            "constant": self.scaler.constant.tolist(),
            "mi_scores": self.mi_scores.tolist(),
            "mi_top": self.mi_top,
            "selected": self.selected,
            "pca_mean": self.pca.mean.tolist(),
            "pca_basis": self.pca.basis.tolist(),
            "pca_variance_ratios": self.pca.variance_ratios.tolist(),
            "pca_padded": self.pca.padded.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RefinementState":
        arr = lambda k, dt=float: np.asarray(d[k], dtype=dt)
        return cls(
            list(d["columns"]),
            Scaler(arr("medians"), arr("means"), arr("stds"), arr("constant", bool)),
            arr("mi_scores"),
            list(d["mi_top"]),
            list(d["selected"]),
            PcaFit(arr("pca_mean"), arr("pca_basis").reshape(len(PCA_NAMES), -1), arr("pca_variance_ratios"),
                   arr("pca_padded", bool)),
            dict(d.get("meta", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "RefinementState":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_refinement(fm: FeatureMatrix, fit_rows: np.ndarray | None = None, mi_top: int = MI_TOP,
                   rfe_target: int = RFE_TARGET, n_components: int = PCA_COMPONENTS) -> RefinementState:
    """Fit scaler, MI ranking, RFE subset and PCA on ``fit_rows`` (labelled rows only)."""
    rows = np.arange(fm.n_rows) if fit_rows is None else np.asarray(fit_rows)
    rows = np.array([i for i in rows if fm.labels[i] is not None], dtype=np.int64)
    if rows.size == 0:
        raise ValueError("no labelled rows to fit on")
    scaler = fit_scaler(fm.values, fm.missing, rows)
    z = scaler.transform(fm.values[rows], fm.missing[rows])
    labels = [fm.labels[i] for i in rows]
    y = models.encode_labels(labels, models.class_order(labels))
    mi = np.array([mutual_information(z[:, j], y) for j in range(z.shape[1])])
    top = np.sort(np.argsort(-mi, kind="stable")[:mi_top])
    kept = top[rfe_select(z[:, top], labels, rfe_target)]
    pca = fit_pca(z[:, kept], n_components)
    logger.info("refinement: %d columns, MI top %d, RFE %d, PCA variance %.3f", z.shape[1], len(top), len(kept),
                pca.variance_ratios.sum())
    return RefinementState(
        list(fm.columns), scaler, mi, [fm.columns[i] for i in top], [fm.columns[i] for i in kept], pca,
        {"fit_rows": int(rows.size), "input_registry": fm.registry_version or AUG_REGISTRY_VERSION},
    )


# --------------------------------------------------------------------------
# SMOTE-ENN


def knn_indices(query: np.ndarray, ref: np.ndarray, k: int, exclude_self: bool = False,
                chunk: int = 1024) -> np.ndarray:
    """Indices of the k nearest ``ref`` rows per ``query`` row (Euclidean, ties to lower index)."""
    out = np.empty((query.shape[0], k), dtype=np.int64)
    rn = np.einsum("ij,ij->i", ref, ref)
    for s in range(0, query.shape[0], chunk):
        q = query[s : s + chunk]
        d2 = np.einsum("ij,ij->i", q, q)[:, None] + rn[None, :] - 2.0 * q @ ref.T
        if exclude_self:
            d2[np.arange(len(q)), np.arange(s, s + len(q))] = np.inf
        part = np.argpartition(d2, min(k, d2.shape[1] - 1), axis=1)[:, : k + 1]
        rows = np.arange(len(q))[:, None]
        order = np.lexsort((part, d2[rows, part]), axis=1)[:, :k]
        out[s : s + len(q)] = part[rows, order]
    return out


@dataclass
class BalanceReport:
    before: dict
    after_smote: dict
    after_enn: dict
    synthetic: int
    removed: int
    duplicated_classes: list


def smote(x: np.ndarray, labels: Sequence, k: int = SMOTE_K, seed: int = 0
          ) -> tuple[np.ndarray, list, np.ndarray, list]:
    """Oversample every class to the majority count by same-class interpolation.

    Returns (x, labels, parent pairs (-1 for original rows), duplicated classes).
    """
    x = np.asarray(x, dtype=float)
    labels = list(labels)
    rng = np.random.default_rng(seed)
    lab = np.array(labels, dtype=object)
    classes = models.class_order(labels)
    counts = {c: int(np.sum(lab == c)) for c in classes}
    target = max(counts.values())
    new_x, new_y, parents, dup = [x], list(labels), [np.full((len(x), 2), -1)], []
    for c in classes:
        need = target - counts[c]
        if need <= 0:
            continue
        idx = np.nonzero(lab == c)[0]
        if len(idx) == 1:
            logger.warning("class %s has one sample; duplicated instead of interpolated", c)
            dup.append(c)
            new_x.append(np.repeat(x[idx], need, axis=0))
            parents.append(np.tile([idx[0], idx[0]], (need, 1)))
            new_y += [c] * need
            continue
        kk = min(k, len(idx) - 1)
        nn = knn_indices(x[idx], x[idx], kk, exclude_self=True)
        base = rng.integers(0, len(idx), need)
        pick = nn[base, rng.integers(0, kk, need)]
        gap = rng.random(need)[:, None]
        a, b = x[idx[base]], x[idx[pick]]
        new_x.append(a + gap * (b - a))
        parents.append(np.column_stack([idx[base], idx[pick]]))
        new_y += [c] * need
    return np.vstack(new_x), new_y, np.vstack(parents), dup


def enn(x: np.ndarray, labels: Sequence, k: int = ENN_K) -> np.ndarray:
    """Keep mask: a row is dropped when some other label holds a majority of its k neighbours."""
    lab = np.array(labels, dtype=object)
    if len(lab) <= k:
        return np.ones(len(lab), dtype=bool)
    nn = knn_indices(x, x, k, exclude_self=True)
    keep = np.ones(len(lab), dtype=bool)
    need = k // 2 + 1
    for i in range(len(lab)):
        vals, counts = np.unique(lab[nn[i]].astype(str), return_counts=True)
        top = counts.argmax()
        if counts[top] >= need and vals[top] != str(lab[i]):
            keep[i] = False
    return keep


def smote_enn(x: np.ndarray, labels: Sequence, seed: int = 0, k_smote: int = SMOTE_K, k_enn: int = ENN_K
              ) -> tuple[np.ndarray, list, BalanceReport, np.ndarray]:
    """Balanced rows, their labels, a report, and each row's source index (-1 if synthetic)."""
    labels = list(labels)
    count = lambda ls: {c: int(sum(1 for l in ls if l == c)) for c in models.class_order(ls)}
    xs, ys, _, dup = smote(x, labels, k_smote, seed)
    keep = enn(xs, ys, k_enn)
    yk = [l for l, m in zip(ys, keep) if m]
    source = np.r_[np.arange(len(labels)), np.full(len(ys) - len(labels), -1)][keep]
    report = BalanceReport(count(labels), count(ys), count(yk), len(ys) - len(labels), int((~keep).sum()), dup)
    logger.info("SMOTE-ENN: %s -> %s -> %s", report.before, report.after_smote, report.after_enn)
    return xs[keep], yk, report, source


def balance_report_dict(r: BalanceReport) -> dict:
    return asdict(r)
