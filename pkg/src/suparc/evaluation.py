"""Metric suite, PCA projection, embedding export and the pairwise-geometry score."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .autodiff import no_grad
from .data import Dataset, iter_collated
from .exceptions import ContractError, DataError
from .model import VARIANTS, FusionModel


# ------------------------------------------------------------------ metrics

@dataclass
class MetricsBundle:
    mae: float
    corr: float
    acc7: float
    acc2_nonneg: float
    f1_nonneg: float
    acc2_pos: float
    f1_pos: float
    corr_degenerate: bool = False
    pos_degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _binary_f1(pred: np.ndarray, true: np.ndarray) -> float:
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    if fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def _pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0:
        return 0.0, True
    return float(np.clip(np.sum(da * db) / denom, -1.0, 1.0)), False


def compute_metrics(y_hat, y) -> MetricsBundle:
    """MAE, Pearson r, Acc-7 and the two Acc-2 / F1 conventions.

    Acc-7 rounds both clamped scores to integers in -3..3. "nonneg" splits at
    value >= 0 over every sample; "pos" splits at value > 0 and drops samples
    whose label is exactly 0. F1 treats the positive-sentiment side as the
    positive class.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0 or y_hat.size != y.size:
        raise ContractError(f"compute_metrics needs equal non-zero lengths, got {y_hat.size} and {y.size}")

    mae = float(np.mean(np.abs(y_hat - y)))
    corr, corr_degenerate = _pearson(y_hat, y)
    acc7 = float(np.mean(np.round(np.clip(y_hat, -3, 3)) == np.round(np.clip(y, -3, 3))))

    pred_nn, true_nn = y_hat >= 0, y >= 0
    acc2_nonneg = float(np.mean(pred_nn == true_nn))
    f1_nonneg = _binary_f1(pred_nn, true_nn)

    keep = y != 0
    if keep.any():
        pred_pos, true_pos = y_hat[keep] > 0, y[keep] > 0
        acc2_pos = float(np.mean(pred_pos == true_pos))
        f1_pos = _binary_f1(pred_pos, true_pos)
        pos_degenerate = False
    else:
        acc2_pos, f1_pos, pos_degenerate = 0.0, 0.0, True

    return MetricsBundle(
        mae=mae,
        corr=corr,
        acc7=acc7,
        acc2_nonneg=acc2_nonneg,
        f1_nonneg=f1_nonneg,
        acc2_pos=acc2_pos,
        f1_pos=f1_pos,
        corr_degenerate=corr_degenerate,
        pos_degenerate=pos_degenerate,
    )


# ---------------------------------------------------------------------- PCA

@dataclass
class PCAResult:
    coords: np.ndarray
    explained_variance_ratio: np.ndarray
    components: np.ndarray
    iterations: list[int] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)


def _power_iteration(cov: np.ndarray, start: np.ndarray, tol: float, max_iter: int):
    v = start / np.linalg.norm(start)
    for it in range(1, max_iter + 1):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0, it, True
        w /= norm
        if np.linalg.norm(w - v) < tol:
            return w, float(w @ cov @ w), it, True
        v = w
    return v, float(v @ cov @ v), max_iter, False


def pca_project(X, k: int = 2, tol: float = 1e-9, max_iter: int = 1000, seed: int = 0) -> PCAResult:
    """Top-k principal components by power iteration with deflation.

    Each component is signed so its largest-magnitude loading is positive.
    Directions with (numerically) zero variance are returned as zero columns
    with zero explained variance.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError(f"pca_project expects a matrix, got shape {X.shape}")
    n, d = X.shape
    if not 1 <= k <= n:
        raise ContractError(f"need n >= k >= 1, got n={n}, k={k}")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / max(n - 1, 1)
    # variance at the level of rounding in the mean is treated as zero
    noise = d * (64 * np.finfo(np.float64).eps * float(np.max(np.abs(X), initial=0.0))) ** 2
    total = float(np.trace(cov))
    if total <= noise:
        total = 0.0
    deflated = cov.copy()
    rng = np.random.default_rng(seed)

    components = np.zeros((k, d))
    ratios = np.zeros(k)
    iterations, converged = [], []
    for c in range(min(k, d)):
        if total <= 0.0 or float(np.trace(deflated)) <= 1e-12 * total + noise:
            iterations.append(0)
            converged.append(True)
            continue
        v, eigval, its, ok = _power_iteration(deflated, rng.standard_normal(d), tol, max_iter)
        iterations.append(its)
        converged.append(ok)
        if eigval <= 1e-12 * total:
            continue
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        components[c] = v
        ratios[c] = eigval / total
        deflated = deflated - eigval * np.outer(v, v)
    return PCAResult(
        coords=centered @ components.T,
        explained_variance_ratio=ratios,
        components=components,
        iterations=iterations,
        converged=converged,
    )


# --------------------------------------------------------- geometry score

@dataclass(frozen=True)
class GeometryScore:
    score: float
    degenerate: bool = False
    n_pairs: int = 0

    def __float__(self) -> float:
        return self.score


MAX_PAIRS = 100_000


def geometry_score(H, y, max_pairs: int = MAX_PAIRS, seed: int = 0) -> GeometryScore:
    """Spearman correlation of pairwise cosine distance with |y_i - y_j|.

    Uses every i < j pair, or a seeded subsample of ``max_pairs`` of them.
    """
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = H.shape[0]
    if n < 10 or y.size != n:
        raise ContractError(f"geometry_score needs n >= 10 matched rows, got {n} rows and {y.size} labels")
    norms = np.linalg.norm(H, axis=1)
    if np.any(norms == 0):
        raise DataError("geometry_score: all-zero fusion vector")
    unit = H / norms[:, None]
    iu, ju = np.triu_indices(n, k=1)
    if iu.size > max_pairs:
        pick = np.sort(np.random.default_rng(seed).choice(iu.size, size=max_pairs, replace=False))
        iu, ju = iu[pick], ju[pick]
    dist = 1.0 - np.sum(unit[iu] * unit[ju], axis=1)
    gap = np.abs(y[iu] - y[ju])
    if np.ptp(dist) == 0 or np.ptp(gap) == 0:
        return GeometryScore(0.0, True, int(iu.size))
    score, degenerate = _pearson(rankdata(dist), rankdata(gap))
    return GeometryScore(score, degenerate, int(iu.size))


# ----------------------------------------------------------------- export

def fusion_vectors(model: FusionModel, dataset: Dataset, variant: str = "full", batch_size: int = 256) -> np.ndarray:
    chunks = []
    with no_grad():
        for batch in iter_collated(dataset, batch_size):
            chunks.append(model.fusion_variant(batch, variant).values)
    return np.concatenate(chunks, axis=0)


def predictions(model: FusionModel, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    chunks = []
    with no_grad():
        for batch in iter_collated(dataset, batch_size):
            chunks.append(model.predict(model.fuse(*model.encode(batch))).values)
    return np.concatenate(chunks)


def evaluate(model: FusionModel, dataset: Dataset) -> MetricsBundle:
    return compute_metrics(predictions(model, dataset), dataset.labels)


@dataclass
class EmbeddingDump:
    rows: list[dict]

    def for_variant(self, variant: str) -> list[dict]:
        return [r for r in self.rows if r["variant"] == variant]


def export_embeddings(model: FusionModel, dataset: Dataset, variants=("full",), csv_path=None, svg_path=None) -> EmbeddingDump:
    """PCA-project each requested fusion variant independently; optionally write CSV/SVG."""
    if len(dataset) == 0:
        raise DataError("cannot export embeddings of an empty dataset")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ContractError(f"unknown variants {unknown}; expected a subset of {list(VARIANTS)}")
    labels = dataset.labels
    ids = [u.id for u in dataset]
    rows = []
    for variant in variants:
        coords = pca_project(fusion_vectors(model, dataset, variant), k=min(2, len(dataset))).coords
        if coords.shape[1] < 2:
            coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))])
        for i, uid in enumerate(ids):
            rows.append({"id": uid, "variant": variant, "y": float(labels[i]),
                         "pc1": float(coords[i, 0]), "pc2": float(coords[i, 1])})
    dump = EmbeddingDump(rows)
    if csv_path is not None:
        write_embedding_csv(csv_path, dump)
    if svg_path is not None:
        write_scatter_svg(svg_path, dump)
    return dump


def write_embedding_csv(path, dump: EmbeddingDump) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", "variant", "y", "pc1", "pc2"])
            writer.writeheader()
            for row in dump.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def sentiment_color(y: float) -> str:
    """Blue at -3, gray at 0, red at +3, linear in between."""
    blue, gray, red = np.array([33, 102, 172]), np.array([160, 160, 160]), np.array([178, 24, 43])
    t = float(np.clip(y, -3.0, 3.0)) / 3.0
    rgb = gray + (red - gray) * t if t >= 0 else gray + (blue - gray) * (-t)
    r, g, b = (int(round(c)) for c in rgb)
    return f"#{r:02x}{g:02x}{b:02x}"


def write_scatter_svg(path, dump: EmbeddingDump, panel: int = 260, pad: int = 20) -> None:
    """One panel per variant, one circle per sample."""
    variants = list(dict.fromkeys(r["variant"] for r in dump.rows))
    width = panel * max(len(variants), 1)
    height = panel + 24
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for k, variant in enumerate(variants):
        rows = dump.for_variant(variant)
        xs = np.array([r["pc1"] for r in rows])
        ys = np.array([r["pc2"] for r in rows])
        span = max(np.ptp(xs), np.ptp(ys), 1e-12)
        x0 = k * panel
        parts.append(f'<text x="{x0 + panel / 2:.1f}" y="16" text-anchor="middle" font-size="12" font-family="sans-serif">{variant}</text>')
        parts.append(f'<rect x="{x0 + 2}" y="22" width="{panel - 4}" height="{panel - 4}" fill="none" stroke="#cccccc"/>')
        for r, px, py in zip(rows, xs, ys):
            cx = x0 + pad + (px - xs.min()) / span * (panel - 2 * pad)
            cy = 24 + pad + (ys.max() - py) / span * (panel - 2 * pad)
            parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2.5" fill="{sentiment_color(r["y"])}" fill-opacity="0.8"/>')
    parts.append("</svg>")
    path = Path(path)
    try:
        path.write_text("\n".join(parts) + "\n")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
