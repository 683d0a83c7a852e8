"""Detectors over per-round update matrices and Byzantine-robust aggregators.

Per-round detectors score one round's client updates and threshold at
mean + kappa * std; interval detectors look at a window of 2-D projected
models per client and threshold robustly at median +/- 2 * MAD, since the
population they screen contains the very outliers being hunted. Robust
aggregators return the aggregate plus which clients/layers they kept; at
their degenerate parameter settings all of them reduce to plain FedAvg.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DefenseError, InputError
from .seeding import spawn


@dataclass(frozen=True)
class UpdateMatrix:
    """One flat update row per selected client."""

    ids: np.ndarray
    rows: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or ids.shape != (rows.shape[0],):
            raise InputError(f"ids {ids.shape} do not align with rows {rows.shape}")
        if len(np.unique(ids)) != len(ids):
            raise InputError("client ids must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "rows", rows)

    @property
    def n_clients(self) -> int:
        return self.rows.shape[0]


@dataclass(frozen=True)
class DetectionReport:
    detector: str
    ids: np.ndarray
    scores: np.ndarray
    flags: np.ndarray
    threshold: float
    threshold_low: float = None  # set by two-sided detectors
    low_confidence: bool = False

    def flagged_ids(self) -> set:
        return set(int(i) for i in np.asarray(self.ids)[np.asarray(self.flags)])


def _mean_std_report(name, ids, scores, kappa) -> DetectionReport:
    scores = np.asarray(scores, dtype=np.float64)
    threshold = float(scores.mean() + kappa * scores.std())
    return DetectionReport(name, np.asarray(ids), scores, scores > threshold, threshold)


def _median_mad(values: np.ndarray):
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med)))
    return med, mad


def pca_reduce(rows: np.ndarray, k: int) -> np.ndarray:
    """Top-k principal coordinates of per-coordinate standardized rows.

    Zero-variance coordinates stay at zero; components are ordered by
    descending eigenvalue and signed so the largest-magnitude loading is
    positive.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise InputError("need at least 2 rows")
    n, d = rows.shape
    if k > min(n - 1, d):
        raise InputError(f"k={k} exceeds min(rows - 1, dim) = {min(n - 1, d)}")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    standardized = np.where(std > 0, (rows - mean) / safe, 0.0)
    # SVD of the standardized matrix == eigen-decomposition of its covariance
    _, _, vt = np.linalg.svd(standardized, full_matrices=False)
    components = vt[:k]
    for i in range(k):
        pivot = np.argmax(np.abs(components[i]))
        if components[i][pivot] < 0:
            components[i] = -components[i]
    return standardized @ components.T


def detect_pca(updates: UpdateMatrix, k: int = 2, kappa: float = 2.0) -> DetectionReport:
    """Distance from the PCA-space centroid, flagged at mean + kappa * std."""
    if updates.n_clients < 4:
        raise InputError("need at least 4 clients")
    coords = pca_reduce(updates.rows, k)
    scores = np.linalg.norm(coords - coords.mean(axis=0), axis=1)
    return _mean_std_report("pca", updates.ids, scores, kappa)


def kmeans2(points: np.ndarray, seed: int, restarts: int = 20, max_iter: int = 100):
    """Seeded 2-means with farthest-point init; best of `restarts` by inertia.

    Returns (labels, centers, inertia).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    best = None
    for r in range(restarts):
        rng = spawn(seed, "kmeans", r)
        first = int(rng.integers(n))
        second = int(np.argmax(np.linalg.norm(points - points[first], axis=1)))
        centers = points[[first, second]].copy()
        labels = np.zeros(n, dtype=np.int64)
        for _ in range(max_iter):
            dists = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
            new_labels = dists.argmin(axis=1)
            if np.array_equal(new_labels, labels) and _ > 0:
                break
            labels = new_labels
            for c in (0, 1):
                members = points[labels == c]
                if len(members):
                    centers[c] = members.mean(axis=0)
        inertia = float(((points - centers[labels]) ** 2).sum())
        if best is None or inertia < best[2]:
            best = (labels.copy(), centers.copy(), inertia)
    return best


def detect_kmeans(updates: UpdateMatrix, k: int = 2, seed: int = 0) -> DetectionReport:
    """2-means on PCA coordinates; the smaller cluster is flagged.

    Ties go to the cluster farther from the overall centroid. The report is
    marked low-confidence when the clusters are not actually separated
    (inter-center distance below the mean intra-cluster spread).
    """
    if updates.n_clients < 4:
        raise InputError("need at least 4 clients")
    coords = pca_reduce(updates.rows, k)
    labels, centers, _ = kmeans2(coords, seed)
    sizes = np.bincount(labels, minlength=2)
    if sizes[0] != sizes[1]:
        flagged_cluster = int(sizes.argmin())
    else:
        overall = coords.mean(axis=0)
        flagged_cluster = int(np.argmax(np.linalg.norm(centers - overall, axis=1)))
    flags = labels == flagged_cluster
    # diameter-style spread: twice the mean distance to the own-cluster center
    spread = 2.0 * float(np.mean(np.linalg.norm(coords - centers[labels], axis=1)))
    separation = float(np.linalg.norm(centers[0] - centers[1]))
    return DetectionReport("kmeans", updates.ids, flags.astype(np.float64), flags,
                           threshold=0.5, low_confidence=separation < spread)


def detect_cosine(updates: UpdateMatrix, kappa: float = 2.0) -> DetectionReport:
    """Directional outliers: score_j = 1 - mean_{i != j} cos(u_j, u_i)."""
    if updates.n_clients < 3:
        raise InputError("need at least 3 clients")
    norms = np.linalg.norm(updates.rows, axis=1)
    if np.any(norms == 0):
        bad = int(updates.ids[int(np.argmin(norms))])
        raise InputError(f"client {bad} uploaded a zero-norm update")
    unit = updates.rows / norms[:, None]
    cos = unit @ unit.T
    n = updates.n_clients
    mean_cos = (cos.sum(axis=1) - 1.0) / (n - 1)  # drop the self-similarity
    return _mean_std_report("cosine", updates.ids, 1.0 - mean_cos, kappa)


def detect_dnc(updates: UpdateMatrix, subsample_dim: int = 2000, c_mult: float = 1.0,
               f_est: int = 1, seed: int = 0) -> DetectionReport:
    """Flag the largest squared projections onto the top singular direction
    of a centered, coordinate-subsampled update matrix."""
    if updates.n_clients < 4:
        raise InputError("need at least 4 clients")
    if f_est >= updates.n_clients / 2:
        raise InputError(f"f_est={f_est} must be below half the clients")
    if f_est < 0:
        raise InputError("f_est must be >= 0")
    d = updates.rows.shape[1]
    take = min(subsample_dim, d)
    cols = spawn(seed, "dnc-cols").choice(d, size=take, replace=False)
    sub = updates.rows[:, np.sort(cols)]
    centered = sub - sub.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    scores = (centered @ vt[0]) ** 2
    n_flag = int(np.ceil(c_mult * f_est))
    flags = np.zeros(updates.n_clients, dtype=bool)
    if n_flag > 0:
        # deterministic tie-break: by descending score, then ascending id
        order = np.lexsort((updates.ids, -scores))
        flags[order[:n_flag]] = True
    threshold = float(scores[flags].min()) if n_flag > 0 else float("inf")
    return DetectionReport("dnc", updates.ids, scores, flags, threshold)


def _window_means(history: dict) -> tuple:
    ids = np.asarray(sorted(history), dtype=np.int64)
    means = []
    for cid in ids:
        points = np.asarray(history[cid], dtype=np.float64)
        if points.ndim != 2 or len(points) < 1:
            raise InputError(f"client {cid} has an empty projection window")
        means.append(points.mean(axis=0))
    return ids, np.asarray(means)


def interval_distance(history: dict) -> DetectionReport:
    """Interval review: distance between window-mean projections.

    history maps client id -> list of 2-D projected models collected over the
    review window. s_j is the mean distance from client j's window mean to
    every client's (self included, contributing zero); flagged above
    median + 2 * MAD.
    """
    ids, means = _window_means(history)
    if len(ids) < 2:
        raise InputError("need at least 2 clients in the window")
    dists = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    scores = dists.mean(axis=1)
    med, mad = _median_mad(scores)
    threshold = med + 2.0 * mad
    return DetectionReport("interval_distance", ids, scores, scores > threshold, threshold)


def detect_consistency(history: dict) -> DetectionReport:
    """Footprint review: per-client dispersion of its own projected models.

    Dispersion is the mean distance of a client's window points to their own
    centroid. Clients are flagged on either side: abnormally consistent
    (below median - 2 * MAD, the generative mode-collapse signature) or
    abnormally erratic (above median + 2 * MAD).
    """
    ids = np.asarray(sorted(history), dtype=np.int64)
    scores = []
    for cid in ids:
        points = np.asarray(history[cid], dtype=np.float64)
        if len(points) < 3:
            raise InputError(f"client {cid} has fewer than 3 points in the window")
        scores.append(float(np.linalg.norm(points - points.mean(axis=0), axis=1).mean()))
    scores = np.asarray(scores)
    med, mad = _median_mad(scores)
    high = med + 2.0 * mad
    low = med - 2.0 * mad
    flags = (scores > high) | (scores < low)
    return DetectionReport("consistency", ids, scores, flags, high, threshold_low=low)


def aggregate_fedavg(rows: np.ndarray) -> np.ndarray:
    """Coordinate-wise arithmetic mean."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise InputError("need at least one update")
    return rows.mean(axis=0)


def aggregate_multikrum(updates: UpdateMatrix, f: int, m: int = None):
    """Average the m rows with the smallest sums of squared distances to
    their B - f - 2 nearest neighbors. Returns (aggregate, selected ids)."""
    b = updates.n_clients
    if m is None:
        m = b - f
    if b < 2 * f + 3:
        raise InputError(f"multikrum needs B >= 2f + 3, got B={b}, f={f}")
    if not 1 <= m <= b - f:
        raise InputError(f"need 1 <= m <= B - f, got m={m}")
    diffs = updates.rows[:, None, :] - updates.rows[None, :, :]
    sq = (diffs ** 2).sum(axis=2)
    neighbours = b - f - 2
    scores = np.empty(b)
    for j in range(b):
        others = np.sort(np.delete(sq[j], j))
        scores[j] = others[:neighbours].sum()
    order = np.lexsort((updates.ids, scores))  # ties by lower client id
    chosen = np.sort(order[:m])  # row order, so m = B reduces to FedAvg exactly
    return aggregate_fedavg(updates.rows[chosen]), np.sort(updates.ids[chosen])


def _sign_stats(rows: np.ndarray, subsample_dim: int, seed: int) -> np.ndarray:
    d = rows.shape[1]
    take = min(subsample_dim, d)
    cols = np.sort(spawn(seed, "signguard-cols").choice(d, size=take, replace=False))
    sub = rows[:, cols]
    pos = (sub > 0).mean(axis=1)
    neg = (sub < 0).mean(axis=1)
    zero = (sub == 0).mean(axis=1)
    return np.column_stack([pos, neg, zero])


def aggregate_signguard(updates: UpdateMatrix, norm_band=(0.1, 3.0),
                        subsample_dim: int = 2000, seed: int = 0):
    """Magnitude filter then sign-statistics clustering; averages survivors.

    Stage 1 drops rows whose L2 norm falls outside norm_band x median norm.
    Stage 2 clusters (frac positive, frac negative, frac zero) statistics of
    a seeded coordinate subsample with 2-means and keeps the larger cluster.
    Raises DefenseError when nothing survives; the caller falls back to the
    previous global model. Returns (aggregate, surviving ids).
    """
    if updates.n_clients < 3:
        raise InputError("need at least 3 clients")
    norms = np.linalg.norm(updates.rows, axis=1)
    med = float(np.median(norms))
    keep = (norms >= norm_band[0] * med) & (norms <= norm_band[1] * med)
    if not keep.any():
        raise DefenseError("norm filter dropped every update")
    rows = updates.rows[keep]
    ids = updates.ids[keep]
    if len(ids) == 1:
        return rows[0].copy(), ids.copy()
    stats = _sign_stats(rows, subsample_dim, seed)
    if np.allclose(stats, stats[0]):
        return aggregate_fedavg(rows), np.sort(ids)
    labels, centers, _ = kmeans2(stats, spawn(seed, "signguard-km").integers(2 ** 31))
    sizes = np.bincount(labels, minlength=2)
    if sizes[0] != sizes[1]:
        benign = int(sizes.argmax())
    else:
        overall = np.median(stats, axis=0)  # tie: keep the cluster nearer the median stats
        benign = int(np.argmin(np.linalg.norm(centers - overall, axis=1)))
    survivors = labels == benign
    if not survivors.any():
        raise DefenseError("sign clustering dropped every update")
    return aggregate_fedavg(rows[survivors]), np.sort(ids[survivors])


def _layer_slices(layout) -> list:
    """Group flat-vector slices by network layer (weight + bias together)."""
    slices = {}
    offset = 0
    for entry in layout:
        slices.setdefault(entry.layer, []).append((offset, offset + entry.count))
        offset += entry.count
    merged = []
    for layer in sorted(slices):
        parts = slices[layer]
        merged.append((parts[0][0], parts[-1][1]))
    return merged


def sparsify_topk(rows: np.ndarray, slices: list, k_frac: float) -> np.ndarray:
    """Within each layer keep the top ceil(k_frac * n) coordinates by
    magnitude per client; zero the rest."""
    if not 0.0 < k_frac <= 1.0:
        raise InputError("k_frac must be in (0, 1]")
    out = np.zeros_like(rows)
    for lo, hi in slices:
        block = rows[:, lo:hi]
        n = hi - lo
        keep = min(n, int(np.ceil(k_frac * n)))
        if keep == n:
            out[:, lo:hi] = block
            continue
        # stable selection: by descending magnitude, ties to lower index
        order = np.argsort(-np.abs(block), axis=1, kind="stable")[:, :keep]
        mask = np.zeros_like(block, dtype=bool)
        np.put_along_axis(mask, order, True, axis=1)
        out[:, lo:hi] = np.where(mask, block, 0.0)
    return out


def direction_purity(block: np.ndarray) -> np.ndarray:
    """Per client: fraction of its nonzero coordinates whose sign matches the
    coordinate-wise sign-sum majority across clients. Vacuously 1 for an
    all-zero client layer."""
    signs = np.sign(block)
    majority = np.sign(signs.sum(axis=0))
    match = (signs == majority) & (signs != 0)
    nonzero = (signs != 0).sum(axis=1)
    with np.errstate(invalid="ignore"):
        purity = np.where(nonzero > 0, match.sum(axis=1) / np.maximum(nonzero, 1), 1.0)
    return purity


def aggregate_lasa(updates: UpdateMatrix, layout, prev_global: np.ndarray,
                   k_frac: float = 0.3, mag_band=(0.5, 2.0), purity_min: float = 0.5):
    """Layer-adaptive sparsified aggregation.

    Per client and layer, updates are top-k sparsified; a client's layer is
    accepted iff its norm sits inside mag_band x the median layer norm and
    its direction purity reaches purity_min. Each layer aggregates as the
    mean over accepted clients, falling back to the previous global layer
    when nobody qualifies. Returns (aggregate, acceptance matrix).
    """
    slices = _layer_slices(layout)
    total = slices[-1][1]
    if updates.rows.shape[1] != total:
        raise InputError(f"layout covers {total} coordinates but rows have {updates.rows.shape[1]}")
    prev_global = np.asarray(prev_global, dtype=np.float64)
    if prev_global.shape != (total,):
        raise InputError("previous global vector does not match layout")
    sparse = sparsify_topk(updates.rows, slices, k_frac)
    out = np.empty(total)
    accepted = np.zeros((updates.n_clients, len(slices)), dtype=bool)
    for li, (lo, hi) in enumerate(slices):
        block = sparse[:, lo:hi]
        norms = np.linalg.norm(block, axis=1)
        med = float(np.median(norms))
        in_band = (norms >= mag_band[0] * med) & (norms <= mag_band[1] * med)
        purity = direction_purity(block)
        ok = in_band & (purity >= purity_min)
        accepted[:, li] = ok
        out[lo:hi] = block[ok].mean(axis=0) if ok.any() else prev_global[lo:hi]
    return out, accepted
