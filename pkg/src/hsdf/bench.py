"""Surface-to-surface benchmark: chamfer distance, normal error,
completeness, success rate, pose-angle buckets."""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import TriangleMesh
from .parallel import parallel_map

_BUCKETS = ((0.0, 5.0), (5.0, 30.0), (30.0, 60.0), (60.0, 90.0))
_BUCKET_LABELS = ("0-5", "5-30", "30-60", "60-90")
_ABSENT = "---"


@dataclass
class MetricConfig:
    cd_samples: int = 10000
    cr_threshold: Optional[float] = None  # mm; None = 2 * median gt edge length
    mne_formula: str = "norm-diff"  # or "one-minus-cos"
    alignment: str = "none"  # or "rigid-icp" (diagnostics only)
    seed: int = 0

    def validate(self) -> None:
        if self.cd_samples <= 0:
            raise ValueError("cd_samples must be positive")
        if self.cr_threshold is not None and not self.cr_threshold > 0:
            raise ValueError("cr_threshold must be positive")
        if self.mne_formula not in ("norm-diff", "one-minus-cos"):
            raise ValueError("unknown mne_formula")
        if self.alignment not in ("none", "rigid-icp"):
            raise ValueError("unknown alignment")


def nearest_neighbor(points, queries):
    """Exact nearest neighbors; returns (indices, distances) per query."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("reference point set is empty")
    dist, idx = cKDTree(p).query(q)
    return np.asarray(idx, dtype=np.int64), np.asarray(dist, dtype=np.float64)


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator):
    """Area-weighted surface samples with their face normals.

    Face choice uses the cumulative-area inverse CDF, so meshes that differ
    only by uniform scaling draw the same faces and barycenters from the
    same generator state."""
    if mesh.num_faces == 0:
        raise ValueError("cannot sample an empty mesh")
    tri = mesh.vertices[mesh.faces]
    cr = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cr, axis=1)
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    cum = np.cumsum(areas)
    u = rng.uniform(0.0, cum[-1], n)
    fi = np.minimum(np.searchsorted(cum, u, side="right"), mesh.num_faces - 1)
    r1 = rng.uniform(size=n)
    r2 = rng.uniform(size=n)
    s = np.sqrt(r1)
    w = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    pts = np.einsum("nk,nkd->nd", w, tri[fi])
    nrm = cr[fi]
    ln = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = np.where(ln > 0, nrm / np.where(ln == 0, 1.0, ln), 0.0)
    return pts, nrm


def median_edge_length(mesh: TriangleMesh) -> float:
    e = np.vstack([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    e.sort(axis=1)
    e = np.unique(e, axis=0)
    d = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    return float(np.median(d))


def _resolve_threshold(gt: TriangleMesh, cfg: MetricConfig) -> float:
    return cfg.cr_threshold if cfg.cr_threshold is not None else 2.0 * median_edge_length(gt)


def _samples(pred, gt, cfg):
    """Each mesh gets a generator at the same state: identical meshes yield
    identical samples, and CD/MNE/CR become exact self-identities."""
    pred_pts, pred_nrm = sample_surface(pred, cfg.cd_samples, np.random.default_rng(cfg.seed))
    gt_pts, gt_nrm = sample_surface(gt, cfg.cd_samples, np.random.default_rng(cfg.seed))
    if cfg.alignment == "rigid-icp":
        R, t = icp_align(pred_pts, gt_pts)
        pred_pts = pred_pts @ R.T + t
        pred_nrm = pred_nrm @ R.T
    return pred_pts, pred_nrm, gt_pts, gt_nrm


def chamfer_distance(pred: TriangleMesh, gt: TriangleMesh, cfg: MetricConfig = None) -> float:
    """Symmetric mean point-to-nearest-sample distance in mm."""
    cfg = cfg or MetricConfig()
    pred_pts, _, gt_pts, _ = _samples(pred, gt, cfg)
    _, d_pg = nearest_neighbor(gt_pts, pred_pts)
    _, d_gp = nearest_neighbor(pred_pts, gt_pts)
    return float(0.5 * (d_pg.mean() + d_gp.mean()))


def mean_normal_error(pred: TriangleMesh, gt: TriangleMesh, cfg: MetricConfig = None) -> float:
    """For each gt sample, compare its normal with the nearest pred sample's."""
    cfg = cfg or MetricConfig()
    pred_pts, pred_nrm, gt_pts, gt_nrm = _samples(pred, gt, cfg)
    idx, _ = nearest_neighbor(pred_pts, gt_pts)
    if cfg.mne_formula == "one-minus-cos":
        return float(np.mean(1.0 - np.sum(pred_nrm[idx] * gt_nrm, axis=1)))
    return float(np.mean(np.linalg.norm(pred_nrm[idx] - gt_nrm, axis=1)))


def completeness_rate(pred: TriangleMesh, gt: TriangleMesh, cfg: MetricConfig = None) -> float:
    """Percent of gt samples within cr_threshold of the pred samples."""
    cfg = cfg or MetricConfig()
    thresh = _resolve_threshold(gt, cfg)
    pred_pts, _, gt_pts, _ = _samples(pred, gt, cfg)
    _, d_gp = nearest_neighbor(pred_pts, gt_pts)
    return float(100.0 * np.mean(d_gp < thresh))


# -------------------------------------------------------------- alignment


def umeyama_rigid(src: np.ndarray, dst: np.ndarray):
    """Least-squares rigid transform (R, t) mapping src toward dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def icp_align(src_pts: np.ndarray, dst_pts: np.ndarray, iters: int = 20):
    """Iterative closest point with Umeyama updates; diagnostics only."""
    R = np.eye(3)
    t = np.zeros(3)
    cur = src_pts
    for _ in range(iters):
        idx, _ = nearest_neighbor(dst_pts, cur)
        Ri, ti = umeyama_rigid(cur, dst_pts[idx])
        cur = cur @ Ri.T + ti
        R = Ri @ R
        t = Ri @ t + ti
    return R, t


# -------------------------------------------------------------- reporting


@dataclass
class BucketResult:
    label: str
    pairs: int
    successes: int
    cd: Optional[float]
    mne: Optional[float]
    cr: Optional[float]


@dataclass
class BenchmarkReport:
    buckets: List[BucketResult]
    success_rate: float

    def to_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "buckets": [
                {
                    "label": b.label,
                    "pairs": b.pairs,
                    "successes": b.successes,
                    "cd": b.cd,
                    "mne": b.mne,
                    "cr": b.cr,
                }
                for b in self.buckets
            ],
        }


def _bucket_index(angle: float) -> int:
    for i, (lo, hi) in enumerate(_BUCKETS):
        if lo <= angle < hi or (i == len(_BUCKETS) - 1 and angle == hi):
            return i
    raise ValueError(f"pose angle {angle} outside [0, 90]")


def _pair_metrics(job):
    pred, gt, cfg = job
    return (
        chamfer_distance(pred, gt, cfg),
        mean_normal_error(pred, gt, cfg),
        completeness_rate(pred, gt, cfg),
    )


def evaluate_benchmark(pairs: list, cfg: MetricConfig = None) -> BenchmarkReport:
    """pairs: dicts with keys pred (mesh, possibly empty, or None), gt
    (mesh), pose_angle (degrees). Bucket metrics average successful pairs;
    the success rate counts all pairs."""
    cfg = cfg or MetricConfig()
    cfg.validate()
    if not pairs:
        raise ValueError("no pairs to evaluate")
    ok = []
    bucket_of = []
    for p in pairs:
        gt = p["gt"]
        if gt is None or gt.num_faces == 0:
            raise ValueError("gt mesh missing or empty")
        pred = p["pred"]
        bucket_of.append(_bucket_index(float(p["pose_angle"])))
        ok.append(pred is not None and pred.num_faces > 0)
    jobs = [(p["pred"], p["gt"], cfg) for p, good in zip(pairs, ok) if good]
    metrics = parallel_map(_pair_metrics, jobs)
    per_pair = iter(metrics)
    by_bucket = [[] for _ in _BUCKETS]
    succ_by_bucket = [0] * len(_BUCKETS)
    n_by_bucket = [0] * len(_BUCKETS)
    for good, b in zip(ok, bucket_of):
        n_by_bucket[b] += 1
        if good:
            succ_by_bucket[b] += 1
            by_bucket[b].append(next(per_pair))
    buckets = []
    for i, label in enumerate(_BUCKET_LABELS):
        rows = by_bucket[i]
        if rows:
            cd = float(np.mean([r[0] for r in rows]))
            mne = float(np.mean([r[1] for r in rows]))
            cr = float(np.mean([r[2] for r in rows]))
        else:
            cd = mne = cr = None
        buckets.append(BucketResult(label, n_by_bucket[i], succ_by_bucket[i], cd, mne, cr))
    rate = 100.0 * sum(ok) / len(ok)
    return BenchmarkReport(buckets, float(rate))


def format_report(report: BenchmarkReport) -> str:
    """Aligned text table: one CD / MNE / CR row per pose bucket."""
    lines = ["pose     CD / MNE / CR"]
    for b in report.buckets:
        if b.cd is None:
            row = _ABSENT
        else:
            row = f"{b.cd:.2f} / {b.mne:.3f} / {b.cr:.1f}"
        lines.append(f"{b.label:<8} {row}  [{b.successes}/{b.pairs}]")
    lines.append(f"Succ.    {report.success_rate:.1f}")
    return "\n".join(lines)
