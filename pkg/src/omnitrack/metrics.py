"""Point-tracking metrics: position accuracy, Average Jaccard, occlusion accuracy,
temporal coherence."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

THRESHOLDS = (1, 2, 4, 8, 16)
PROTOCOL_RESOLUTION = 256


@dataclass
class TrackSet:
    """Tracks over a whole video: positions (N, T, 2) in pixels, occluded (N, T)."""

    positions: np.ndarray
    occluded: np.ndarray
    layers: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.occluded = np.asarray(self.occluded, dtype=bool)
        if self.positions.size == 0:
            n = self.occluded.shape[1] if self.occluded.ndim == 2 else 0
            self.positions = self.positions.reshape(0, n, 2)
            self.occluded = self.occluded.reshape(0, n)
        if self.positions.ndim != 3 or self.positions.shape[-1] != 2:
            raise ValueError(f"positions must be (T, N, 2), got {self.positions.shape}")
        if self.occluded.shape != self.positions.shape[:2]:
            raise ValueError("occlusion flags and positions disagree in shape")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_frames(self) -> int:
        return self.positions.shape[1]

    @property
    def visible(self) -> np.ndarray:
        return ~self.occluded

    def query_frames(self) -> np.ndarray:
        """First visible frame of each track (first-frame query mode)."""
        return np.argmax(self.visible, axis=1)

    def query_points(self) -> np.ndarray:
        q = self.query_frames()
        return self.positions[np.arange(len(self)), q]

    def to_json(self) -> dict:
        tracks = [
            [[float(x), float(y), bool(o)] for (x, y), o in zip(pos, occ)]
            for pos, occ in zip(self.positions, self.occluded)
        ]
        out = {"tracks": tracks}
        if self.layers is not None:
            out["layers"] = [int(v) for v in self.layers]
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TrackSet":
        arr = np.asarray(data["tracks"], dtype=np.float64)
        if arr.size == 0:
            return cls(np.zeros((0, 0, 2)), np.zeros((0, 0), bool))
        layers = np.asarray(data["layers"]) if "layers" in data else None
        return cls(arr[..., :2], arr[..., 2] > 0.5, layers=layers)


def save_ground_truth(tracks: TrackSet, path: str | Path, resolution: tuple[int, int] | None = None) -> Path:
    data = tracks.to_json()
    if resolution is not None:
        data["height"], data["width"] = int(resolution[0]), int(resolution[1])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data))
    return path


def load_ground_truth(path: str | Path) -> tuple[TrackSet, tuple[int, int] | None]:
    data = json.loads(Path(path).read_text())
    res = (data["height"], data["width"]) if "height" in data else None
    return TrackSet.from_json(data), res


def position_accuracy(
    pred: np.ndarray, gt: np.ndarray, gt_occluded: np.ndarray, thresholds=THRESHOLDS
) -> tuple[dict[int, float], float] | None:
    """Fraction of gt-visible (point, frame) pairs within each threshold, and their mean."""
    vis = ~np.asarray(gt_occluded, dtype=bool)
    if not vis.any():
        return None
    dist = np.linalg.norm(np.asarray(pred, float) - np.asarray(gt, float), axis=-1)[vis]
    per = {d: float(np.mean(dist <= d)) for d in thresholds}
    return per, float(np.mean(list(per.values())))


def average_jaccard(
    pred: np.ndarray,
    pred_visible: np.ndarray,
    gt: np.ndarray,
    gt_occluded: np.ndarray,
    thresholds=THRESHOLDS,
) -> tuple[dict[int, float], float] | None:
    gt_vis = ~np.asarray(gt_occluded, dtype=bool)
    if not gt_vis.any():
        return None
    pred_vis = np.asarray(pred_visible, dtype=bool)
    dist = np.linalg.norm(np.asarray(pred, float) - np.asarray(gt, float), axis=-1)
    per = {}
    for d in thresholds:
        within = dist <= d
        tp = np.sum(pred_vis & gt_vis & within)
        fp = np.sum(pred_vis & (~gt_vis | ~within))
        fn = np.sum(gt_vis & (~pred_vis | ~within))
        per[d] = float(tp / (tp + fp + fn))
    return per, float(np.mean(list(per.values())))


def occlusion_accuracy(pred_visible: np.ndarray, gt_occluded: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred_visible, bool) == ~np.asarray(gt_occluded, bool)))


def temporal_coherence(pred: np.ndarray, gt: np.ndarray, gt_occluded: np.ndarray) -> float | None:
    """Mean L2 distance between predicted and gt accelerations.

    Acceleration at t is (p[t+1] - p[t]) - (p[t] - p[t-1]); only frames where
    the gt point is visible at t-1, t and t+1 count.
    """
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    if pred.shape[1] < 3:
        return None
    vis = ~np.asarray(gt_occluded, bool)
    ok = vis[:, :-2] & vis[:, 1:-1] & vis[:, 2:]
    if not ok.any():
        return None
    acc_p = pred[:, 2:] - 2 * pred[:, 1:-1] + pred[:, :-2]
    acc_g = gt[:, 2:] - 2 * gt[:, 1:-1] + gt[:, :-2]
    return float(np.linalg.norm(acc_p - acc_g, axis=-1)[ok].mean())


@dataclass
class MetricsReport:
    aj: float | None
    delta_avg: float | None
    deltas: dict[int, float] = field(default_factory=dict)
    jaccards: dict[int, float] = field(default_factory=dict)
    oa: float | None = None
    tc: float | None = None
    n_points: int = 0
    n_frames: int = 0
    per_video: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deltas"] = {str(k): v for k, v in self.deltas.items()}
        d["jaccards"] = {str(k): v for k, v in self.jaccards.items()}
        return d

    def table(self) -> str:
        def fmt(v):
            return "  n/a" if v is None else f"{v:.4f}"

        rows = [("AJ", self.aj), ("<delta_avg", self.delta_avg), ("OA", self.oa), ("TC", self.tc)]
        rows += [(f"<delta {k}px", v) for k, v in self.deltas.items()]
        return "\n".join(f"{name:<14}{fmt(val)}" for name, val in rows)


def evaluate(
    pred: TrackSet,
    gt: TrackSet,
    resolution: int | None = PROTOCOL_RESOLUTION,
    frame_size: tuple[int, int] | None = None,
    thresholds=THRESHOLDS,
) -> MetricsReport:
    """Score one video's predicted tracks against ground truth.

    ``pred.occluded`` holds the predicted occlusion flags. Coordinates are
    rescaled from ``frame_size`` (H, W) to ``resolution`` x ``resolution``
    before thresholds apply; ``resolution=None`` scores in native pixels.
    """
    if len(pred) != len(gt) or pred.n_frames != gt.n_frames:
        raise ValueError(f"track count/length mismatch: pred {pred.positions.shape[:2]} vs gt {gt.positions.shape[:2]}")
    scale = np.ones(2)
    if resolution is not None:
        if frame_size is None:
            raise ValueError("frame_size is required to rescale to the protocol resolution")
        h, w = frame_size
        scale = np.array([resolution / w, resolution / h])
    p = pred.positions * scale
    g = gt.positions * scale
    pv = ~pred.occluded
    pa = position_accuracy(p, g, gt.occluded, thresholds)
    aj = average_jaccard(p, pv, g, gt.occluded, thresholds)
    report = MetricsReport(
        aj=None if aj is None else aj[1],
        delta_avg=None if pa is None else pa[1],
        deltas={} if pa is None else pa[0],
        jaccards={} if aj is None else aj[0],
        oa=occlusion_accuracy(pv, gt.occluded) if len(gt) else None,
        tc=temporal_coherence(p, g, gt.occluded) if len(gt) else None,
        n_points=len(gt),
        n_frames=gt.n_frames,
    )
    report.per_video = [report.to_dict()]
    return report


def aggregate(reports: list[MetricsReport]) -> MetricsReport:
    """Average per-video reports; missing values are skipped."""

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    keys = sorted({k for r in reports for k in r.deltas})
    return MetricsReport(
        aj=mean(r.aj for r in reports),
        delta_avg=mean(r.delta_avg for r in reports),
        deltas={k: mean(r.deltas.get(k) for r in reports) for k in keys},
        jaccards={k: mean(r.jaccards.get(k) for r in reports) for k in keys},
        oa=mean(r.oa for r in reports),
        tc=mean(r.tc for r in reports),
        n_points=sum(r.n_points for r in reports),
        n_frames=max((r.n_frames for r in reports), default=0),
        per_video=[r.to_dict() for r in reports],
    )
