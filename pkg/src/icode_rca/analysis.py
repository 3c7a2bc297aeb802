"""
Post-hoc analysis of a trained ICODE model: anomaly scores and thresholds,
causality matrices, anomaly-type classification, root-cause ranking and metrics.

Causality and difference matrices are plain p x p float64 numpy arrays.
"""
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import confusion_matrix, roc_auc_score

from icode_rca import configure_logger
from icode_rca.anomalies import AnomalyKind
from icode_rca.errors import ShapeError, ValidationError
from icode_rca.model import phi_forward, predict_next
from icode_rca.systems import DependencyGraph

logger = configure_logger(__name__)

DEFAULT_CUTOFF = 0.8
DEFAULT_TOP_M = 10
TOPK = (1, 3, 5)


def _square(matrix, name="matrix"):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {matrix.shape}")
    return matrix


# Detection

def residuals(model, traj, cfg):
    """Summed absolute one-step prediction error for samples 1..T-1."""
    now, target = traj.pairs()
    if now.shape[0] == 0:
        return np.zeros(0)
    return np.abs(predict_next(model, now, cfg) - target).sum(axis=1)


def anomaly_scores(model, traj, window, cfg):
    """
    Sum of absolute one-step residuals over consecutive non-overlapping windows.
    Window w covers samples w*window .. (w+1)*window - 1, the same grid anomaly segments
    are laid on; sample 0 has no predecessor and contributes no residual. A shorter tail
    is not scored.
    """
    if window < 1:
        raise ValidationError(f"window must be at least 1, got {window}", field="analysis.window")
    count = len(traj) // window
    if count < 1:
        raise ValidationError(f"trajectory of {len(traj)} samples is shorter than one {window}-sample window")
    error = np.concatenate([[0.0], residuals(model, traj, cfg)])
    return error[:count * window].reshape(count, window).sum(axis=1)


def pick_threshold(normal_scores, quantile=0.99):
    """
    Smallest observed normal score at or above the requested quantile position, raised to
    the smallest positive float so a window predicted without any error is never flagged.
    """
    scores = np.asarray(normal_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValidationError("threshold needs at least one normal score")
    if not 0.0 < quantile < 1.0:
        raise ValidationError(f"quantile must lie in (0, 1), got {quantile}", field="analysis.quantile")
    return max(float(np.quantile(scores, quantile, method="higher")), float(np.nextafter(0.0, 1.0)))


@dataclass
class DetectionMetrics:
    precision: float
    recall: float
    f1: float
    true_positives: int
    false_positives: int
    false_negatives: int
    true_negatives: int
    undefined: list = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)


def detection_metrics(flags, labels):
    """Precision, recall and F1; a zero denominator yields 0 and is listed in `undefined`."""
    flags = np.asarray(flags, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if flags.shape != labels.shape:
        raise ShapeError(f"{flags.shape[0]} flags for {labels.shape[0]} labels")
    tn, fp, fn, tp = (int(v) for v in confusion_matrix(labels, flags, labels=[0, 1]).ravel())
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return DetectionMetrics(precision, recall, f1, tp, fp, fn, tn, undefined)


@dataclass
class DetectionReport:
    """
    Window scores pooled over one or more periods.
    - flags: score >= threshold, one per window
    - window_labels: 1 if any sample of the window is anomalous
    - sample_flags, sample_labels: window decisions spread over the samples they cover
    """

    scores: np.ndarray
    threshold: float
    flags: np.ndarray
    window_labels: np.ndarray
    sample_flags: np.ndarray
    sample_labels: np.ndarray
    metrics: DetectionMetrics = None
    periods: list = field(default_factory=list)

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "scores": self.scores.tolist(),
            "flags": self.flags.astype(int).tolist(),
            "window_labels": self.window_labels.astype(int).tolist(),
            "periods": self.periods,
            "metrics": self.metrics.to_dict() if self.metrics else None,
        }


def detect(model, datasets, threshold, window, cfg):
    """Score every period separately, flag windows and evaluate at sample level."""
    scores, flags, window_labels, sample_flags, sample_labels, periods = [], [], [], [], [], []
    for dataset in datasets:
        period_scores = anomaly_scores(model, dataset.trajectory, window, cfg)
        count = period_scores.size
        covered = dataset.labels[:count * window]
        period_flags = period_scores >= threshold
        scores.append(period_scores)
        flags.append(period_flags)
        window_labels.append(covered.reshape(count, window).max(axis=1))
        sample_flags.append(np.repeat(period_flags.astype(np.int64), window))
        sample_labels.append(covered)
        periods.append({"period": dataset.period, "windows": int(count)})
    report = DetectionReport(
        np.concatenate(scores), float(threshold), np.concatenate(flags), np.concatenate(window_labels),
        np.concatenate(sample_flags), np.concatenate(sample_labels), periods=periods,
    )
    report.metrics = detection_metrics(report.sample_flags, report.sample_labels)
    return report


# Causality

def causality_matrix(model, traj):
    """Entrywise median over time of |Phi(X(t))|."""
    if len(traj) < 1:
        raise ValidationError("causality needs at least one sample")
    return np.median(np.abs(phi_forward(model, traj.states)), axis=0)


def diff_matrix(c, c_prime):
    c = _square(c, "C")
    c_prime = _square(c_prime, "C'")
    if c.shape != c_prime.shape:
        raise ShapeError(f"causality matrices differ in shape: {c.shape} vs {c_prime.shape}")
    return np.abs(c - c_prime)


@dataclass
class MeasurementScore:
    score: float
    top_mask: np.ndarray
    gamma: float
    degenerate: bool = False


def top_selection(d, m):
    """Entries of D at or above its m-th largest value; gamma = 0 keeps only positive entries."""
    d = _square(d, "D")
    if m < 1 or m > d.size:
        raise ValidationError(f"m must lie in 1..{d.size}, got {m}", field="analysis.m")
    gamma = float(np.sort(d, axis=None)[::-1][m - 1])
    mask = d >= gamma if gamma > 0 else d > 0
    return mask, gamma


def line_fraction(mask):
    """Largest share of the selected entries lying on a single row or column."""
    selected = int(mask.sum())
    if selected == 0:
        return 0.0
    best = max(mask.sum(axis=1).max(), mask.sum(axis=0).max())
    return float(best) / selected


def measurement_score(c, c_prime, m=DEFAULT_TOP_M):
    """
    M = fraction of the top-m entries of |C - C'| on the best row or column.
    With ties above the m-th value the fraction is over every selected entry.
    """
    d = diff_matrix(c, c_prime)
    if not np.any(d > 0):
        return MeasurementScore(0.0, np.zeros(d.shape, dtype=bool), 0.0, degenerate=True)
    mask, gamma = top_selection(d, m)
    return MeasurementScore(line_fraction(mask), mask, gamma)


def classify(score, cutoff=DEFAULT_CUTOFF):
    """Measurement iff M >= cutoff."""
    if not 0.0 <= score <= 1.0:
        raise ValidationError(f"measurement score must lie in [0, 1], got {score}")
    return AnomalyKind.MEASUREMENT if score >= cutoff else AnomalyKind.CYBER


def binarize_causality(c, seed=0):
    """Two-cluster 1-D k-means over all entries; the high-centroid cluster becomes the edge set."""
    c = _square(c, "C")
    if c.shape[0] < 2:
        raise ValidationError("binarization needs p >= 2")
    values = c.reshape(-1, 1)
    if np.ptp(values) == 0:
        logger.warning("All causality weights are equal, binarized graph is degenerate")
        return DependencyGraph(np.ones(c.shape, dtype=bool), degenerate=True)
    kmeans = KMeans(n_clusters=2, init="k-means++", n_init=10, max_iter=100, random_state=seed).fit(values)
    high = int(np.argmax(kmeans.cluster_centers_.ravel()))
    return DependencyGraph((kmeans.labels_ == high).reshape(c.shape))


def support_auroc(c, graph):
    """How well causality weights rank true edges above non-edges."""
    truth = graph.adjacency.ravel()
    if truth.all() or not truth.any():
        raise ValidationError("AUROC needs both edges and non-edges in the reference graph")
    return float(roc_auc_score(truth, _square(c, "C").ravel()))


# Root cause

def root_cause_measurement(d):
    """S(i): total change in row i plus column i of D."""
    d = _square(d, "D")
    return d.sum(axis=1) + d.sum(axis=0)


def root_cause_cyber(scores, graph):
    """S'(i): sum of S over variables linked to i in either direction (i itself iff self-edge)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (graph.p,):
        raise ShapeError(f"{scores.shape[0]} scores for a graph of {graph.p} variables")
    return graph.undirected().astype(np.float64) @ scores


def rank(scores):
    """Variables by descending score, lower index first on ties."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


@dataclass
class RcaResult:
    """
    Classification and ranking for one anomaly instance.
    - kind: classified anomaly type
    - measurement_score: M, or None when the kind was given
    - scores: S for measurement, S' for cyber
    - root: ground-truth root cause when known
    """

    kind: AnomalyKind
    scores: np.ndarray
    ranking: np.ndarray
    measurement_score: float = None
    degenerate: bool = False
    root: int = None

    def position(self):
        if self.root is None:
            return None
        return int(np.flatnonzero(self.ranking == self.root)[0])

    def hit(self, k):
        return self.root is not None and self.position() < k

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "measurement_score": self.measurement_score,
            "degenerate": self.degenerate,
            "scores": self.scores.tolist(),
            "ranking": self.ranking.tolist(),
            "root": self.root,
        }


def localize(kind, d, graph, root=None, score=None):
    """Rank root-cause candidates by S (measurement) or by S' on the given graph (cyber)."""
    kind = AnomalyKind(kind)
    scores = root_cause_measurement(d)
    if kind is AnomalyKind.CYBER:
        scores = root_cause_cyber(scores, graph)
    measurement = score.score if score is not None else None
    degenerate = score.degenerate if score is not None else False
    return RcaResult(kind, scores, rank(scores), measurement, degenerate, root)


def topk_accuracy(rankings, roots, ks=TOPK):
    """Fraction of instances whose true root is among the first k ranked variables."""
    if len(rankings) != len(roots):
        raise ShapeError(f"{len(rankings)} rankings for {len(roots)} roots")
    if not rankings:
        return {f"top{k}": 0.0 for k in ks}
    return {
        f"top{k}": float(np.mean([root in list(ranking[:k]) for ranking, root in zip(rankings, roots)]))
        for k in ks
    }


def metrics(flags=None, labels=None, rankings=None, roots=None, ks=TOPK):
    """Detection metrics and/or Top-k accuracy in one flat dict."""
    result = {}
    if flags is not None:
        detection = detection_metrics(flags, labels)
        result.update(precision=detection.precision, recall=detection.recall, f1=detection.f1,
                      undefined=detection.undefined)
    if rankings is not None:
        result.update(topk_accuracy(rankings, roots, ks))
    return result


@dataclass
class ChangePatternReport:
    """
    Whether |C - C'| has the shape expected for the anomaly type.
    - status: "pass", "fail" or "inconclusive"
    - root_fraction: selected entries on row root or column root
    - line_fraction: best single-line share of the selected entries
    - edge_fraction: selected entries on true edges touching the root's closed neighbourhood
    """

    status: str
    kind: AnomalyKind
    root: int
    root_fraction: float = 0.0
    line_fraction: float = 0.0
    edge_fraction: float = 0.0

    @property
    def passed(self):
        return self.status == "pass"

    def to_dict(self):
        data = dict(self.__dict__)
        data["kind"] = self.kind.value
        return data


def check_change_pattern(d, kind, root, graph, m=DEFAULT_TOP_M, cutoff=DEFAULT_CUTOFF, edge_share=0.5):
    """
    Measurement anomalies must concentrate the top-m change on the root's row and
    column; cyber anomalies must spread it over several lines, mostly along true
    edges near the root.
    """
    kind = AnomalyKind(kind)
    d = _square(d, "D")
    if not np.any(d > 0):
        return ChangePatternReport("inconclusive", kind, root)
    mask, _ = top_selection(d, m)
    selected = mask.sum()
    root_fraction = float(mask[root, :].sum() + mask[:, root].sum() - mask[root, root]) / selected
    spread = line_fraction(mask)

    near = np.zeros(graph.p, dtype=bool)
    near[graph.closed_neighborhood(root)] = True
    incident = graph.adjacency & (near[:, None] | near[None, :])
    edge_fraction = float((mask & incident).sum()) / selected

    if kind is AnomalyKind.MEASUREMENT:
        passed = root_fraction >= cutoff
    else:
        passed = spread < cutoff and edge_fraction >= edge_share
    return ChangePatternReport("pass" if passed else "fail", kind, int(root), root_fraction, spread, edge_fraction)
