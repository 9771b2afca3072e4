"""Diagnostics run on trained codes: PCA, linear and neural probes, histograms, swaps and retrieval.

Every probe is a pure function of its inputs, so the runner can execute
several of them concurrently on the same code matrices.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from datagen import read_synth_image
from errors import InsufficientDataError, ShapeError
from nets import BatchNorm, Dense, Network, NetworkSpec, OptimizerSettings, SoftmaxHead, build
from two_step import TrainHistory, encode, fit_chain, predict

logger = logging.getLogger(__name__)


# -- PCA ---------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    ratios: np.ndarray


def pca_fit(X: np.ndarray, k: Optional[int] = None) -> PcaModel:
    """Eigendecomposition of the sample covariance.

    Components come in order of decreasing variance; each is signed so that its
    largest-magnitude coordinate is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InsufficientDataError(f"PCA needs at least 2 samples, got shape {X.shape}")
    d = X.shape[1]
    k = d if k is None else k
    if not 1 <= k <= d:
        raise ShapeError(f"k must lie in [1, {d}], got {k}")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (X.shape[0] - 1)
    values, vectors = np.linalg.eigh(cov)
    values = np.clip(values[::-1], 0.0, None)
    vectors = vectors[:, ::-1]
    total = values.sum()
    ratios = values / total if total > 0 else np.zeros_like(values)
    components = vectors[:, :k].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean, components, ratios[:k])


def pca_project(model: PcaModel, X: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - model.mean) @ model.components.T


# -- logistic regression -----------------------------------------------------

class LogRegConfig(BaseModel):
    l2: float = Field(1e-4, ge=0.0)
    tol: float = Field(1e-6, gt=0.0)
    max_iter: int = Field(10_000, ge=1)


@dataclass
class LogRegModel:
    W: np.ndarray
    b: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    classes: np.ndarray
    converged: bool = True

    def logits(self, features: np.ndarray) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return z @ self.W + self.b


def logreg_fit(features: np.ndarray, classes: np.ndarray, cfg: Optional[LogRegConfig] = None) -> LogRegModel:
    """Multinomial logistic regression, full batch, L2 penalty on the weights.

    Features are standardized with the training mean and standard deviation;
    the objective is minimized with L-BFGS.
    """
    cfg = cfg or LogRegConfig()
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    labels, y = np.unique(np.asarray(classes), return_inverse=True)
    if len(labels) < 2:
        raise InsufficientDataError(f"logistic regression needs at least 2 classes, found {len(labels)}")
    n, d = X.shape
    K = len(labels)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale
    onehot = np.eye(K)[y]

    def objective(theta):
        W = theta[:d * K].reshape(d, K)
        b = theta[d * K:]
        logits = Z @ W + b
        lse = logsumexp(logits, axis=1)
        loss = np.mean(lse - logits[np.arange(n), y]) + 0.5 * cfg.l2 * np.sum(W * W)
        delta = (softmax(logits, axis=1) - onehot) / n
        grad_W = Z.T @ delta + cfg.l2 * W
        return loss, np.concatenate([grad_W.ravel(), delta.sum(axis=0)])

    result = minimize(objective, np.zeros(d * K + K), jac=True, method="L-BFGS-B",
                      options={"gtol": cfg.tol, "maxiter": cfg.max_iter})
    if not result.success:
        logger.warning("logistic regression stopped early: %s", result.message)
    theta = result.x
    return LogRegModel(theta[:d * K].reshape(d, K), theta[d * K:], mean, scale, labels, bool(result.success))


def logreg_predict(model: LogRegModel, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return model.classes[np.argmax(model.logits(X), axis=1)]


def logreg_eval(model: LogRegModel, features: np.ndarray, classes: np.ndarray) -> float:
    classes = np.asarray(classes)
    if len(classes) == 0:
        return 0.0
    return float(np.mean(logreg_predict(model, features) == classes))


# -- reports -----------------------------------------------------------------

class ProbeConfig(BaseModel):
    seed: int = 0
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    logreg: LogRegConfig = LogRegConfig()
    pca_components: Optional[int] = Field(None, ge=1)
    score_epochs: int = Field(30, ge=1)
    score_batch_size: int = Field(64, ge=2)
    score_depth: int = Field(3, ge=1)
    score_width: Optional[int] = Field(None, ge=1)
    score_optimizer: OptimizerSettings = OptimizerSettings(kind="adam", lr=0.005)
    hist_bins: int = Field(20, ge=1)
    k: int = Field(5, ge=1)
    query_index: int = Field(0, ge=0)
    steps: int = Field(5, ge=2)
    swap_sources: int = Field(8, ge=1)


@dataclass
class ProbeReport:
    probe: str
    space: str
    target: str
    accuracy: float
    chance: float
    n_classes: int
    n_train: int
    n_test: int
    seed: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    @property
    def error_rate(self) -> float:
        return 1.0 - self.accuracy

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["error_rate"] = self.error_rate
        return out


def stratified_split(labels: np.ndarray, test_fraction: float = 0.2, seed=0) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; every class keeps at least one training sample."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_test = min(int(round(test_fraction * len(members))), len(members) - 1)
        test.append(members[:n_test])
        train.append(members[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _resolve_split(labels, split, cfg: ProbeConfig):
    if split is not None:
        return np.asarray(split[0]), np.asarray(split[1])
    return stratified_split(labels, cfg.test_fraction, cfg.seed)


def logreg_probe(features: np.ndarray, target: np.ndarray, cfg: Optional[ProbeConfig] = None,
                 split=None, space: str = "S", target_name: str = "label") -> ProbeReport:
    """Logistic regression from codes to a discrete target, optionally after a PCA reduction."""
    cfg = cfg or ProbeConfig()
    features = np.asarray(features, dtype=np.float64)
    target = np.asarray(target)
    train, test = _resolve_split(target, split, cfg)
    Xtr, Xte = features[train], features[test]
    if cfg.pca_components is not None:
        pca = pca_fit(Xtr, min(cfg.pca_components, features.shape[1]))
        Xtr, Xte = pca_project(pca, Xtr), pca_project(pca, Xte)
    model = logreg_fit(Xtr, target[train], cfg.logreg)
    n_classes = len(np.unique(target))
    report = ProbeReport(
        probe="logreg", space=space, target=target_name,
        accuracy=logreg_eval(model, Xte, target[test]),
        chance=1.0 / n_classes, n_classes=n_classes,
        n_train=len(train), n_test=len(test), seed=cfg.seed,
        extra={"train_accuracy": logreg_eval(model, Xtr, target[train]),
               "pca_components": cfg.pca_components, "converged": model.converged},
    )
    logger.info("logreg %s -> %s: accuracy %.4f (chance %.4f)", space, target_name, report.accuracy, report.chance)
    return report


def probe_spec(code_dim: int, n_classes: int, depth: int = 3, width: Optional[int] = None) -> NetworkSpec:
    """Dense layers of the code width with batch norm and ReLU, then a softmax head."""
    width = width or code_dim
    layers = []
    for _ in range(depth):
        layers += [Dense(width), BatchNorm("relu")]
    return NetworkSpec(code_dim, tuple(layers) + (SoftmaxHead(n_classes),))


def classification_score(codes: np.ndarray, labels: np.ndarray, cfg: Optional[ProbeConfig] = None,
                         split=None, n_classes: Optional[int] = None, space: str = "S",
                         target_name: str = "label") -> ProbeReport:
    """Train a small neural classifier on a code split and report its held-out accuracy."""
    cfg = cfg or ProbeConfig()
    codes = np.asarray(codes, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = n_classes or int(labels.max()) + 1
    train, test = _resolve_split(labels, split, cfg)
    net = build(probe_spec(codes.shape[1], n_classes, cfg.score_depth, cfg.score_width),
                [cfg.seed, 20], name="probe")
    history = TrainHistory()
    fit_chain([net], codes[train], labels[train], cfg.score_epochs, cfg.score_batch_size,
              cfg.score_optimizer, [cfg.seed, 21], history, "probe", log_every=10_000)
    test_acc = float(np.mean(predict([net], codes[test]) == labels[test])) if len(test) else 0.0
    train_acc = float(np.mean(predict([net], codes[train]) == labels[train]))
    report = ProbeReport(
        probe="score", space=space, target=target_name, accuracy=test_acc,
        chance=1.0 / n_classes, n_classes=n_classes, n_train=len(train), n_test=len(test),
        seed=cfg.seed, extra={"train_accuracy": train_acc},
    )
    logger.info("score %s -> %s: accuracy %.4f (chance %.4f)", space, target_name, test_acc, report.chance)
    return report


# -- histograms --------------------------------------------------------------

HISTOGRAM_COLUMNS = ["component", "group", "bin_left", "bin_right", "count"]


def z_histograms(codes: np.ndarray, groups: Sequence, bins: int = 20) -> pd.DataFrame:
    """Per component and latent group: counts over bins shared by all groups."""
    codes = np.asarray(codes, dtype=np.float64)
    groups = np.asarray(groups)
    rows = []
    for c in range(codes.shape[1]):
        edges = np.histogram_bin_edges(codes[:, c], bins=bins)
        for g in np.unique(groups):
            counts, _ = np.histogram(codes[groups == g, c], bins=edges)
            for left, right, count in zip(edges[:-1], edges[1:], counts):
                rows.append((c, str(g), left, right, int(count)))
    return pd.DataFrame(rows, columns=HISTOGRAM_COLUMNS)


def separated_components(codes: np.ndarray, groups: Sequence) -> List[int]:
    """Components on which the groups occupy disjoint intervals.

    A component separates the groups when the smallest gap between
    consecutive group supports exceeds the widest within-group range.
    """
    codes = np.asarray(codes, dtype=np.float64)
    groups = np.asarray(groups)
    labels = np.unique(groups)
    if len(labels) < 2:
        return []
    out = []
    for c in range(codes.shape[1]):
        spans = sorted((codes[groups == g, c].min(), codes[groups == g, c].max()) for g in labels)
        gap = min(spans[i + 1][0] - spans[i][1] for i in range(len(spans) - 1))
        width = max(hi - lo for lo, hi in spans)
        if gap > width:
            out.append(c)
    return out


# -- decoding probes ---------------------------------------------------------

def _decode(decoder: Network, s: np.ndarray, z: np.ndarray) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if s.shape[0] != z.shape[0]:
        raise ShapeError(f"{s.shape[0]} S codes but {z.shape[0]} Z codes")
    if s.shape[1] + z.shape[1] != decoder.input_width:
        raise ShapeError(f"S ({s.shape[1]}) + Z ({z.shape[1]}) does not match decoder input {decoder.input_width}")
    return encode(decoder, np.concatenate([s, z], axis=1))


def swap(decoder: Network, s_from: np.ndarray, z_from: np.ndarray) -> np.ndarray:
    """Decode S of one source with Z of another (eval mode)."""
    out = _decode(decoder, s_from, z_from)
    return out[0] if np.ndim(s_from) == 1 else out


def swap_grid(decoder: Network, S: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``out[i, j]`` decodes S of source ``i`` with Z of source ``j``."""
    S, Z = np.atleast_2d(S), np.atleast_2d(Z)
    k = S.shape[0]
    if Z.shape[0] != k:
        raise ShapeError(f"swap grid needs as many Z sources as S sources, got {Z.shape[0]} and {k}")
    out = _decode(decoder, np.repeat(S, k, axis=0), np.tile(Z, (k, 1)))
    return out.reshape(k, k, -1)


def interpolate(decoder: Network, source1: Tuple[np.ndarray, np.ndarray],
                source2: Tuple[np.ndarray, np.ndarray], steps: int = 5) -> np.ndarray:
    """``out[i, j]`` decodes S blended ``alpha_i`` and Z blended ``alpha_j`` from source 1 to 2."""
    if steps < 2:
        raise ValueError(f"steps must be at least 2, got {steps}")
    (s1, z1), (s2, z2) = source1, source2
    alphas = np.linspace(0.0, 1.0, steps)
    s = (1.0 - alphas)[:, None] * np.asarray(s1)[None, :] + alphas[:, None] * np.asarray(s2)[None, :]
    z = (1.0 - alphas)[:, None] * np.asarray(z1)[None, :] + alphas[:, None] * np.asarray(z2)[None, :]
    out = _decode(decoder, np.repeat(s, steps, axis=0), np.tile(z, (steps, 1)))
    return out.reshape(steps, steps, -1)


def grid_frame(grid: np.ndarray) -> pd.DataFrame:
    """Flatten a (rows, cols, pixels) grid into one CSV row per cell."""
    rows, cols, width = grid.shape
    df = pd.DataFrame(grid.reshape(rows * cols, width), columns=[f"p_{j}" for j in range(width)])
    df.insert(0, "col", np.tile(np.arange(cols), rows))
    df.insert(0, "row", np.repeat(np.arange(rows), cols))
    return df


def swap_accuracy(grid: np.ndarray, positions: np.ndarray, bits: np.ndarray,
                  image_size: int = 32, kind: str = "synth1") -> float:
    """Fraction of swapped images whose position follows the S source and background the Z source."""
    k = grid.shape[0]
    hits = 0
    for i in range(k):
        for j in range(k):
            pos, background = read_synth_image(grid[i, j], image_size, kind)
            hits += int(pos == positions[i] and tuple(background) == tuple(np.atleast_1d(bits[j])))
    return hits / (k * k)


def retrieve(codes: np.ndarray, query_index: int, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest codes to the query (Euclidean), query excluded, ties to the lower index."""
    codes = np.asarray(codes, dtype=np.float64)
    n = codes.shape[0]
    if not 0 <= query_index < n:
        raise IndexError(f"query index {query_index} outside [0, {n})")
    if not 1 <= k < n:
        raise ValueError(f"k must lie in [1, {n - 1}], got {k}")
    dist = np.sum((codes - codes[query_index]) ** 2, axis=1)
    dist[query_index] = np.inf
    return np.argsort(dist, kind="stable")[:k]


def retrieval_agreement(codes: np.ndarray, groups: Sequence, k: int) -> float:
    """Mean fraction of each sample's ``k`` neighbors that share its group."""
    groups = np.asarray(groups)
    n = len(groups)
    shared = [np.mean(groups[retrieve(codes, q, k)] == groups[q]) for q in range(n)]
    return float(np.mean(shared))


def market_correlation(s_codes: np.ndarray, periods: np.ndarray, market_returns: np.ndarray) -> float:
    """|Pearson r| between the per-period mean first-PCA score of S and the per-period mean market return."""
    periods = np.asarray(periods)
    market_returns = np.asarray(market_returns, dtype=np.float64)
    labels = np.unique(periods)
    if len(labels) < 3:
        raise InsufficientDataError(f"market correlation needs at least 3 periods, got {len(labels)}")
    scores = pca_project(pca_fit(s_codes, 1), s_codes)[:, 0]
    frame = pd.DataFrame({"period": periods, "score": scores, "market": market_returns})
    per_period = frame.groupby("period").mean()
    if per_period["score"].std() == 0 or per_period["market"].std() == 0:
        return 0.0
    r = np.corrcoef(per_period["score"], per_period["market"])[0, 1]
    return float(abs(r))
