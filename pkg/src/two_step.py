"""Two-stage training of the specified (S) and unspecified (Z) encoders.

Stage 1 trains ``enc_s`` together with its classifier on the labels alone.
Stage 2 freezes ``enc_s`` and alternates between one enc-dec update, which
minimizes ``L_rec - lam * L_adv`` over ``enc_z`` and the decoder, and
several adversary updates, which minimize ``L_adv`` over the adversary.

Both stages see standardized inputs, so ``L_rec`` is measured in units of
each feature's spread whatever the raw scale (pixels or daily returns). The
enc-dec side stops maximizing ``L_adv`` once it reaches the entropy of the
labels, the loss of an adversary that has nothing to go on; past that point
only a worse-than-ignorant adversary is being exploited.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.stats import entropy

from autodiff_core import EVAL, TRAIN, Graph, Tensor, grad_check
from datagen import SampleSet
from errors import (
    FrozenParameterError, InsufficientDataError, NonFiniteError, TrainingError,
)
from nets import (
    BundleSpecs, ModelBundle, ModelDims, Network, Optimizer, OptimizerSettings, build, build_bundle,
    fit_scaler, stocks_specs,
)

logger = logging.getLogger(__name__)

ENCODE_CHUNK = 4096


class TrainConfig(BaseModel):
    lam: float = Field(1.0, ge=0.0)
    batch_size: int = Field(128, ge=2)
    stage1_epochs: int = Field(30, ge=0)
    stage2_iterations: int = Field(3000, ge=0)
    encdec_batches_per_iter: int = Field(1, ge=1)
    adversary_batches_per_iter: int = Field(3, ge=1)
    seed: int = 0
    stage1_optimizer: OptimizerSettings = OptimizerSettings(kind="adam")
    encdec_optimizer: OptimizerSettings = OptimizerSettings(kind="adam")
    adversary_optimizer: OptimizerSettings = OptimizerSettings(kind="sgd")
    # fit a per-feature scaler on the training inputs and train behind it
    standardize: bool = True
    # stop pushing L_adv once it reaches the entropy of the training labels
    cap_adversary: bool = True
    # forward-only passes after Stage 1 that refresh batch-norm running statistics
    settle_passes: int = Field(3, ge=0)
    log_every: int = Field(500, ge=1)

    @property
    def ablation(self) -> bool:
        return self.lam == 0.0


@dataclass
class HistoryRecord:
    step: int
    iteration: int
    phase: str
    epoch: Optional[int] = None
    l_rec: Optional[float] = None
    l_adv: Optional[float] = None
    adv_acc: Optional[float] = None
    loss: Optional[float] = None
    s_acc: Optional[float] = None
    wall_clock: float = 0.0


STAGE2_COLUMNS = ["step", "iter", "phase", "l_rec", "l_adv", "adv_acc"]
STAGE1_COLUMNS = ["step", "iter", "epoch", "phase", "loss", "s_acc"]


class TrainHistory:
    """Per-update log of both stages.

    ``step`` numbers every record in order. ``iteration`` is the stage's own
    counter: the update index in Stage 1, the Stage-2 iteration shared by its
    enc-dec update and the adversary updates that follow it.
    """

    def __init__(self):
        self.records: List[HistoryRecord] = []
        self.aborted: List[int] = []
        self.summary: Dict[str, float] = {}
        self._t0 = time.perf_counter()

    def record(self, iteration: int, phase: str, epoch: Optional[int] = None, **values) -> HistoryRecord:
        for key, value in values.items():
            if value is not None and not np.isfinite(value):
                raise NonFiniteError(f"refusing to log non-finite {key} at iteration {iteration}")
        rec = HistoryRecord(len(self.records), iteration, phase, epoch,
                            wall_clock=time.perf_counter() - self._t0,
                            **{k: (None if v is None else float(v)) for k, v in values.items()})
        self.records.append(rec)
        return rec

    def extend(self, other: "TrainHistory") -> None:
        for rec in other.records:
            rec.step = len(self.records)
            self.records.append(rec)
        self.aborted.extend(other.aborted)
        self.summary.update(other.summary)

    def count(self, phase: str) -> int:
        return sum(1 for r in self.records if r.phase == phase)

    def last(self, phase: str) -> Optional[HistoryRecord]:
        for rec in reversed(self.records):
            if rec.phase == phase:
                return rec
        return None

    def to_frame(self, stage: int = 2) -> pd.DataFrame:
        if stage == 1:
            rows = [(r.step, r.iteration, r.epoch, r.phase, r.loss, r.s_acc)
                    for r in self.records if r.phase == "stage1"]
            return pd.DataFrame(rows, columns=STAGE1_COLUMNS)
        rows = [(r.step, r.iteration, r.phase, r.l_rec, r.l_adv, r.adv_acc)
                for r in self.records if r.phase in ("encdec", "adversary")]
        return pd.DataFrame(rows, columns=STAGE2_COLUMNS)

    def __len__(self) -> int:
        return len(self.records)


class BatchSampler:
    """Mini-batches without replacement, reshuffled at every epoch.

    The trailing remainder of an epoch that does not fill a batch is dropped.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 2:
            raise InsufficientDataError(f"need at least 2 samples to form a batch, got {n}")
        self.n = n
        self.size = min(batch_size, n)
        self.rng = rng
        self._pending: List[np.ndarray] = []

    def epoch(self) -> List[np.ndarray]:
        perm = self.rng.permutation(self.n)
        return [perm[i:i + self.size] for i in range(0, self.n - self.size + 1, self.size)]

    def next(self) -> np.ndarray:
        if not self._pending:
            self._pending = self.epoch()[::-1]
        return self._pending.pop()


@dataclass
class StepResult:
    loss: float = float("nan")
    l_rec: Optional[float] = None
    l_adv: Optional[float] = None
    accuracy: Optional[float] = None
    aborted: bool = False


def _chain(networks: Sequence[Network], x, mode: str, graph: Graph) -> Tensor:
    h = x
    for net in networks:
        h = net.forward(h, mode, graph)
    return h


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else 0.0


def encode(network: Network, X: np.ndarray) -> np.ndarray:
    """Eval-mode forward pass in fixed-size chunks; deterministic and side-effect free."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        X = X.reshape(1, -1)
    if X.shape[0] == 0:
        return np.zeros((0, network.output_width))
    parts = [network.forward(X[i:i + ENCODE_CHUNK], EVAL).numpy() for i in range(0, len(X), ENCODE_CHUNK)]
    return np.concatenate(parts, axis=0)


def predict(networks: Sequence[Network], X: np.ndarray) -> np.ndarray:
    h = np.asarray(X, dtype=np.float64)
    for net in networks:
        h = encode(net, h)
    return np.argmax(h, axis=1)


def accuracy(networks: Sequence[Network], X: np.ndarray, Y: np.ndarray) -> float:
    return float(np.mean(predict(networks, X) == np.asarray(Y))) if len(Y) else 0.0


def _check_labels(Y: np.ndarray, n_classes: int) -> None:
    if len(Y) and (Y.min() < 0 or Y.max() >= n_classes):
        raise InsufficientDataError(f"labels must lie in [0, {n_classes})")
    counts = np.bincount(Y, minlength=n_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise InsufficientDataError(f"class {int(empty[0])} has no training samples")


def label_entropy(Y: np.ndarray, n_classes: int) -> float:
    """Entropy (nats) of the empirical label distribution: the loss of the best constant prediction."""
    return float(entropy(np.bincount(Y, minlength=n_classes)))


def fit_chain(networks: Sequence[Network], X: np.ndarray, Y: np.ndarray, epochs: int,
              batch_size: int, settings: OptimizerSettings, seed, history: TrainHistory,
              phase: str = "stage1", log_every: int = 500) -> TrainHistory:
    """Jointly train chained networks on softmax cross-entropy of the last one's logits."""
    optimizer = Optimizer.for_networks(networks, settings)
    sampler = BatchSampler(len(X), batch_size, np.random.default_rng(seed))
    updates = 0
    for epoch in range(epochs):
        for idx in sampler.epoch():
            graph = Graph()
            try:
                logits = _chain(networks, X[idx], TRAIN, graph)
                loss = graph.softmax_cross_entropy(logits, Y[idx])
                optimizer.step(graph.backward(loss))
            except NonFiniteError as exc:
                raise TrainingError(f"{phase}: non-finite loss in epoch {epoch}: {exc}", history) from exc
            history.record(updates, phase, epoch=epoch, loss=loss.item(), s_acc=_accuracy(logits.data, Y[idx]))
            updates += 1
            if updates % log_every == 0:
                logger.info("%s epoch %d update %d: loss %.4f", phase, epoch, updates, loss.item())
    return history


def settle_batchnorm(networks: Sequence[Network], X: np.ndarray, batch_size: int, passes: int, seed) -> None:
    """Forward-only passes in train mode so batch-norm running statistics match the final weights."""
    sampler = BatchSampler(len(X), batch_size, np.random.default_rng(seed))
    for _ in range(passes):
        for idx in sampler.epoch():
            _chain(networks, X[idx], TRAIN, Graph())


def train_stage1(data: SampleSet, specs: BundleSpecs, cfg: TrainConfig
                 ) -> Tuple[Network, Network, TrainHistory]:
    """Train ``enc_s`` and its classifier on a pure classification task."""
    _check_labels(data.Y, specs.dims.n_classes)
    enc_s = build(specs.enc_s, [cfg.seed, 0], name="enc_s")
    s_classifier = build(specs.s_classifier, [cfg.seed, 1], name="s_classifier")
    history = TrainHistory()
    fit_chain([enc_s, s_classifier], data.X, data.Y, cfg.stage1_epochs, cfg.batch_size,
              cfg.stage1_optimizer, [cfg.seed, 10], history, "stage1", cfg.log_every)
    settle_batchnorm([enc_s, s_classifier], data.X, cfg.batch_size, cfg.settle_passes, [cfg.seed, 11])
    history.summary["s_train_acc"] = accuracy([enc_s, s_classifier], data.X, data.Y)
    logger.info("Stage 1 finished: train accuracy %.4f", history.summary["s_train_acc"])
    return enc_s, s_classifier, history


def encdec_loss(bundle: ModelBundle, X: np.ndarray, Y: np.ndarray, lam: float, graph: Graph,
                cap: Optional[float] = None) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """``L_rec - lam * L_adv`` with S from ``enc_s`` and the adversary in eval mode.

    With ``cap`` set the adversarial term is ``min(L_adv, cap)``: identical to
    ``L_adv`` while the adversary beats the cap, flat (no gradient) beyond it.
    Returns the total, both uncapped terms and the adversary logits.
    """
    s = bundle.enc_s.forward(X, EVAL, graph)
    z = bundle.enc_z.forward(X, TRAIN, graph)
    x_rec = bundle.decoder.forward(graph.concat(s, z), TRAIN, graph)
    l_rec = graph.mse(x_rec, Tensor(X))
    logits = bundle.adversary.forward(z, EVAL, graph)
    l_adv = graph.softmax_cross_entropy(logits, Y)
    adv_term = l_adv if cap is None else graph.minimum(l_adv, cap)
    total = graph.linear_combination([l_rec, adv_term], [1.0, -lam])
    return total, l_rec, l_adv, logits


def encdec_update(bundle: ModelBundle, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig,
                  optimizer: Optimizer, cap: Optional[float] = None) -> StepResult:
    """One Adam step on ``enc_z`` and the decoder for ``L_rec - lam * L_adv``.

    ``enc_s`` is frozen so S carries no gradient, and the adversary runs in
    eval mode: its parameters receive gradients that are simply not applied.
    """
    if not bundle.enc_s.frozen:
        raise FrozenParameterError("enc_s must be frozen before the enc-dec update")
    graph = Graph()
    try:
        total, l_rec, l_adv, logits = encdec_loss(bundle, X, Y, cfg.lam, graph, cap)
        optimizer.step(graph.backward(total))
    except NonFiniteError as exc:
        logger.warning("enc-dec update aborted: %s", exc)
        return StepResult(aborted=True)
    return StepResult(total.item(), l_rec.item(), l_adv.item(), _accuracy(logits.data, Y))


def adversary_update(bundle: ModelBundle, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig,
                     optimizer: Optimizer) -> StepResult:
    """One step of the adversary on detached, eval-mode Z."""
    z = Tensor(encode(bundle.enc_z, X))
    graph = Graph()
    try:
        logits = bundle.adversary.forward(z, TRAIN, graph)
        loss = graph.softmax_cross_entropy(logits, Y)
        optimizer.step(graph.backward(loss))
    except NonFiniteError as exc:
        raise TrainingError(f"adversary update failed: {exc}") from exc
    return StepResult(loss.item(), None, loss.item(), _accuracy(logits.data, Y))


def train_stage2(data: SampleSet, enc_s: Network, specs: BundleSpecs, cfg: TrainConfig,
                 s_classifier: Optional[Network] = None
                 ) -> Tuple[Network, Network, Network, TrainHistory]:
    """Alternate enc-dec and adversary updates with ``enc_s`` frozen."""
    if not enc_s.frozen:
        raise FrozenParameterError("train_stage2 needs a frozen enc_s")
    _check_labels(data.Y, specs.dims.n_classes)
    if cfg.ablation:
        logger.warning("lam = 0: ablation run, the adversarial term is disabled")

    bundle = ModelBundle(
        enc_s=enc_s,
        s_classifier=s_classifier,
        enc_z=build(specs.enc_z, [cfg.seed, 2], name="enc_z"),
        decoder=build(specs.decoder, [cfg.seed, 3], name="decoder"),
        adversary=build(specs.adversary, [cfg.seed, 4], name="adversary"),
        dims=specs.dims,
    )
    bundle.validate()
    frozen_digest = enc_s.digest()
    encdec_opt = Optimizer.for_networks([bundle.enc_z, bundle.decoder], cfg.encdec_optimizer)
    adversary_opt = Optimizer.for_networks([bundle.adversary], cfg.adversary_optimizer)
    sampler = BatchSampler(len(data), cfg.batch_size, np.random.default_rng([cfg.seed, 11]))
    cap = label_entropy(data.Y, specs.dims.n_classes) if cfg.cap_adversary else None
    if cap is not None:
        logger.info("adversarial term capped at the label entropy %.4f", cap)

    history = TrainHistory()
    for it in range(cfg.stage2_iterations):
        for _ in range(cfg.encdec_batches_per_iter):
            idx = sampler.next()
            res = encdec_update(bundle, data.X[idx], data.Y[idx], cfg, encdec_opt, cap)
            if res.aborted:
                history.aborted.append(it)
            else:
                history.record(it, "encdec", l_rec=res.l_rec, l_adv=res.l_adv, adv_acc=res.accuracy)
        for _ in range(cfg.adversary_batches_per_iter):
            idx = sampler.next()
            res = adversary_update(bundle, data.X[idx], data.Y[idx], cfg, adversary_opt)
            history.record(it, "adversary", l_adv=res.l_adv, adv_acc=res.accuracy)
        if enc_s.digest() != frozen_digest:
            raise FrozenParameterError(f"enc_s parameters changed during iteration {it}")
        if (it + 1) % cfg.log_every == 0:
            enc = history.last("encdec")
            adv = history.last("adversary")
            logger.info("stage2 iteration %d: l_rec %s l_adv %.4f adv_acc %.3f", it + 1,
                        f"{enc.l_rec:.6f}" if enc else "n/a", adv.l_adv, adv.adv_acc)

    enc = history.last("encdec")
    adv = history.last("adversary")
    if enc is not None:
        history.summary.update(final_l_rec=enc.l_rec, final_l_adv=enc.l_adv)
    if adv is not None:
        history.summary["final_adv_acc"] = adv.adv_acc
    history.summary["aborted_iterations"] = float(len(history.aborted))
    return bundle.enc_z, bundle.decoder, bundle.adversary, history


def train_two_step(data: SampleSet, specs: BundleSpecs, cfg: TrainConfig
                   ) -> Tuple[ModelBundle, TrainHistory]:
    """Both stages on ``data`` given in data units; the fitted scaler travels with the bundle."""
    scaler = fit_scaler(data.X) if cfg.standardize else None
    if scaler is not None:
        data = SampleSet(scaler.transform(data.X), data.Y, data.n_classes, data.meta)
    enc_s, s_classifier, history = train_stage1(data, specs, cfg)
    enc_s.freeze()
    enc_z, decoder, adversary, stage2 = train_stage2(data, enc_s, specs, cfg, s_classifier)
    history.extend(stage2)
    bundle = ModelBundle(enc_s, s_classifier, enc_z, decoder, adversary, specs.dims, scaler)
    return bundle, history


def codes(bundle: ModelBundle, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """S and Z codes of inputs given in data units."""
    X = bundle.to_model_space(X)
    return encode(bundle.enc_s, X), encode(bundle.enc_z, X)


def composite_check(seed: int = 0, points: int = 10, lam: float = 1.0, batch: int = 16,
                    dims: Optional[ModelDims] = None) -> float:
    """:func:`grad_check` of the stock-architecture enc-dec loss over ``enc_z`` and decoder parameters."""
    dims = dims or ModelDims(100, 20, 50, 8)
    bundle = build_bundle(stocks_specs(dims), seed)
    bundle.enc_s.freeze()
    rng = np.random.default_rng([seed, 1])
    X = rng.standard_normal((batch, dims.input_dim))
    Y = rng.integers(0, dims.n_classes, size=batch)
    params = list(bundle.enc_z.parameters().values()) + list(bundle.decoder.parameters().values())
    return grad_check(lambda g: encdec_loss(bundle, X, Y, lam, g)[0], params, sample=points, seed=seed)
