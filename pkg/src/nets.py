"""Dense networks: layer descriptors, construction, presets and optimizers.

A :class:`NetworkSpec` is a declared input width plus an ordered tuple of
layer descriptors. :func:`build` turns a spec into a :class:`Network` whose
parameters are :class:`~autodiff_core.Tensor` objects named ``"<layer>.<kind>"``
(``"0.weight"``, ``"1.gamma"``, ...). Classifier heads return logits; the
softmax lives in the loss.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from sklearn.preprocessing import StandardScaler

from autodiff_core import EVAL, MODES, BatchNormState, Graph, Tensor, as_tensor
from errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class Dense:
    width: int
    activation: str = "none"


@dataclass(frozen=True)
class BatchNorm:
    """Batch normalization, optionally followed by an activation."""

    activation: str = "none"


@dataclass(frozen=True)
class SoftmaxHead:
    """Terminal dense layer emitting ``classes`` logits."""

    classes: int


LayerSpec = Union[Dense, BatchNorm, SoftmaxHead]


@dataclass(frozen=True)
class NetworkSpec:
    input_width: int
    layers: Tuple[LayerSpec, ...]

    def validate(self) -> None:
        if self.input_width <= 0:
            raise ShapeError(f"input width must be positive, got {self.input_width}")
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if isinstance(layer, SoftmaxHead):
                if layer.classes <= 0:
                    raise ShapeError(f"layer {i}: softmax head needs at least one class")
                if i != last:
                    raise ShapeError(f"layer {i}: softmax head must be the last layer")
            elif isinstance(layer, Dense):
                if layer.width <= 0:
                    raise ShapeError(f"layer {i}: dense width must be positive, got {layer.width}")
                if layer.activation not in ACTIVATIONS:
                    raise ShapeError(f"layer {i}: unknown activation {layer.activation!r}")
            elif isinstance(layer, BatchNorm):
                if layer.activation not in ACTIVATIONS:
                    raise ShapeError(f"layer {i}: unknown activation {layer.activation!r}")
            else:
                raise ShapeError(f"layer {i}: unknown layer descriptor {layer!r}")

    def widths(self) -> Tuple[int, ...]:
        """Output width after each layer."""
        out, width = [], self.input_width
        for layer in self.layers:
            if isinstance(layer, Dense):
                width = layer.width
            elif isinstance(layer, SoftmaxHead):
                width = layer.classes
            out.append(width)
        return tuple(out)

    @property
    def output_width(self) -> int:
        return self.widths()[-1]

    def parameter_count(self) -> int:
        count, width = 0, self.input_width
        for layer, out in zip(self.layers, self.widths()):
            if isinstance(layer, BatchNorm):
                count += 2 * width
            else:
                count += width * out + out
            width = out
        return count


class Network:
    """A built network: spec, named parameter tensors and batch-norm state."""

    def __init__(self, spec: NetworkSpec, params: Dict[str, Tensor],
                 bn_states: Dict[int, BatchNormState], name: str = ""):
        self.spec = spec
        self.name = name
        self._params = params
        self._bn = bn_states
        self.frozen = False

    @property
    def input_width(self) -> int:
        return self.spec.input_width

    @property
    def output_width(self) -> int:
        return self.spec.output_width

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, state in sorted(self._bn.items()):
            out[f"{i}.running_mean"] = state.running_mean
            out[f"{i}.running_var"] = state.running_var
        return out

    def load_buffers(self, buffers: Mapping[str, np.ndarray]) -> None:
        for i, state in self._bn.items():
            state.running_mean = np.array(buffers[f"{i}.running_mean"], dtype=np.float64)
            state.running_var = np.array(buffers[f"{i}.running_var"], dtype=np.float64)

    def forward(self, x, mode: str = EVAL, graph: Optional[Graph] = None) -> Tensor:
        """Apply the layers in order. Only train mode touches batch-norm statistics."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
        graph = graph if graph is not None else Graph()
        h = as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.input_width:
            raise ShapeError(f"{self.name or 'network'}: expected batch x {self.input_width} input, got {h.shape}")
        for i, layer in enumerate(self.spec.layers):
            if isinstance(layer, BatchNorm):
                h = graph.batchnorm(h, self._params[f"{i}.gamma"], self._params[f"{i}.beta"],
                                    self._bn[i], mode)
            else:
                h = graph.add_bias(graph.matmul(h, self._params[f"{i}.weight"]), self._params[f"{i}.bias"])
            if getattr(layer, "activation", "none") == "relu":
                h = graph.relu(h)
        return h

    def freeze(self) -> None:
        for p in self._params.values():
            p.requires_grad = False
        self.frozen = True

    def digest(self) -> str:
        """SHA-256 over parameter names and bytes."""
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        return f"Network({self.name!r}, {self.input_width}->{self.output_width}, params={self.spec.parameter_count()})"


def build(spec: NetworkSpec, seed, name: str = "") -> Network:
    """Initialize a network: He-uniform weights, zero biases, unit gamma, zero beta."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    bn_states: Dict[int, BatchNormState] = {}
    width = spec.input_width
    for i, (layer, out) in enumerate(zip(spec.layers, spec.widths())):
        if isinstance(layer, BatchNorm):
            params[f"{i}.gamma"] = Tensor(np.ones(width), requires_grad=True, name=f"{name}.{i}.gamma")
            params[f"{i}.beta"] = Tensor(np.zeros(width), requires_grad=True, name=f"{name}.{i}.beta")
            bn_states[i] = BatchNormState.fresh(width)
        else:
            bound = np.sqrt(6.0 / width)
            params[f"{i}.weight"] = Tensor(rng.uniform(-bound, bound, size=(width, out)),
                                           requires_grad=True, name=f"{name}.{i}.weight")
            params[f"{i}.bias"] = Tensor(np.zeros(out), requires_grad=True, name=f"{name}.{i}.bias")
        width = out
    return Network(spec, params, bn_states, name)


# -- presets -----------------------------------------------------------------

ROLES = ("enc_s", "s_classifier", "enc_z", "decoder", "adversary")


@dataclass(frozen=True)
class ModelDims:
    input_dim: int
    s_dim: int
    z_dim: int
    n_classes: int


@dataclass(frozen=True)
class BundleSpecs:
    enc_s: NetworkSpec
    s_classifier: NetworkSpec
    enc_z: NetworkSpec
    decoder: NetworkSpec
    adversary: NetworkSpec
    dims: ModelDims

    def for_role(self, role: str) -> NetworkSpec:
        return getattr(self, role)


def _encoder(input_dim: int, hidden: Sequence[int], code: int) -> NetworkSpec:
    layers = tuple(Dense(w, "relu") for w in hidden) + (Dense(code),)
    return NetworkSpec(input_dim, layers)


def _classifier(input_dim: int, hidden: int, depth: int, n_classes: int) -> NetworkSpec:
    layers = []
    for _ in range(depth):
        layers += [Dense(hidden), BatchNorm("relu")]
    return NetworkSpec(input_dim, tuple(layers) + (SoftmaxHead(n_classes),))


def stocks_specs(dims: ModelDims) -> BundleSpecs:
    """Dense "Stocks return" architecture: encoders 100-66-66-code, classifiers with batch norm."""
    return BundleSpecs(
        enc_s=_encoder(dims.input_dim, (100, 66, 66), dims.s_dim),
        s_classifier=_classifier(dims.s_dim, 50, 2, dims.n_classes),
        enc_z=_encoder(dims.input_dim, (100, 66, 66), dims.z_dim),
        decoder=_encoder(dims.s_dim + dims.z_dim, (66, 66), dims.input_dim),
        adversary=_classifier(dims.z_dim, 50, 3, dims.n_classes),
        dims=dims,
    )


def synth_specs(dims: ModelDims) -> BundleSpecs:
    """Small dense architecture for the synthetic rectangle images."""
    return BundleSpecs(
        enc_s=_encoder(dims.input_dim, (64, 64, 64), dims.s_dim),
        s_classifier=_classifier(dims.s_dim, 32, 3, dims.n_classes),
        enc_z=_encoder(dims.input_dim, (64, 64, 64), dims.z_dim),
        decoder=_encoder(dims.s_dim + dims.z_dim, (64, 64, 64), dims.input_dim),
        adversary=_classifier(dims.z_dim, 32, 3, dims.n_classes),
        dims=dims,
    )


PRESETS: Dict[str, Callable[[ModelDims], BundleSpecs]] = {
    "stocks": stocks_specs,
    "synth": synth_specs,
}


def preset_specs(name: str, dims: ModelDims) -> BundleSpecs:
    if name not in PRESETS:
        raise ValueError(f"Unknown preset: {name}. Available presets: {', '.join(PRESETS)}")
    return PRESETS[name](dims)


def fit_scaler(X: np.ndarray) -> StandardScaler:
    """Per-feature standardization of the training inputs. Constant features keep unit scale."""
    return StandardScaler().fit(np.asarray(X, dtype=np.float64))


@dataclass
class ModelBundle:
    """The five networks plus the input scaler they were trained behind.

    The encoders see standardized inputs and the decoder emits standardized
    reconstructions; without a scaler both sides work in data units.
    """

    enc_s: Network
    s_classifier: Optional[Network]
    enc_z: Network
    decoder: Network
    adversary: Network
    dims: ModelDims
    scaler: Optional[StandardScaler] = None

    def to_model_space(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return X if self.scaler is None else self.scaler.transform(X)

    def to_data_space(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.scaler is None:
            return X
        return self.scaler.inverse_transform(X.reshape(-1, X.shape[-1])).reshape(X.shape)

    def validate(self) -> None:
        d = self.dims
        if self.scaler is not None and self.scaler.n_features_in_ != d.input_dim:
            raise ShapeError(f"scaler was fitted on {self.scaler.n_features_in_} features, input_dim is {d.input_dim}")
        if self.enc_s.output_width != d.s_dim or self.enc_z.output_width != d.z_dim:
            raise ShapeError("encoder output widths do not match s_dim/z_dim")
        if self.enc_s.input_width != d.input_dim or self.enc_z.input_width != d.input_dim:
            raise ShapeError("encoder input widths do not match input_dim")
        if self.decoder.input_width != d.s_dim + d.z_dim:
            raise ShapeError(f"decoder input width {self.decoder.input_width} != s_dim + z_dim = {d.s_dim + d.z_dim}")
        if self.decoder.output_width != d.input_dim:
            raise ShapeError(f"decoder output width {self.decoder.output_width} != input_dim {d.input_dim}")
        if self.adversary.input_width != d.z_dim:
            raise ShapeError(f"adversary input width {self.adversary.input_width} != z_dim {d.z_dim}")
        classifiers = [self.adversary] + ([self.s_classifier] if self.s_classifier is not None else [])
        for net in classifiers:
            if net.output_width != d.n_classes:
                raise ShapeError(f"{net.name} emits {net.output_width} classes, expected {d.n_classes}")
        if self.s_classifier is not None and self.s_classifier.input_width != d.s_dim:
            raise ShapeError("s_classifier input width does not match s_dim")

    def networks(self) -> Dict[str, Network]:
        return {role: getattr(self, role) for role in ROLES if getattr(self, role) is not None}


def build_bundle(specs: BundleSpecs, seed: int) -> ModelBundle:
    nets = {role: build(specs.for_role(role), [seed, k], name=role) for k, role in enumerate(ROLES)}
    bundle = ModelBundle(dims=specs.dims, **nets)
    bundle.validate()
    return bundle


# -- optimizers --------------------------------------------------------------

class OptimizerSettings(BaseModel):
    kind: Literal["adam", "sgd"] = "adam"
    lr: float = Field(0.001, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


@dataclass
class OptimizerState:
    settings: OptimizerSettings
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.settings, self.step,
                              {k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()})


def init_state(settings: OptimizerSettings, params: Mapping[str, np.ndarray]) -> OptimizerState:
    if settings.kind == "adam":
        zeros = {name: np.zeros(np.shape(p)) for name, p in params.items()}
        return OptimizerState(settings, 0, zeros, {k: z.copy() for k, z in zeros.items()})
    return OptimizerState(settings)


def _check_grads(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter has {np.shape(p)}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}; update aborted")


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: OptimizerState) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update. Pure: inputs are left untouched."""
    s = state.settings
    if s.kind != "adam":
        raise ValueError(f"adam_step called with a {s.kind} optimizer state")
    _check_grads(params, grads)
    t = state.step + 1
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m[name] = s.beta1 * state.m[name] + (1.0 - s.beta1) * g
        v[name] = s.beta2 * state.v[name] + (1.0 - s.beta2) * g * g
        m_hat = m[name] / (1.0 - s.beta1 ** t)
        v_hat = v[name] / (1.0 - s.beta2 ** t)
        new_params[name] = p - s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
    return new_params, OptimizerState(s, t, m, v)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             state: OptimizerState) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """Plain SGD without momentum. Pure."""
    s = state.settings
    if s.kind != "sgd":
        raise ValueError(f"sgd_step called with a {s.kind} optimizer state")
    _check_grads(params, grads)
    new_params = {name: p - s.lr * grads[name] for name, p in params.items()}
    return new_params, OptimizerState(s, state.step + 1)


_STEPS = {"adam": adam_step, "sgd": sgd_step}


class Optimizer:
    """Binds an optimizer state to named parameter tensors and applies updates."""

    def __init__(self, params: Mapping[str, Tensor], settings: OptimizerSettings):
        self.params = dict(params)
        self.settings = settings
        self.state = init_state(settings, {n: p.data for n, p in self.params.items()})

    @classmethod
    def for_networks(cls, networks: Sequence[Network], settings: OptimizerSettings) -> "Optimizer":
        params = {}
        for net in networks:
            params.update({f"{net.name}.{n}": p for n, p in net.parameters().items()})
        return cls(params, settings)

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        """Apply one update; parameters without a gradient are treated as zero-gradient."""
        arrays = {n: p.data for n, p in self.params.items()}
        g = {n: grads.get(p, np.zeros(p.shape)) for n, p in self.params.items()}
        new, self.state = _STEPS[self.settings.kind](arrays, g, self.state)
        for n, p in self.params.items():
            p.assign(new[n])
