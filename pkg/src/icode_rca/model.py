"""
The ICODE predictor dX/dt = Phi(X) X + b, its one-step integrator, the
sparsity-regularised objective and JSON checkpoints.

Phi is a one-hidden-layer tanh network R^p -> R^(p x p). Weights are stored in
(fan_in, fan_out) layout, so for a batch of row states X:

    hidden = tanh(X @ w1 + c1),  output = hidden @ w2 + c2

and output[:, i * p + j] is the influence of variable j on the derivative of
variable i.
"""
import json
from dataclasses import asdict, dataclass, fields
from enum import Enum

import numpy as np

from icode_rca.errors import CheckpointError, DivergenceError, ShapeError, ValidationError
from icode_rca.systems import DIVERGENCE_LIMIT, Integrator
from icode_rca.tensor import Tape, absolute, mean, square, tanh, total

MODEL_VERSION = 1
PARAMETER_NAMES = ("w1", "c1", "w2", "c2", "b")


class Penalty(str, Enum):
    L1_ALL = "L1-all"
    L1_OFFDIAGONAL = "L1-offdiagonal"


@dataclass(frozen=True)
class TrainConfig:
    """Objective, optimiser and integration settings. JSON spells `lam` as "lambda"."""

    lam: float = 0.01
    penalty: str = Penalty.L1_ALL.value
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 128
    integrator: str = Integrator.EULER.value
    substeps: int = 5
    hidden: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.lam < 0:
            raise ValidationError("must be non-negative", field="train.lambda")
        if self.substeps < 1:
            raise ValidationError("must be at least 1", field="train.substeps")
        if self.epochs < 0:
            raise ValidationError("must be non-negative", field="train.epochs")
        if self.batch_size < 1:
            raise ValidationError("must be at least 1", field="train.batch_size")
        if self.hidden < 1:
            raise ValidationError("must be at least 1", field="train.hidden")
        if self.lr <= 0:
            raise ValidationError("must be positive", field="train.lr")
        for name, enum in (("penalty", Penalty), ("integrator", Integrator)):
            try:
                enum(getattr(self, name))
            except ValueError:
                choices = [e.value for e in enum]
                raise ValidationError(f"'{getattr(self, name)}' is not one of {choices}", field=f"train.{name}")
        return self

    def to_dict(self):
        data = asdict(self)
        data["lambda"] = data.pop("lam")
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown keys {sorted(unknown)}", field="train")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class PhiNetwork:
    w1: np.ndarray
    c1: np.ndarray
    w2: np.ndarray
    c2: np.ndarray

    def __post_init__(self):
        for name in ("w1", "c1", "w2", "c2"):
            value = np.array(getattr(self, name), dtype=np.float64)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        p, hidden = self.w1.shape
        expected = {"c1": (hidden,), "w2": (hidden, p * p), "c2": (p * p,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def initialize(cls, p, hidden, rng):
        # Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual dense-layer default
        bound1 = 1.0 / np.sqrt(p)
        bound2 = 1.0 / np.sqrt(hidden)
        return cls(
            w1=rng.uniform(-bound1, bound1, size=(p, hidden)),
            c1=rng.uniform(-bound1, bound1, size=hidden),
            w2=rng.uniform(-bound2, bound2, size=(hidden, p * p)),
            c2=rng.uniform(-bound2, bound2, size=p * p),
        )

    @property
    def p(self):
        return self.w1.shape[0]

    @property
    def hidden(self):
        return self.w1.shape[1]


@dataclass(frozen=True, eq=False)
class IcodeModel:
    phi: PhiNetwork
    bias: np.ndarray

    def __post_init__(self):
        bias = np.array(self.bias, dtype=np.float64)
        if bias.shape != (self.phi.p,):
            raise ShapeError(f"bias has shape {bias.shape}, expected ({self.phi.p},)")
        if not np.all(np.isfinite(bias)):
            raise ValidationError("bias must be finite")
        bias.setflags(write=False)
        object.__setattr__(self, "bias", bias)

    @classmethod
    def initialize(cls, p, hidden, seed):
        rng = np.random.default_rng(seed)
        return cls(PhiNetwork.initialize(p, hidden, rng), np.zeros(p))

    @property
    def p(self):
        return self.phi.p

    @property
    def hidden(self):
        return self.phi.hidden

    def parameters(self):
        return {"w1": self.phi.w1, "c1": self.phi.c1, "w2": self.phi.w2, "c2": self.phi.c2, "b": self.bias}

    @classmethod
    def from_parameters(cls, params):
        return cls(PhiNetwork(params["w1"], params["c1"], params["w2"], params["c2"]), params["b"])

    def bind(self, tape, trainable=True):
        register = tape.variable if trainable else (lambda _name, value: tape.constant(value))
        return {name: register(name, value) for name, value in self.parameters().items()}


def _selectors(p):
    # tile[j, i*p + j] = 1 copies x_j into every row block; fold sums each block back to row i
    tile = np.zeros((p, p * p))
    fold = np.zeros((p * p, p))
    for i in range(p):
        for j in range(p):
            tile[j, i * p + j] = 1.0
            fold[i * p + j, i] = 1.0
    return tile, fold


class _Graph:
    """Model parameters bound to one tape plus the constant selector matrices."""

    def __init__(self, model, tape, trainable=True):
        self.tape = tape
        self.p = model.p
        self.params = model.bind(tape, trainable)
        tile, fold = _selectors(model.p)
        self.tile = tape.constant(tile)
        self.fold = tape.constant(fold)

    def phi(self, states):
        hidden = tanh(states @ self.params["w1"] + self.params["c1"])
        return hidden @ self.params["w2"] + self.params["c2"]

    def dynamics(self, states):
        weighted = self.phi(states) * (states @ self.tile)
        return weighted @ self.fold + self.params["b"]

    def advance(self, states, cfg, batch=None):
        """Integrate one unit interval with cfg.substeps steps of cfg.integrator."""
        h = 1.0 / cfg.substeps
        method = Integrator(cfg.integrator)
        for step in range(cfg.substeps):
            if method is Integrator.EULER:
                states = states + self.dynamics(states) * h
            else:
                k1 = self.dynamics(states)
                k2 = self.dynamics(states + k1 * (0.5 * h))
                k3 = self.dynamics(states + k2 * (0.5 * h))
                k4 = self.dynamics(states + k3 * h)
                states = states + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            values = states.data
            if not np.all(np.isfinite(values)) or np.max(np.abs(values)) > DIVERGENCE_LIMIT:
                raise DivergenceError("ICODE prediction diverged", step=step, batch=batch)
        return states

    def objective(self, now, target, cfg, batch=None):
        residual = self.advance(now, cfg, batch) - target
        mse = mean(square(residual))
        if cfg.lam == 0:
            return mse
        magnitude = absolute(self.phi(target))
        if Penalty(cfg.penalty) is Penalty.L1_ALL:
            penalty = mean(magnitude)
        else:
            mask = np.ones((self.p, self.p)) - np.eye(self.p)
            rows = magnitude.shape[0]
            selected = magnitude * self.tape.constant(np.tile(mask.ravel(), (rows, 1)))
            penalty = total(selected) * (1.0 / (rows * (self.p * self.p - self.p)))
        return mse + penalty * cfg.lam


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = np.atleast_2d(x)
    if batch.ndim != 2 or batch.shape[1] != model.p:
        raise ShapeError(f"state has shape {x.shape}, expected ({model.p},) or (T, {model.p})")
    return batch, single


def phi_forward(model, x):
    """Phi(x) as a p x p matrix, or a T x p x p stack for a T x p batch."""
    batch, single = _as_batch(model, x)
    graph = _Graph(model, Tape(), trainable=False)
    output = graph.phi(graph.tape.constant(batch)).data.reshape(-1, model.p, model.p)
    return output[0] if single else output


def predict_next(model, x_t, cfg, batch=None):
    """One-step prediction X(t+1) from X(t) (a p-vector or a T x p batch of rows)."""
    states, single = _as_batch(model, x_t)
    if not np.all(np.isfinite(states)):
        raise ValidationError("prediction input contains non-finite values")
    graph = _Graph(model, Tape(), trainable=False)
    prediction = graph.advance(graph.tape.constant(states), cfg, batch).data
    return np.array(prediction[0] if single else prediction)


def _stack_pairs(batch):
    if len(batch) == 0:
        raise ValidationError("loss needs a non-empty batch")
    now = np.array([pair[0] for pair in batch], dtype=np.float64)
    target = np.array([pair[1] for pair in batch], dtype=np.float64)
    return now, target


def loss(model, batch, cfg):
    """Mean squared one-step error plus lam times the mean sparsity penalty of Phi at X(t+1)."""
    now, target = _stack_pairs(batch)
    return objective_gradients(model, now, target, cfg, with_gradients=False)[0]


def objective_gradients(model, now, target, cfg, batch=None, with_gradients=True):
    """Loss value and (optionally) its GradientSet for aligned state matrices."""
    if now.shape != target.shape or now.ndim != 2 or now.shape[1] != model.p:
        raise ShapeError(f"batch shapes {now.shape} and {target.shape} do not match p={model.p}")
    if now.shape[0] == 0:
        raise ValidationError("loss needs a non-empty batch")
    tape = Tape()
    graph = _Graph(model, tape, trainable=with_gradients)
    value = graph.objective(tape.constant(now), tape.constant(target), cfg, batch)
    grads = tape.backward(value) if with_gradients else None
    return value.item(), grads


@dataclass(frozen=True, eq=False)
class Checkpoint:
    model: IcodeModel
    train_config: dict = None
    final_loss: float = None


def save_model(model, train_config=None, final_loss=None):
    train_config = train_config.to_dict() if isinstance(train_config, TrainConfig) else train_config
    payload = {
        "version": MODEL_VERSION,
        "p": model.p,
        "hidden": model.hidden,
        "weights": {name: model.parameters()[name].tolist() for name in ("w1", "c1", "w2", "c2")},
        "bias": model.bias.tolist(),
        "train_config": train_config,
        "final_loss": final_loss,
    }
    return json.dumps(payload).encode("utf-8")


def load_checkpoint(payload):
    try:
        data = json.loads(payload.decode("utf-8") if isinstance(payload, bytes) else payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint is truncated or not JSON: {e}")
    if not isinstance(data, dict) or data.get("version") != MODEL_VERSION:
        version = data.get("version") if isinstance(data, dict) else None
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {MODEL_VERSION})")
    try:
        weights = data["weights"]
        model = IcodeModel(PhiNetwork(weights["w1"], weights["c1"], weights["w2"], weights["c2"]), data["bias"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint weights are malformed: {e}")
    if model.p != data.get("p") or model.hidden != data.get("hidden"):
        raise CheckpointError(
            f"checkpoint declares p={data.get('p')}, hidden={data.get('hidden')} "
            f"but weights have p={model.p}, hidden={model.hidden}")
    return Checkpoint(model, data.get("train_config"), data.get("final_loss"))


def load_model(payload):
    return load_checkpoint(payload).model

