from dataclasses import dataclass, field

import numpy as np

from icode_rca import configure_logger
from icode_rca.errors import DivergenceError, ValidationError
from icode_rca.model import PARAMETER_NAMES, IcodeModel, objective_gradients


class Adam:
    """Adaptive-moment updates over a dict of named numpy parameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.first = {name: np.zeros_like(value) for name, value in params.items()}
        self.second = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params, grads):
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        updated = {}
        for name, value in params.items():
            grad = grads[name].data
            self.first[name] = self.beta1 * self.first[name] + (1.0 - self.beta1) * grad
            self.second[name] = self.beta2 * self.second[name] + (1.0 - self.beta2) * grad * grad
            m_hat = self.first[name] / correction1
            v_hat = self.second[name] / correction2
            updated[name] = value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


@dataclass
class TrainResult:
    model: IcodeModel
    history: list = field(default_factory=list)

    @property
    def final_loss(self):
        return self.history[-1] if self.history else None


class Trainer:
    """Mini-batch optimisation of the ICODE objective on consecutive sample pairs."""

    def __init__(self, cfg, initial=None):
        self.cfg = cfg.validate()
        self.initial = initial
        self.logger = configure_logger(__name__)

    def fit(self, trajectory):
        if len(trajectory) < 2:
            raise ValidationError(f"training needs at least 2 samples, got {len(trajectory)}")
        cfg = self.cfg
        now, target = trajectory.pairs()
        rng = np.random.default_rng(cfg.seed)
        model = self.initial
        if model is None:
            model = IcodeModel.initialize(trajectory.p, cfg.hidden, rng.integers(2**63))
        elif model.p != trajectory.p:
            raise ValidationError(f"warm-start model has p={model.p}, data has p={trajectory.p}")

        params = {name: np.array(model.parameters()[name]) for name in PARAMETER_NAMES}
        optimizer = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        history = []
        count = now.shape[0]
        for epoch in range(cfg.epochs):
            order = rng.permutation(count)
            total = 0.0
            for batch, start in enumerate(range(0, count, cfg.batch_size)):
                index = order[start:start + cfg.batch_size]
                current = IcodeModel.from_parameters(params)
                try:
                    value, grads = objective_gradients(current, now[index], target[index], cfg, batch=batch)
                except DivergenceError as e:
                    self.logger.error(f"Training diverged at epoch {epoch}, batch {batch}: {e.reason}")
                    raise DivergenceError(e.reason, step=e.step, epoch=epoch, batch=batch)
                if not np.isfinite(value):
                    raise DivergenceError("training loss is not finite", epoch=epoch, batch=batch)
                params = optimizer.step(params, grads)
                total += value * index.size
            history.append(total / count)
            self.logger.debug(f"Epoch {epoch + 1}/{cfg.epochs}: loss {history[-1]:.6g}")

        result = TrainResult(IcodeModel.from_parameters(params), history)
        self.logger.info(f"Trained on {count} pairs for {cfg.epochs} epochs, final loss {result.final_loss}")
        return result


def train(data, cfg, initial=None):
    """Train (or warm-start retrain) a model on a trajectory; returns model and per-epoch loss."""
    return Trainer(cfg, initial).fit(data)
