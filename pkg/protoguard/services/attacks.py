"""
Gradient-based attacks against an encoder + probe classifier.

Every attack works on a batch ``[n, C, H, W]`` in ``[0, 1]`` but treats the
images independently: the classifier runs in eval mode, so the gradient of a
summed objective with respect to one image only depends on that image.
"""

from __future__ import annotations

import contextlib
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np
import structlog

from protoguard.core.errors import ConfigurationError, ContractError
from protoguard.models.module import Parameter
from protoguard.schemas.config import AttackSpec
from protoguard.schemas.enums import AttackAlgorithm
from protoguard.tensor import functional as F
from protoguard.tensor import ops
from protoguard.tensor.tensor import Tensor, no_grad

logger = structlog.get_logger(__name__)

_TANH_LIMIT = 1.0 - 1e-6
_MASKED = -1e9
JSMA_ROW_BLOCK = 256


class Classifier(Protocol):
    classes: int

    def logits(self, x: Tensor) -> Tensor: ...

    def parameters(self) -> list[Parameter]: ...


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    converged: np.ndarray  # bool per image
    iterations: np.ndarray
    norm_history: list[list[float]] = field(default_factory=list)
    original: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def perturbation(self) -> np.ndarray:
        return self.adversarial - self.original


@contextlib.contextmanager
def frozen(model: Classifier) -> Iterator[None]:
    """Stop gradients at the model parameters for the duration of an attack."""
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def predict(model: Classifier, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return np.argmax(model.logits(Tensor(x, dtype=x.dtype)).data, axis=1)


def input_gradients(
    model: Classifier, x: np.ndarray, seeds: Sequence[Callable[[np.ndarray], np.ndarray]]
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits of ``x`` and ``d(sum(seed * logits))/dx`` for every seed builder."""
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    logits = model.logits(xt)
    grads = []
    for seed in seeds:
        xt.grad = None
        logits.backward(seed(logits.data).astype(logits.dtype), inputs=[xt])
        grads.append(np.asarray(xt.grad))
    return logits.data, grads


def cross_entropy_gradient(model: Classifier, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    loss = F.cross_entropy(model.logits(xt), labels, reduction="sum")
    loss.backward(inputs=[xt])
    return np.asarray(xt.grad)


def _one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _flat_norms(delta: np.ndarray, order: float) -> np.ndarray:
    flat = delta.reshape(len(delta), -1)
    return np.linalg.norm(flat, ord=order, axis=1) if flat.shape[1] else np.zeros(len(delta))


class Attack(ABC):
    algorithm: AttackAlgorithm

    def __init__(self, spec: AttackSpec) -> None:
        if spec.algorithm != self.algorithm:
            raise ConfigurationError(f"{type(self).__name__} cannot run a {spec.algorithm.value} spec")
        self.spec = spec

    @property
    def name(self) -> str:
        return self.spec.label

    def __call__(self, model: Classifier, x: np.ndarray, labels: np.ndarray) -> AttackOutcome:
        x = np.asarray(x)
        labels = np.asarray(labels, dtype=np.int64)
        if x.ndim != 4 or labels.shape != (x.shape[0],):
            raise ContractError(f"attack expects [n, C, H, W] images with n labels, got {x.shape}")
        if x.size and (x.min() < 0 or x.max() > 1):
            raise ContractError("attack inputs must lie in [0, 1]")
        with frozen(model):
            outcome = self.generate(model, x, labels)
        outcome.original = x
        logger.debug(
            "Attack generated",
            attack=self.name,
            images=len(x),
            converged=int(outcome.converged.sum()),
        )
        return outcome

    @abstractmethod
    def generate(self, model: Classifier, x: np.ndarray, labels: np.ndarray) -> AttackOutcome:
        ...

    def _fooled(self, model: Classifier, x_adv: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return predict(model, x_adv) != labels


class FGSM(Attack):
    """One signed gradient step of size epsilon; ``sign(0) = 0``."""

    algorithm = AttackAlgorithm.FGSM

    def generate(self, model: Classifier, x: np.ndarray, labels: np.ndarray) -> AttackOutcome:
        eps = self.spec.epsilon
        step = np.sign(cross_entropy_gradient(model, x, labels))
        x_adv = np.clip(x + eps * step, 0.0, 1.0).astype(x.dtype)
        return AttackOutcome(x_adv, self._fooled(model, x_adv, labels), np.ones(len(x), dtype=np.int64))


class PGD(Attack):
    """Iterated signed steps of size alpha, each projected onto the
    epsilon-ball around ``x`` and then onto ``[0, 1]``."""

    algorithm = AttackAlgorithm.PGD

    def _start(self, x: np.ndarray) -> np.ndarray:
        if not self.spec.random_start:
            return x.copy()
        rng = np.random.default_rng(self.spec.seed)
        noise = rng.uniform(-self.spec.epsilon, self.spec.epsilon, size=x.shape)
        return np.clip(x + noise, 0.0, 1.0).astype(x.dtype)

    def generate(self, model: Classifier, x: np.ndarray, labels: np.ndarray) -> AttackOutcome:
        eps, alpha = self.spec.epsilon, self.spec.alpha
        lower, upper = x - eps, x + eps
        x_adv = self._start(x)
        for _ in range(self.spec.steps):
            step = np.sign(cross_entropy_gradient(model, x_adv, labels))
            x_adv = np.clip(np.clip(x_adv + alpha * step, lower, upper), 0.0, 1.0).astype(x.dtype)
        steps = np.full(len(x), self.spec.steps, dtype=np.int64)
        return AttackOutcome(x_adv, self._fooled(model, x_adv, labels), steps)


class BIM(PGD):
    """Basic iterative method: PGD from the clean image, never a random start."""

    algorithm = AttackAlgorithm.BIM

    def _start(self, x: np.ndarray) -> np.ndarray:
        return x.copy()


class DeepFool(Attack):
    """Multi-class DeepFool against the true label.

    Each iteration linearizes the classifier and steps to the nearest
    boundary; the accumulated step is scaled by ``1 + overshoot``. Images
    that are already misclassified are returned untouched.
    """

    algorithm = AttackAlgorithm.DEEPFOOL

    def generate(self, model: Classifier, x: np.ndarray, labels: np.ndarray) -> AttackOutcome:
        classes = model.classes
        if classes < 2:
            raise ContractError("DeepFool needs a classifier with >= 2 classes")
        scale = 1.0 + self.spec.overshoot
        n = len(x)
        r_total = np.zeros(x.shape, dtype=np.float64)
        x_adv = x.copy()
        iterations = np.zeros(n, dtype=np.int64)
        active = predict(model, x) == labels

        seeds = [
            (lambda logits, k=k: np.tile(np.eye(classes)[k], (len(logits), 1)))
            for k in range(classes)
        ]
        for _ in range(self.spec.steps):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            logits, grads = input_gradients(model, x_adv[idx], seeds)
            gradients = np.stack(grads, axis=1).astype(np.float64)  # [b, K, C, H, W]
            for row, i in enumerate(idx):
                y = labels[i]
                w = gradients[row] - gradients[row, y]
                f = logits[row].astype(np.float64) - logits[row, y]
                norms = np.linalg.norm(w.reshape(classes, -1), axis=1)
                ratios = np.full(classes, np.inf)
                others = [k for k in range(classes) if k != y and norms[k] > 0]
                if not others:
                    active[i] = False
                    continue
                for k in others:
                    ratios[k] = abs(f[k]) / norms[k]
                k = int(np.argmin(ratios))
                r_total[i] += (abs(f[k]) + 1e-4) * w[k] / norms[k] ** 2
                iterations[i] += 1
            x_adv[idx] = np.clip(x[idx] + scale * r_total[idx], 0.0, 1.0).astype(x.dtype)
            active &= predict(model, x_adv) == labels

        converged = predict(model, x_adv) != labels
        if (~converged).any():
            logger.warning("DeepFool did not flip every image", unconverged=int((~converged).sum()))
        return AttackOutcome(x_adv, converged, iterations)


class CarliniWagnerL2(Attack):
    """Carlini-Wagner L2 with Adam in tanh space.

    Minimizes ``||delta||^2 + c * max(Z_y - max_{k != y} Z_k + kappa, 0)``
    and keeps, per image, the smallest-norm iterate whose margin reaches
    ``kappa``. Images never reaching it are returned unchanged.
    """

    algorithm = AttackAlgorithm.CW

    beta1 = 0.9
    beta2 = 0.999
    adam_eps = 1e-8

    def generate(self, model: Classifier, x: np.ndarray, labels: np.ndarray) -> AttackOutcome:
        spec = self.spec
        n = len(x)
        onehot = _one_hot(labels, model.classes)
        w = np.arctanh(np.clip(2.0 * x.astype(np.float64) - 1.0, -_TANH_LIMIT, _TANH_LIMIT))
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        best = x.copy()
        best_norm = np.full(n, np.inf)
        found_at = np.zeros(n, dtype=np.int64)
        history: list[list[float]] = [[] for _ in range(n)]
        target = Tensor(x, dtype=x.dtype)
        mask = Tensor(onehot * _MASKED, dtype=x.dtype)
        pick = Tensor(onehot, dtype=x.dtype)

        for step in range(1, spec.steps + 1):
            wt = Tensor(w.astype(x.dtype), requires_grad=True)
            x_adv = (ops.tanh(wt) + 1.0) * 0.5
            delta = x_adv - target
            l2 = ops.sum(delta * delta, axis=(1, 2, 3))
            logits = model.logits(x_adv)
            real = ops.sum(logits * pick, axis=1)
            other = ops.max(logits + mask, axis=1)
            hinge = ops.relu(real - other + spec.kappa)
            loss = ops.sum(l2 + spec.c * hinge)
            loss.backward(inputs=[wt])

            margin = other.data - real.data
            success = margin >= spec.kappa
            improved = success & (l2.data < best_norm)
            for i in np.flatnonzero(improved):
                best_norm[i] = float(l2.data[i])
                best[i] = x_adv.data[i]
                found_at[i] = step
                history[i].append(math.sqrt(best_norm[i]))

            grad = np.asarray(wt.grad, dtype=np.float64)
            m = self.beta1 * m + (1 - self.beta1) * grad
            v = self.beta2 * v + (1 - self.beta2) * grad * grad
            m_hat = m / (1 - self.beta1**step)
            v_hat = v / (1 - self.beta2**step)
            w = w - spec.learning_rate * m_hat / (np.sqrt(v_hat) + self.adam_eps)

        converged = np.isfinite(best_norm)
        if (~converged).any():
            logger.warning("CW found no adversarial example", unconverged=int((~converged).sum()))
        return AttackOutcome(np.clip(best, 0.0, 1.0).astype(x.dtype), converged, found_at, history)


class JSMA(Attack):
    """Targeted saliency-map attack that saturates pairs of input values to 1.

    The target is ``(label + 1) % K`` unless ``targets`` are given. Each
    iteration searches all admissible pairs of unmodified values for the one
    maximizing ``-alpha * beta`` (with ``alpha > 0`` and ``beta < 0``), where
    ``alpha`` is the summed target-logit gradient and ``beta`` the summed
    gradient of the other logits. At most ``ceil(gamma * C * H * W)`` values
    change.
    """

    algorithm = AttackAlgorithm.JSMA

    def __init__(self, spec: AttackSpec, targets: np.ndarray | None = None) -> None:
        super().__init__(spec)
        self.targets = targets

    def budget(self, x: np.ndarray) -> int:
        return math.ceil(self.spec.gamma * int(np.prod(x.shape[1:])) - 1e-9)

    @staticmethod
    def best_pair(alpha: np.ndarray, beta: np.ndarray, domain: np.ndarray) -> tuple[int, int] | None:
        """Exhaustive search over pairs ``p < q`` inside ``domain``."""
        candidates = np.flatnonzero(domain)
        size = candidates.size
        if size < 2:
            return None
        a = alpha[candidates]
        b = beta[candidates]
        columns = np.arange(size)
        best: tuple[float, int, int] | None = None
        # Row blocks keep the pair matrices small; strict ">" keeps the first maximum.
        for start in range(0, size, JSMA_ROW_BLOCK):
            rows = np.arange(start, min(start + JSMA_ROW_BLOCK, size))
            pair_alpha = a[rows, None] + a[None, :]
            pair_beta = b[rows, None] + b[None, :]
            admissible = (pair_alpha > 0) & (pair_beta < 0) & (columns[None, :] > rows[:, None])
            if not admissible.any():
                continue
            saliency = np.where(admissible, -pair_alpha * pair_beta, -np.inf)
            flat = int(np.argmax(saliency))
            value = float(saliency.flat[flat])
            if best is None or value > best[0]:
                p, q = divmod(flat, size)
                best = (value, int(rows[p]), q)
        if best is None:
            return None
        return int(candidates[best[1]]), int(candidates[best[2]])

    def generate(self, model: Classifier, x: np.ndarray, labels: np.ndarray) -> AttackOutcome:
        classes = model.classes
        targets = (labels + 1) % classes if self.targets is None else np.asarray(self.targets)
        budget = self.budget(x)
        n = len(x)
        features = int(np.prod(x.shape[1:]))
        x_adv = x.reshape(n, features).copy()
        domain = x_adv < 1.0
        modified = np.zeros(n, dtype=np.int64)
        iterations = np.zeros(n, dtype=np.int64)
        active = predict(model, x) != targets

        while active.any():
            idx = np.flatnonzero(active & (modified + 2 <= budget))
            if idx.size == 0:
                break
            tmask = _one_hot(targets[idx], classes)
            seeds = [lambda _logits: tmask, lambda _logits: 1.0 - tmask]
            batch = x_adv[idx].reshape((-1,) + x.shape[1:])
            _, (grad_target, grad_other) = input_gradients(model, batch, seeds)
            grad_target = grad_target.reshape(idx.size, features).astype(np.float64)
            grad_other = grad_other.reshape(idx.size, features).astype(np.float64)
            for row, i in enumerate(idx):
                pair = self.best_pair(grad_target[row], grad_other[row], domain[i])
                if pair is None:
                    active[i] = False
                    continue
                x_adv[i, list(pair)] = 1.0
                domain[i, list(pair)] = False
                modified[i] += 2
                iterations[i] += 1
            reached = predict(model, x_adv.reshape(x.shape)) == targets
            active &= ~reached
            active[idx[modified[idx] + 2 > budget]] = False

        adversarial = x_adv.reshape(x.shape)
        converged = predict(model, adversarial) == targets
        if (~converged).any():
            logger.warning("JSMA budget exhausted", unconverged=int((~converged).sum()), budget=budget)
        return AttackOutcome(adversarial, converged, iterations)


ATTACKS: dict[AttackAlgorithm, type[Attack]] = {
    AttackAlgorithm.FGSM: FGSM,
    AttackAlgorithm.PGD: PGD,
    AttackAlgorithm.BIM: BIM,
    AttackAlgorithm.DEEPFOOL: DeepFool,
    AttackAlgorithm.CW: CarliniWagnerL2,
    AttackAlgorithm.JSMA: JSMA,
}


def build_attack(spec: AttackSpec) -> Attack:
    return ATTACKS[spec.algorithm](spec)


def perturbation_norms(original: np.ndarray, adversarial: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-image ``(L-inf, L2)`` norms of the perturbation."""
    delta = adversarial.astype(np.float64) - original.astype(np.float64)
    return _flat_norms(delta, np.inf), _flat_norms(delta, 2)
