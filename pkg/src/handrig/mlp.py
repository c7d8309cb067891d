"""Plain multi-layer perceptron with hand-written backpropagation.

Two heads share this code: a regression head lifting 2D joint detections
to a root-relative 3D pose, and a softmax head classifying grasp types
from a flattened pose vector.  Training is plain mini-batch SGD; in the
pairwise modes each step back-propagates the summed loss of two forward
passes (one per branch).  No framework, float64 throughout; gradient
correctness is pinned by finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .hand_model import N_JOINTS, DimensionError

POSE_DIM = 3 * N_JOINTS              # flattened root-relative pose
MIDDLE_MCP = 9                       # scale reference joint


@dataclass
class MlpModel:
    layer_sizes: tuple
    weights: list                    # (n_in, n_out) per layer
    biases: list                     # (n_out,) per layer
    head: str = "linear"             # "linear" | "softmax"
    seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise DimensionError(f"layer {i} weights do not chain with layer_sizes")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("weights must be finite")
        if self.head not in ("linear", "softmax"):
            raise ValueError(f"unknown head {self.head!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @classmethod
    def init(cls, layer_sizes, head: str = "linear", seed: int = 0) -> "MlpModel":
        """He-scaled Gaussian init, deterministic in the seed."""
        rng = np.random.default_rng(seed)
        sizes = tuple(int(s) for s in layer_sizes)
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)))
            biases.append(np.zeros(n_out))
        return cls(sizes, weights, biases, head=head, seed=seed)

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.layer_sizes,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            head=self.head,
            seed=self.seed,
        )

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "head": self.head,
            "seed": self.seed,
            "weights": [W.tolist() for W in self.weights],   # row-major (n_in rows)
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        return cls(
            tuple(d["layer_sizes"]),
            [np.array(W, dtype=float) for W in d["weights"]],
            [np.array(b, dtype=float) for b in d["biases"]],
            head=str(d.get("head", "linear")),
            seed=int(d.get("seed", 0)),
        )


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cached(model: MlpModel, X: np.ndarray):
    """Hidden ReLU chain; returns per-layer activations and final logits."""
    acts = [X]
    h = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Network output for a single input or a batch.

    Linear head returns the raw output; softmax head returns probabilities.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.n_inputs:
        raise DimensionError(f"input size {X.shape[1]} != model input {model.n_inputs}")
    out = _forward_cached(model, X)[-1]
    if model.head == "softmax":
        out = _softmax(out)
    return out[0] if single else out


def backward(model: MlpModel, x: np.ndarray, target, loss_kind: str):
    """Exact backprop gradients and the loss for one batch.

    ``mse`` (regression): loss = mean over batch and components of the
    squared error.  ``cross_entropy`` (classification): targets are class
    indices; loss = mean negative log softmax probability.
    Returns (grad_weights, grad_biases, loss).
    """
    x = np.asarray(x, dtype=float)
    X = x[None, :] if x.ndim == 1 else x
    if X.shape[1] != model.n_inputs:
        raise DimensionError(f"input size {X.shape[1]} != model input {model.n_inputs}")
    B = X.shape[0]
    acts = _forward_cached(model, X)
    logits = acts[-1]

    if loss_kind == "mse":
        T = np.asarray(target, dtype=float)
        T = T[None, :] if T.ndim == 1 else T
        if T.shape != logits.shape:
            raise DimensionError(f"target shape {T.shape} != output shape {logits.shape}")
        diff = logits - T
        loss = float(np.mean(diff**2))
        delta = 2.0 * diff / diff.size
    elif loss_kind == "cross_entropy":
        labels = np.atleast_1d(np.asarray(target, dtype=int))
        if labels.shape != (B,):
            raise DimensionError("one class label per batch row required")
        if labels.min() < 0 or labels.max() >= model.n_outputs:
            raise ValueError("class label out of range")
        probs = _softmax(logits)
        loss = float(np.mean(-np.log(np.maximum(probs[np.arange(B), labels], 1e-300))))
        delta = probs.copy()
        delta[np.arange(B), labels] -= 1.0
        delta /= B
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    grad_w = [np.empty_like(W) for W in model.weights]
    grad_b = [np.empty_like(b) for b in model.biases]
    for i in range(len(model.weights) - 1, -1, -1):
        grad_w[i] = acts[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0.0)
    return grad_w, grad_b, loss


def evaluate_loss(model: MlpModel, X: np.ndarray, target, loss_kind: str) -> float:
    """Loss without gradients (used for validation)."""
    logits = _forward_cached(model, np.asarray(X, dtype=float))[-1]
    if loss_kind == "mse":
        T = np.asarray(target, dtype=float)
        return float(np.mean((logits - T) ** 2))
    labels = np.asarray(target, dtype=int)
    probs = _softmax(logits)
    picked = np.maximum(probs[np.arange(len(labels)), labels], 1e-300)
    return float(np.mean(-np.log(picked)))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 32
    max_steps: int = 4000
    target_val_loss: float | None = None
    eval_interval: int = 50
    seed: int = 0
    pairing_mode: str = "siamese"    # siamese | random-pair | single

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.max_steps, self.eval_interval) <= 0:
            raise ValueError("training hyperparameters must be positive")
        if self.pairing_mode not in ("siamese", "random-pair", "single"):
            raise ValueError(f"unknown pairing mode {self.pairing_mode!r}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_steps": self.max_steps,
            "target_val_loss": self.target_val_loss,
            "eval_interval": self.eval_interval,
            "seed": self.seed,
            "pairing_mode": self.pairing_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        defaults = cls()
        kwargs = {}
        for key, default in defaults.to_dict().items():
            val = d.get(key, default)
            if key == "target_val_loss":
                kwargs[key] = None if val is None else float(val)
            else:
                kwargs[key] = type(default)(val)
        return cls(**kwargs)


@dataclass
class TrainResult:
    model: MlpModel
    trace: list = field(default_factory=list)   # (step, train_loss, val_loss)
    steps_to_target: int | None = None
    status: str = "completed"                   # completed | target-reached | diverged
    diverged_step: int | None = None


def _apply_sgd(model, grads, lr):
    for W, gW in zip(model.weights, grads[0]):
        W -= lr * gW
    for b, gb in zip(model.biases, grads[1]):
        b -= lr * gb


def train(
    model: MlpModel,
    make_batches: Callable[[np.random.Generator], Iterable],
    val_inputs: np.ndarray,
    val_targets,
    config: TrainConfig,
    loss_kind: str = "mse",
) -> TrainResult:
    """Mini-batch SGD; pairwise modes descend the summed two-branch loss.

    ``make_batches(rng)`` must yield one epoch of batch objects carrying
    ``inputs_a/targets_a`` and optionally ``inputs_b/targets_b``; it is
    re-invoked (with the same generator, advanced) when an epoch runs out.
    Evaluation runs every ``eval_interval`` steps; training stops early
    once the validation loss reaches ``target_val_loss``.  Deterministic
    given the config seed.
    """
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    trace = []
    step = 0
    while step < config.max_steps:
        progressed = False
        for batch in make_batches(rng):
            progressed = True
            step += 1
            gw_a, gb_a, loss_a = backward(model, batch.inputs_a, batch.targets_a, loss_kind)
            train_loss = loss_a
            if getattr(batch, "inputs_b", None) is not None:
                gw_b, gb_b, loss_b = backward(model, batch.inputs_b, batch.targets_b, loss_kind)
                train_loss = loss_a + loss_b
                grads = (
                    [a + b for a, b in zip(gw_a, gw_b)],
                    [a + b for a, b in zip(gb_a, gb_b)],
                )
            else:
                grads = (gw_a, gb_a)
            if not np.isfinite(train_loss):
                return TrainResult(model, trace, None, "diverged", step)
            _apply_sgd(model, grads, config.learning_rate)

            if step % config.eval_interval == 0:
                val_loss = evaluate_loss(model, val_inputs, val_targets, loss_kind)
                trace.append((step, train_loss, val_loss))
                if config.target_val_loss is not None and val_loss <= config.target_val_loss:
                    return TrainResult(model, trace, step, "target-reached")
            if step >= config.max_steps:
                break
        if not progressed:
            raise ValueError("batch factory yielded no batches")
    return TrainResult(model, trace, None, "completed")


@dataclass
class _ArrayBatch:
    inputs_a: np.ndarray
    targets_a: np.ndarray
    inputs_b: np.ndarray | None = None
    targets_b: np.ndarray | None = None


def array_batches(X: np.ndarray, y, batch_size: int):
    """Single-branch epoch factory over arrays (shuffled each epoch)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if len(X) < batch_size:
        raise ValueError("batch size exceeds dataset size")

    def factory(rng: np.random.Generator):
        order = rng.permutation(len(X))
        for s in range(len(X) // batch_size):
            sel = order[s * batch_size:(s + 1) * batch_size]
            yield _ArrayBatch(X[sel], y[sel])

    return factory


def lift_2d_to_3d(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Root-relative 3D pose (mm) from normalized per-joint (u, v, confidence)."""
    if model.head != "linear":
        raise ValueError("lifting requires a linear (regression) head")
    out = forward(model, x)
    if out.shape[-1] != POSE_DIM:
        raise DimensionError(f"lifting model must output {POSE_DIM} values")
    return out


def classify_grasp(model: MlpModel, pose: np.ndarray, num_classes: int | None = None):
    """Grasp class id and the softmax probability vector for one pose.

    Ties in the argmax resolve to the lowest class id.
    """
    if model.head != "softmax":
        raise ValueError("grasp classification requires a softmax head")
    if num_classes is not None and num_classes != model.n_outputs:
        raise DimensionError(
            f"model predicts {model.n_outputs} classes, {num_classes} requested"
        )
    probs = forward(model, np.asarray(pose, dtype=float))
    return int(np.argmax(probs)), probs


def preprocess_pose(joints: np.ndarray) -> np.ndarray:
    """Root-relative, scale-normalized, flattened pose vector.

    Subtracts the wrist and divides by the wrist-to-middle-MCP distance, so
    the output is invariant to translation and global scale (not rotation).
    """
    joints = np.asarray(joints, dtype=float)
    if joints.shape != (N_JOINTS, 3):
        raise DimensionError(f"joints must have shape ({N_JOINTS}, 3)")
    if not np.all(np.isfinite(joints)):
        raise ValueError("joints must be finite")
    rel = joints - joints[0]
    scale = float(np.linalg.norm(rel[MIDDLE_MCP]))
    if scale < 1e-12:
        raise ValueError("degenerate pose: wrist and middle MCP coincide")
    return (rel / scale).ravel()
