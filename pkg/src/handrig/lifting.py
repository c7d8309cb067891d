"""2D-to-3D lifting experiment wiring on top of the pair store.

Builds lifting inputs/targets from pairs, trains the regression MLP in one
of the three pairing modes, and scores predictions in mm.  Validation runs
on the occluded branch of held-out pairs: lifting under occlusion is the
behaviour the pairing protocol is meant to improve.
"""

from __future__ import annotations

import numpy as np

from .dataset_pairs import assemble_batches, record_input, record_target
from .mlp import MlpModel, TrainConfig, TrainResult, forward, train

DEFAULT_HIDDEN = (128, 128)


def split_pairs(pairs: list, val_fraction: float, rng: np.random.Generator):
    """Shuffled train/validation split of a pair list."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    order = rng.permutation(len(pairs))
    n_val = max(1, int(round(val_fraction * len(pairs))))
    val_idx = set(order[:n_val].tolist())
    train_pairs = [pairs[i] for i in order[n_val:]]
    val_pairs = [pairs[i] for i in sorted(val_idx)]
    return train_pairs, val_pairs


def lifting_arrays(pairs: list, views=(0,), branch: str = "occluded"):
    """(inputs, targets) arrays for one branch of a pair list."""
    records = [getattr(p, branch) for p in pairs]
    X = np.stack([record_input(r, views) for r in records])
    T = np.stack([record_target(r) for r in records])
    return X, T


def train_lifting(
    train_pairs: list,
    val_pairs: list,
    config: TrainConfig,
    views=(0,),
    hidden=DEFAULT_HIDDEN,
) -> TrainResult:
    """Train the lifting MLP in the pairing mode named by the config."""
    X_val, T_val = lifting_arrays(val_pairs, views, branch="occluded")
    n_in = X_val.shape[1]
    model = MlpModel.init((n_in, *hidden, T_val.shape[1]), head="linear", seed=config.seed)

    def make_batches(rng: np.random.Generator):
        return assemble_batches(
            train_pairs, config.batch_size, config.pairing_mode, rng, views=views
        )

    return train(model, make_batches, X_val, T_val, config, loss_kind="mse")


def mean_joint_error_mm(
    model: MlpModel, pairs: list, views=(0,), branch: str = "occluded"
) -> float:
    """Mean per-joint Euclidean error of lifted poses against ground truth."""
    X, T = lifting_arrays(pairs, views, branch)
    pred = forward(model, X)
    per_joint = np.linalg.norm((pred - T).reshape(len(X), -1, 3), axis=2)
    return float(np.mean(per_joint))
