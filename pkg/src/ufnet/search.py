"""Seeded random search over the published hyper-parameter domains.

Each space is a plain mapping from config field to a sampler. Trials are
drawn from one generator, so a search is reproducible from its seed, and
the winner is the trial with the highest validation AUROC (ties keep the
earliest trial).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)


def categorical(*values):
    return lambda rng: values[int(rng.integers(len(values)))]


def uniform(lo: float, hi: float):
    return lambda rng: float(rng.uniform(lo, hi))


def integer(lo: int, hi: int):
    return lambda rng: int(rng.integers(lo, hi + 1))


_SCHEDULER = {
    "scheduler": categorical(None, "step", "plateau"),
    "step_size": integer(1, 30),
    "patience": integer(1, 20),
    "gamma": uniform(0.5, 0.95),
}

TASK_SPACE = {
    "batch_size": categorical(256, 512, 1024),
    "learning_rate": uniform(0.0005, 1.0),
    "drop_correlated": categorical(True, False),
    "correlation_threshold": categorical(0.80, 0.85, 0.90, 0.95),
    "scaling": categorical("standard", "minmax", "none"),
    "oversample": categorical("smote", None),
    "hidden_layers": categorical(0, 1),
    "epochs": integer(1, 100),
    "optimizer": categorical("sgd", "adamw"),
    # the published upper bound of 1.0 makes heavy-ball SGD non-contracting
    "momentum": uniform(0.1, 0.99),
    **_SCHEDULER,
    "seed": integer(100, 999),
}

TASK_MC_SPACE = {
    **TASK_SPACE,
    "dropout": uniform(0.01, 0.30),
    "mc_rounds": categorical(100, 300, 500, 1000, 3000, 5000, 10000),
}

UFNET_SPACE = {
    "batch_size": categorical(256, 512, 1024),
    "learning_rate": uniform(5e-5, 1.0),
    "oversample": categorical(None, "smote", "svmsmote", "adasyn", "borderlinesmote", "smoten", "random"),
    "hidden_layers": categorical(1),
    "projection_dim": categorical(128, 256, 512),
    "qkv_dim": categorical(32, 64, 128, 256),
    "hidden_width": categorical(4, 8, 16, 32, 64, 128),
    "dropout": uniform(0.05, 0.50),
    "eta": uniform(0.1, 100.0),
    "mc_rounds": categorical(30),
    "epochs": integer(1, 300),
    "optimizer": categorical("sgd", "adamw"),
    "momentum": uniform(0.1, 0.99),
    **_SCHEDULER,
    "seed": integer(100, 999),
}

SPACES = {"task": TASK_SPACE, "task-mc": TASK_MC_SPACE, "ufnet": UFNET_SPACE}


def sample(space: dict, rng: np.random.Generator) -> dict:
    """Draw one configuration; every field is drawn so the stream never depends on earlier values."""
    return {name: draw(rng) for name, draw in space.items()}


@dataclass
class SearchResult:
    best: dict
    best_score: float
    trials: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"best": self.best, "best_score": self.best_score, "trials": self.trials}


def random_search(
    space: dict,
    objective: Callable[[dict], float],
    n_trials: int,
    seed: int = 0,
    base: dict | None = None,
    fixed: dict | None = None,
) -> SearchResult:
    """Evaluate ``n_trials`` sampled configs and keep the best.

    Args:
        space: Field -> sampler mapping (see ``SPACES``).
        objective: Maps a full config dict to a validation AUROC.
        n_trials: Number of trials, at least 1.
        seed: Seed of the sampling generator.
        base: Values every trial starts from (e.g. ``{"task": "smile"}``).
        fixed: Values that override the sampled ones.

    Raises:
        ValueError: if ``n_trials < 1``.
    """
    if n_trials < 1:
        raise ValueError("random search needs at least one trial")
    rng = np.random.default_rng(seed)
    trials: list[dict] = []
    best, best_score = None, -np.inf
    for i in range(n_trials):
        config = {**(base or {}), **sample(space, rng), **(fixed or {})}
        try:
            score = float(objective(config))
        except (FloatingPointError, ValueError) as exc:
            logger.info("trial %d failed: %s", i, exc)
            score = float("nan")
        trials.append({"trial": i, "config": config, "val_auroc": score})
        logger.info("trial %d: val AUROC %.4f", i, score)
        if np.isfinite(score) and score > best_score:
            best, best_score = config, score
    if best is None:
        raise FloatingPointError("every search trial failed")
    return SearchResult(best, best_score, trials)
