"""Experiment drivers shared by the CLI and the acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import SegSample, gen_scenes, noisy_cls_arrays, with_scribbles
from .diffcore import OptimizerState, Tape, Tensor
from .losses import NoiseModel, robust_ce
from .trainer import TrainConfig, evaluate, new_state, pretrain_pce, run_method

log = logging.getLogger(__name__)

__all__ = [
    "BenchmarkSpec",
    "make_benchmark",
    "run_variants",
    "compare_methods",
    "lambda_sweep",
    "MLP",
    "train_noisy_classifier",
    "noisy_cls_sweep",
]


@dataclass(frozen=True)
class BenchmarkSpec:
    n_train: int = 20
    n_val: int = 10
    height: int = 64
    width: int = 64
    n_classes: int = 4
    noise_std: float = 0.1
    color_jitter: float = 0.06
    seed: int = 1


def make_benchmark(spec: BenchmarkSpec = BenchmarkSpec()):
    """(train scenes without scribbles, val scenes)."""
    train = gen_scenes(
        spec.n_train, spec.height, spec.width, spec.n_classes, spec.noise_std, seed=spec.seed,
        color_jitter=spec.color_jitter,
    )
    val = gen_scenes(
        spec.n_val, spec.height, spec.width, spec.n_classes, spec.noise_std, seed=spec.seed + 1,
        color_jitter=spec.color_jitter,
    )
    return train, val


def run_variants(
    train: Sequence[SegSample],
    val: Sequence[SegSample],
    n_classes: int,
    config: TrainConfig,
    variants: dict[str, TrainConfig],
) -> dict[str, dict]:
    """Run each named config from one shared PCE-pretrained model (built from ``config``)."""
    start = new_state(config, n_classes, train[0].image.shape[2])
    pretrain_pce(start, train, config.pretrain_epochs, config)
    out = {}
    for name, cfg in variants.items():
        t0 = time.perf_counter()
        state = run_method(cfg, train, n_classes, val, pretrained=start.params)
        out[name] = {
            "miou": evaluate(state.params, val, n_classes)["miou"],
            "state": state,
            "seconds": time.perf_counter() - t0,
        }
        log.info("%s: val mIoU %.4f (%.1fs)", name, out[name]["miou"], out[name]["seconds"])
    return out


def compare_methods(
    train: Sequence[SegSample],
    val: Sequence[SegSample],
    n_classes: int,
    config: TrainConfig,
    methods: Sequence[str] = ("pce-gd", "grid-gd", "grid-tr"),
) -> dict[str, dict]:
    """Each method from one shared PCE-pretrained model; same step budget for all."""
    return run_variants(train, val, n_classes, config, {m: replace(config, method=m) for m in methods})


def lambda_sweep(
    train: Sequence[SegSample],
    val: Sequence[SegSample],
    n_classes: int,
    config: TrainConfig,
    lambdas: Sequence[float],
) -> list[tuple[float, float]]:
    """Grid-TR val mIoU for each lambda, all from one shared pretrained model."""
    variants = {i: replace(config, method="grid-tr", lam=lam) for i, lam in enumerate(lambdas)}
    res = run_variants(train, val, n_classes, config, variants)
    return [(lam, res[i]["miou"]) for i, lam in enumerate(lambdas)]


# -- noisy-label classification ---------------------------------------------------


class MLP:
    """Two hidden ReLU layers; holds its tensors in ``.tensors`` like ModelParams."""

    def __init__(self, dim: int, hidden: int, n_classes: int, seed: int = 0, head_scale: float = 1.0):
        rng = np.random.default_rng(seed)
        sizes = [dim, hidden, hidden, n_classes]
        self.tensors: dict[str, Tensor] = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = np.sqrt(2.0 / a) * (head_scale if i == len(sizes) - 2 else 1.0)
            self.tensors[f"fc{i}.w"] = Tensor(rng.normal(0, std, size=(a, b)), requires_grad=True)
            self.tensors[f"fc{i}.b"] = Tensor(np.zeros(b), requires_grad=True)
        self.n_layers = len(sizes) - 1

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i in range(self.n_layers):
            h = dc.add(dc.matmul(h, self.tensors[f"fc{i}.w"]), self.tensors[f"fc{i}.b"])
            if i < self.n_layers - 1:
                h = dc.relu(h)
        return h


def train_noisy_classifier(
    x: np.ndarray,
    y_observed: np.ndarray,
    epsilon: float,
    n_classes: int,
    epochs: int = 150,
    lr: float = 0.05,
    batch_size: int = 50,
    hidden: int = 128,
    head_scale: float = 1.0,
    seed: int = 0,
) -> MLP:
    """SGD with momentum on the robust cross-entropy (plain CE when epsilon = 0)."""
    noise = NoiseModel(epsilon, n_classes)
    model = MLP(x.shape[1], hidden, n_classes, seed=seed, head_scale=head_scale)
    n = len(x)
    steps = epochs * int(np.ceil(n / batch_size))
    opt = OptimizerState(lr, momentum=0.9, power=0.9, total_steps=steps)
    rng = np.random.default_rng(seed + 1)
    for _ in range(epochs):
        order = rng.permutation(n)
        for k in range(0, n, batch_size):
            idx = order[k : k + batch_size]
            dc.zero_grad(model)
            with Tape():
                q = dc.softmax(model(x[idx]))
                loss = dc.scale(robust_ce(q, y_observed[idx], noise), 1.0 / len(idx))
            dc.backward(loss)
            dc.sgd_step(model, opt)
    return model


def noisy_cls_sweep(
    epsilons: Sequence[float],
    corruption: float = 0.5,
    n_classes: int = 10,
    n_train: int = 1000,
    n_test: int = 2000,
    dim: int = 20,
    separation: float = 4.0,
    modes: int = 5,
    seed: int = 0,
    repeats: int = 3,
    **train_kw,
) -> list[tuple[float, float]]:
    """Clean test accuracy after training on corrupted labels, per epsilon.

    Accuracy is averaged over ``repeats`` training runs (init and batch order
    seeds ``seed .. seed + repeats - 1``) on the same data.
    """
    x, _, yo = noisy_cls_arrays(n_train, n_classes, corruption, seed, dim, separation, modes=modes)
    xt, yt, _ = noisy_cls_arrays(n_test, n_classes, 0.0, seed + 1, dim, separation, modes=modes)
    rows = []
    for eps in epsilons:
        accs = []
        for r in range(repeats):
            model = train_noisy_classifier(x, yo, eps, n_classes, seed=seed + r, **train_kw)
            accs.append(np.mean(np.argmax(model(xt).data, axis=1) == yt))
        acc = float(np.mean(accs))
        rows.append((float(eps), acc))
        log.info("epsilon %.2f: test accuracy %.4f", eps, acc)
    return rows
