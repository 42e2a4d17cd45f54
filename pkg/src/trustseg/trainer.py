"""Training loops: PCE pretraining, gradient-descent baselines and Grid-TR.

Grid-TR alternates a combinatorial Stage A (alpha-expansion on
lambda*KL(s||q) + Potts with hard seeds) with M epochs of Stage B, where the
network is pulled towards the cached hard labelings under the mixed robust
divergence.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence, TextIO

import numpy as np

from . import diffcore as dc
from .crf import GridCRF, make_crf, potts_energy, stage_a_solve, stage_a_unaries, labels_in_seeds
from .data import SegSample
from .diffcore import ModelParams, OptimizerState, Tape, Tensor
from .losses import NoiseModel, UNLABELED, bilinear_potts_grid, mixed_robust_kl, pce
from .metrics import TrimapAccumulator

__all__ = [
    "METHODS",
    "TrainError",
    "TrainConfig",
    "TrainState",
    "new_state",
    "pretrain_pce",
    "train_baseline",
    "train_grid_tr",
    "run_method",
    "stage_a_pass",
    "predict",
    "evaluate",
    "write_history_csv",
    "HISTORY_COLUMNS",
    "ChainRuleReport",
    "verify_chainrule_decomposition",
    "micro_net_fn",
]

log = logging.getLogger(__name__)

METHODS = ("pce-gd", "grid-gd", "grid-tr")
HISTORY_COLUMNS = ("epoch", "train_loss", "stage_a_energy", "val_miou")


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    method: str = "grid-tr"
    lam: float = 0.5
    epsilon: float = 0.1
    nu: float = 0.25
    m: int = 5
    lr: float = 0.02
    power: float = 0.9
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 40
    pretrain_epochs: int = 40
    pretrain_lr: float = 0.02
    sigma_color: float = 0.15
    w_scale: float = 2.0
    max_sweeps: int = 5
    hidden: int = 16
    depth: int = 4
    seed: int = 0
    threads: int = 1

    def validate(self, n_classes: int | None = None) -> None:
        if self.method not in METHODS:
            raise TrainError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lam < 0:
            raise TrainError("lambda must be non-negative")
        if self.m < 1:
            raise TrainError("M must be >= 1")
        if self.epsilon < 0 or (n_classes is not None and self.epsilon >= (n_classes - 1) / n_classes):
            raise TrainError("epsilon must lie in [0, (K-1)/K)")
        if self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise TrainError("batch size must be >= 1 and epoch counts >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in names:
                raise TrainError(f"unknown config key {k!r}")
            default = getattr(cls(), k)
            kw[k] = type(default)(v) if not isinstance(default, str) else str(v)
        return cls(**kw)


@dataclass
class TrainState:
    params: ModelParams
    opt: OptimizerState | None = None
    labelings: dict[int, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    stage_a_log: list[dict] = field(default_factory=list)


def new_state(config: TrainConfig, n_classes: int, in_channels: int = 3) -> TrainState:
    params = dc.init_params(in_channels, n_classes, config.hidden, config.depth, seed=config.seed)
    return TrainState(params)


# -- helpers -----------------------------------------------------------------


# fixed input standardization for images in [0, 1]
INPUT_MEAN = 0.5
INPUT_SCALE = 4.0


def net_input(image: np.ndarray) -> np.ndarray:
    return (np.asarray(image, dtype=np.float64) - INPUT_MEAN) * INPUT_SCALE


def _check_dataset(dataset: Sequence[SegSample], need_seeds: bool = True) -> None:
    if not dataset:
        raise TrainError("dataset is empty")
    if need_seeds:
        for s in dataset:
            if s.scribbles is None or not (s.scribbles != UNLABELED).any():
                raise TrainError("every training image needs at least one seed")


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _n_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def _run_epochs(
    state: TrainState,
    dataset: Sequence[SegSample],
    epochs: int,
    image_loss: Callable[[int, Tensor], Tensor],
    batch_size: int,
    seed: int,
) -> list[float]:
    """Plain SGD epochs over ``image_loss`` averaged over each batch."""
    losses = []
    for _ in range(epochs):
        rng = np.random.default_rng((seed, state.epoch))
        total = 0.0
        for batch in _batches(len(dataset), batch_size, rng):
            dc.zero_grad(state.params)
            with Tape():
                loss = None
                for i in batch:
                    q = dc.softmax(dc.forward(state.params, net_input(dataset[i].image)))
                    li = image_loss(int(i), q)
                    loss = li if loss is None else dc.add(loss, li)
                loss = dc.scale(loss, 1.0 / len(batch))
            dc.backward(loss)
            dc.sgd_step(state.params, state.opt)
            total += loss.item() * len(batch)
        losses.append(total / len(dataset))
        state.epoch += 1
    return losses


def _pce_image_loss(dataset):
    def fn(i, q):
        seeds = dataset[i].scribbles
        return dc.scale(pce(q, seeds), 1.0 / int((seeds != UNLABELED).sum()))

    return fn


def _record(state: TrainState, method: str, loss: float, energy: float, val, n_classes: int) -> None:
    row = {
        "epoch": state.epoch,
        "method": method,
        "train_loss": loss,
        "stage_a_energy": energy,
        "val_miou": evaluate(state.params, val, n_classes)["miou"] if val else float("nan"),
    }
    state.history.append(row)
    log.debug("%s epoch %d: loss %.5f, val mIoU %.4f", method, state.epoch, loss, row["val_miou"])


# -- public training entry points ------------------------------------------------


def pretrain_pce(
    state: TrainState,
    dataset: Sequence[SegSample],
    epochs: int,
    config: TrainConfig | None = None,
) -> TrainState:
    """Train on partial cross-entropy over the scribbles (own LR schedule)."""
    config = config or TrainConfig()
    _check_dataset(dataset)
    if epochs == 0:
        return state
    steps = epochs * _n_batches(len(dataset), config.batch_size)
    saved_opt = state.opt
    state.opt = OptimizerState(config.pretrain_lr, config.momentum, config.power, steps)
    start_epoch = state.epoch
    _run_epochs(state, dataset, epochs, _pce_image_loss(dataset), config.batch_size, config.seed + 7919)
    state.opt = saved_opt
    # pretraining epochs are not part of the main-phase epoch count
    state.epoch = start_epoch
    return state


def _main_optimizer(state: TrainState, n: int, config: TrainConfig) -> None:
    if state.opt is None:
        steps = config.epochs * _n_batches(n, config.batch_size)
        state.opt = OptimizerState(config.lr, config.momentum, config.power, max(steps, 1))


def _crfs(dataset: Sequence[SegSample], n_classes: int, config: TrainConfig) -> list[GridCRF]:
    return [make_crf(s.image, n_classes, config.sigma_color, config.w_scale) for s in dataset]


def train_baseline(
    state: TrainState,
    dataset: Sequence[SegSample],
    config: TrainConfig,
    val: Sequence[SegSample] | None = None,
) -> TrainState:
    """SGD on PCE (pce-gd) or PCE + nu * bilinear Potts (grid-gd)."""
    n_classes = state.params.n_classes
    config.validate(n_classes)
    if config.method not in ("pce-gd", "grid-gd"):
        raise TrainError("train_baseline handles pce-gd and grid-gd")
    _check_dataset(dataset)
    _main_optimizer(state, len(dataset), config)
    base = _pce_image_loss(dataset)
    use_potts = config.method == "grid-gd" and config.nu != 0.0
    crfs = _crfs(dataset, n_classes, config) if use_potts else None

    def fn(i, q):
        loss = base(i, q)
        if use_potts:
            reg = bilinear_potts_grid(q, crfs[i])
            loss = dc.add(loss, dc.scale(reg, config.nu / crfs[i].n_pixels))
        return loss

    for _ in range(config.epochs):
        (loss,) = _run_epochs(state, dataset, 1, fn, config.batch_size, config.seed)
        _record(state, config.method, loss, float("nan"), val, n_classes)
    return state


def stage_a_pass(
    state: TrainState,
    dataset: Sequence[SegSample],
    crfs: Sequence[GridCRF],
    config: TrainConfig,
) -> float:
    """Recompute every cached labeling; returns the mean Stage-A energy."""
    n_classes = state.params.n_classes
    qs = [dc.softmax(dc.forward(state.params, net_input(s.image))).data for s in dataset]

    def solve(i: int):
        seeds = dataset[i].scribbles
        prev = state.labelings.get(i)
        allowed = labels_in_seeds(seeds)
        new = stage_a_solve(
            crfs[i], qs[i], seeds, config.lam, init=prev, max_sweeps=config.max_sweeps, allowed=allowed
        )
        crf = crfs[i].with_terms(unary=stage_a_unaries(qs[i], config.lam), seeds=seeds, allowed=allowed)
        e_new = potts_energy(crf, new)
        e_prev = potts_energy(crf, prev) if prev is not None else float("nan")
        return new, e_new, e_prev

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(solve, range(len(dataset))))
    else:
        results = [solve(i) for i in range(len(dataset))]

    energies = []
    for i, (new, e_new, e_prev) in enumerate(results):
        if np.isfinite(e_prev) and e_new > e_prev + 1e-9 * max(1.0, abs(e_prev)):
            raise TrainError(f"Stage A increased the energy of image {i}: {e_prev} -> {e_new}")
        seeds = dataset[i].scribbles
        sm = seeds != UNLABELED
        if np.any(new[sm] != seeds[sm]):
            raise TrainError(f"Stage A changed seed labels of image {i}")
        state.labelings[i] = new
        state.stage_a_log.append({"epoch": state.epoch, "image": i, "energy": e_new, "prev_energy": e_prev})
        energies.append(e_new)
    return float(np.mean(energies))


def train_grid_tr(
    state: TrainState,
    dataset: Sequence[SegSample],
    config: TrainConfig,
    val: Sequence[SegSample] | None = None,
) -> TrainState:
    """Robust trust region: Stage A every M epochs, Stage B SGD in between."""
    n_classes = state.params.n_classes
    config.validate(n_classes)
    _check_dataset(dataset)
    _main_optimizer(state, len(dataset), config)
    crfs = _crfs(dataset, n_classes, config)
    noise = NoiseModel(config.epsilon, n_classes)

    def fn(i, q):
        d = mixed_robust_kl(q, state.labelings[i], dataset[i].scribbles, noise)
        return dc.scale(d, 1.0 / crfs[i].n_pixels)

    energy = float("nan")
    for e in range(config.epochs):
        if e % config.m == 0:
            energy = stage_a_pass(state, dataset, crfs, config)
        (loss,) = _run_epochs(state, dataset, 1, fn, config.batch_size, config.seed)
        _record(state, config.method, loss, energy, val, n_classes)
    return state


def run_method(
    config: TrainConfig,
    train: Sequence[SegSample],
    n_classes: int,
    val: Sequence[SegSample] | None = None,
    pretrained: ModelParams | None = None,
) -> TrainState:
    """Fresh model, PCE pretraining (unless ``pretrained`` is given), then the main phase."""
    config.validate(n_classes)
    if pretrained is not None:
        state = TrainState(pretrained.clone())
    else:
        state = new_state(config, n_classes, train[0].image.shape[2])
        pretrain_pce(state, train, config.pretrain_epochs, config)
    if config.method == "grid-tr":
        return train_grid_tr(state, train, config, val)
    return train_baseline(state, train, config, val)


# -- evaluation -----------------------------------------------------------------


def predict(params: ModelParams, image) -> np.ndarray:
    return np.argmax(dc.forward(params, net_input(image)).data, axis=-1)


def evaluate(
    params: ModelParams,
    samples: Sequence[SegSample],
    n_classes: int,
    widths: Sequence[int] = (),
) -> dict:
    """Dataset-level mIoU (one confusion matrix over all pixels) and trimap bands."""
    acc = TrimapAccumulator(n_classes, widths)
    for s in samples:
        acc.update(predict(params, s.image), s.gt)
    return {"miou": acc.full.miou(), "trimap": acc.results(), "confusion": acc.full}


def write_history_csv(fh: TextIO, history: Sequence[dict]) -> None:
    w = csv.writer(fh)
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [f"{row[c]:.10g}" for c in HISTORY_COLUMNS[1:]])


# -- chain-rule decomposition check ----------------------------------------------


@dataclass
class ChainRuleReport:
    n_params: int
    n_outputs: int
    direct_vs_two_step: float
    least_squares_vs_two_step: float
    delta_theta_norm: float

    def ok(self, tol: float = 1e-10) -> bool:
        return self.direct_vs_two_step < tol and self.least_squares_vs_two_step < tol


def _jacobian(f: Callable[[Tensor], Tensor], theta0: np.ndarray) -> np.ndarray:
    """Rows d f_j / d theta, one backward pass per output component."""
    n_out = f(Tensor(theta0)).data.size
    jac = np.zeros((n_out, theta0.size))
    for j in range(n_out):
        theta = Tensor(theta0, requires_grad=True)
        with Tape():
            out = dc.reshape(f(theta), (-1,))
            comp = dc.tsum(dc.take_rows(out, np.array([j])))
        if not comp.requires_grad:
            jac[j] = 0.0
            continue
        dc.backward(comp)
        jac[j] = theta.grad
    return jac


def verify_chainrule_decomposition(
    f: Callable[[Tensor], Tensor],
    theta0: np.ndarray,
    loss: Callable[[Tensor], Tensor],
    alpha: float,
) -> ChainRuleReport:
    """Check that a gradient step splits into a segmentation step and a parameter step.

    Three parameter updates are compared at theta0:

    * direct:  -alpha * grad_theta E(f(theta))
    * two-step: delta_s = -alpha * grad_s E(s_t), then delta_theta = J^T delta_s
    * least squares: -1/2 grad_theta ||s_t + delta_s - f(theta)||^2
    """
    theta0 = np.asarray(theta0, dtype=np.float64).ravel()
    s_t = f(Tensor(theta0)).data.ravel()

    s_leaf = Tensor(s_t, requires_grad=True)
    with Tape():
        e = loss(s_leaf)
    if not e.requires_grad:
        raise TrainError("loss is not differentiable with respect to the segmentation")
    dc.backward(e)
    grad_s = s_leaf.grad

    theta = Tensor(theta0, requires_grad=True)
    with Tape():
        e = loss(dc.reshape(f(theta), (-1,)))
    dc.backward(e)
    direct = -alpha * theta.grad

    jac = _jacobian(f, theta0)
    delta_s = -alpha * grad_s
    two_step = delta_s @ jac

    target = s_t + delta_s
    theta = Tensor(theta0, requires_grad=True)
    with Tape():
        r = dc.sub(target, dc.reshape(f(theta), (-1,)))
        ls = dc.tsum(dc.square(r))
    dc.backward(ls)
    least_sq = -0.5 * theta.grad

    return ChainRuleReport(
        n_params=theta0.size,
        n_outputs=s_t.size,
        direct_vs_two_step=float(np.abs(direct - two_step).max()),
        least_squares_vs_two_step=float(np.abs(least_sq - two_step).max()),
        delta_theta_norm=float(np.linalg.norm(two_step)),
    )


def micro_net_fn(template: ModelParams, image: np.ndarray) -> Callable[[Tensor], Tensor]:
    """theta (flat) -> softmax output of the micro-net on ``image``, flattened."""
    shapes = [(name, t.shape) for name, t in template.tensors.items()]

    def f(theta: Tensor) -> Tensor:
        p = ModelParams(template.in_channels, template.hidden, template.depth, template.n_classes)
        off = 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            p.tensors[name] = dc.reshape(dc.take_rows(theta, np.arange(off, off + n)), shape)
            off += n
        return dc.reshape(dc.softmax(dc.forward(p, image)), (-1,))

    return f
