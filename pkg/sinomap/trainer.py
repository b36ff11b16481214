"""
Training loops for the enhancement network.

One alternation engine serves all three modes:
- supervised:   MSE against clean references only
- unsupervised: MAP objective with latent photon counts G, refreshed by update_G sweeps
- semi:         MAP objective on unlabeled samples + lambda * MSE on labeled pairs

Step losses are per-ray sums scaled by fixed per-set factors, so the logged total is
data_term + prior_term + weight * sup_term and the gradient is its exact derivative.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from sinomap import net
from sinomap.errors import ShapeMismatchError, ValidationError
from sinomap.map_model import PriorConfig, data_energy, prior_energy, unsup_loss_and_grad, update_G
from sinomap.net import AdamState, NetSpec, NetworkParams
from sinomap.noise_sim import PhotonData, ScanConfig, derive_seed
from sinomap.parallel import ordered_map

logger = logging.getLogger(__name__)

Mode = Literal["supervised", "unsupervised", "semi"]
SHUFFLE_STREAM = 1


class TrainConfig(BaseModel):
    """Hyperparameters of one training run; lam=None means |C2| / (|C1| + |C2|)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, populate_by_name=True)

    mode: Mode = "unsupervised"
    lam: Optional[float] = Field(None, ge=0, alias="lambda")
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(4, ge=1)
    g_update_period: int = Field(1, ge=1)
    seed: int = 0
    early_stop_tol: float = Field(1e-5, ge=0)
    patience: int = Field(5, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    scan: Optional[ScanConfig] = None
    prior: PriorConfig = Field(default_factory=PriorConfig)
    net: NetSpec = Field(default_factory=NetSpec)
    threads: Optional[int] = None


class StepRecord(BaseModel):
    epoch: int
    step: int
    mode: str
    data_term: float
    prior_term: float
    sup_term: float
    total: float


class SweepRecord(BaseModel):
    """Summed objective over unlabeled samples before and after one G sweep at fixed params."""

    epoch: int
    before: float
    after: float
    per_sample_before: List[float]
    per_sample_after: List[float]


@dataclass(eq=False)
class TrainState:
    params: NetworkParams
    adam: AdamState
    G: List[PhotonData] = field(default_factory=list)
    epoch: int = 0
    history: List[StepRecord] = field(default_factory=list)
    sweeps: List[SweepRecord] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    stopped_early: bool = False

    def history_frame(self) -> pd.DataFrame:
        columns = list(StepRecord.model_fields)
        return pd.DataFrame([r.model_dump() for r in self.history], columns=columns)

    def sweeps_frame(self) -> pd.DataFrame:
        rows = [{"epoch": s.epoch, "before": s.before, "after": s.after} for s in self.sweeps]
        return pd.DataFrame(rows, columns=["epoch", "before", "after"])


@dataclass(eq=False)
class StepResult:
    data_term: float
    prior_term: float
    sup_term: float
    total: float
    grads: NetworkParams


EpochCallback = Callable[[TrainState], None]


def _check_pairs(pairs: Sequence[Tuple[np.ndarray, np.ndarray]]):
    for i, (x, y) in enumerate(pairs):
        if np.shape(x) != np.shape(y):
            raise ShapeMismatchError(f"pair {i}: input {np.shape(x)} and reference {np.shape(y)} differ")


def _check_samples(samples):
    for i, sample in enumerate(samples):
        if len(sample) != 2 or not isinstance(sample[1], PhotonData):
            raise ValidationError(f"unlabeled sample {i} carries no photon data")
        if np.shape(sample[0]) != sample[1].shape:
            raise ShapeMismatchError(f"sample {i}: sinogram {np.shape(sample[0])} and counts {sample[1].shape} differ")


def batch_gradient(params: NetworkParams, unsup: Sequence[Tuple[np.ndarray, PhotonData]],
                   sup: Sequence[Tuple[np.ndarray, np.ndarray]], weight: float,
                   scan: Optional[ScanConfig], prior: PriorConfig,
                   threads: Optional[int] = None, unsup_norm: Optional[float] = None,
                   sup_norm: Optional[float] = None) -> StepResult:
    """
    Loss and parameter gradient of one mixed batch.

    Args:
        unsup: (x, PhotonData with current G) pairs
        sup: (x, clean y) pairs
        weight: factor on the supervised term
        unsup_norm: sample count the unlabeled terms are averaged over (default: len(unsup))
        sup_norm: sample count the supervised term is averaged over (default: len(sup))

    The training loop passes |C1| / n_batches and |C2| / n_batches: per-sample weights
    are then fixed and the mean step total over an epoch is the set-averaged objective.
    """
    if unsup and scan is None:
        raise ValidationError("unlabeled samples need a scan config")
    unsup_norm = unsup_norm or len(unsup)
    sup_norm = sup_norm or len(sup)

    def unsup_item(sample):
        x, pd_ = sample
        out, cache = net.forward(params, x)
        breakdown, g = unsup_loss_and_grad(out, pd_, scan, prior)
        scale = 1.0 / (unsup_norm * out.size)
        return breakdown.data_term * scale, breakdown.prior_term * scale, net.backward(params, cache, g * scale)

    def sup_item(pair):
        x, y = pair
        out, cache = net.forward(params, x)
        r = out - y
        scale = 1.0 / (sup_norm * out.size)
        return float(np.sum(r * r)) * scale, net.backward(params, cache, (2.0 * weight * scale) * r)

    grads = [a.copy() for a in params.zeros_like().arrays()]
    data_term = prior_term = sup_term = 0.0
    for d, p, g in ordered_map(unsup_item, unsup, threads):
        data_term += d
        prior_term += p
        for acc, part in zip(grads, g.arrays()):
            acc += part
    for s, g in ordered_map(sup_item, sup, threads):
        sup_term += s
        for acc, part in zip(grads, g.arrays()):
            acc += part
    total = data_term + prior_term + weight * sup_term
    return StepResult(data_term=data_term, prior_term=prior_term, sup_term=sup_term, total=total,
                      grads=NetworkParams.from_arrays(params.spec, grads))


def unsup_objective(params: NetworkParams, xs: Sequence[np.ndarray], G: Sequence[PhotonData],
                    cfg: TrainConfig) -> float:
    """Summed data + prior energy of the network outputs, recomputed from scratch."""
    total = 0.0
    for x, pd_ in zip(xs, G):
        out, _ = net.forward(params, x)
        total += data_energy(out, pd_, cfg.scan) + prior_energy(out, cfg.prior)
    return total


def _sweep(state: TrainState, xs: List[np.ndarray], cfg: TrainConfig) -> SweepRecord:
    def sweep_one(i):
        out, _ = net.forward(state.params, xs[i])
        old = state.G[i]
        before = data_energy(out, old, cfg.scan) + prior_energy(out, cfg.prior)
        new = update_G(out, old, cfg.scan)
        after = data_energy(out, new, cfg.scan) + prior_energy(out, cfg.prior)
        return new, before, after

    results = ordered_map(sweep_one, range(len(xs)), cfg.threads)
    state.G = [r[0] for r in results]
    before = [r[1] for r in results]
    after = [r[2] for r in results]
    return SweepRecord(epoch=state.epoch, before=float(sum(before)), after=float(sum(after)),
                       per_sample_before=before, per_sample_after=after)


def has_converged(losses: Sequence[float], tol: float, patience: int) -> bool:
    """
    True when every epoch-to-epoch change over the last `patience` epochs is below tol,
    relative to the latest epoch loss.
    """
    if len(losses) <= patience:
        return False
    window = np.asarray(losses[-1 - patience:], dtype=np.float64)
    scale = max(abs(window[-1]), 1e-12)
    return float(np.max(np.abs(np.diff(window)))) / scale < tol


def _run(unsup: Sequence[Tuple[np.ndarray, PhotonData]], sup: Sequence[Tuple[np.ndarray, np.ndarray]],
         weight: float, mode: str, cfg: TrainConfig, params: Optional[NetworkParams],
         on_epoch_end: Optional[EpochCallback]) -> TrainState:
    if unsup and cfg.scan is None:
        raise ValidationError(f"{mode} training needs a scan config")
    if params is None:
        params = net.init_params(cfg.net, seed=cfg.seed)
    state = TrainState(
        params=params,
        adam=AdamState.fresh(params, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps),
        G=[PhotonData.from_measured(pd_.I) for _, pd_ in unsup],
    )
    xs_unsup = [np.asarray(x, dtype=np.float64) for x, _ in unsup]
    sup = [(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)) for x, y in sup]
    items = [("u", i) for i in range(len(unsup))] + [("s", j) for j in range(len(sup))]
    rng = np.random.default_rng(derive_seed(cfg.seed, SHUFFLE_STREAM))
    n_batches = -(-len(items) // cfg.batch_size)
    unsup_norm = len(unsup) / n_batches
    sup_norm = len(sup) / n_batches

    logger.info("Training %s: %d unlabeled, %d paired, weight %.4g, %d epochs",
                mode, len(unsup), len(sup), weight, cfg.epochs)
    step = 0
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        if unsup and epoch % cfg.g_update_period == 0:
            record = _sweep(state, xs_unsup, cfg)
            state.sweeps.append(record)
            logger.debug("G sweep at epoch %d: %.6g -> %.6g", epoch, record.before, record.after)

        order = rng.permutation(len(items))
        totals = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[k] for k in order[start:start + cfg.batch_size]]
            b_unsup = [(xs_unsup[i], state.G[i]) for kind, i in batch if kind == "u"]
            b_sup = [sup[j] for kind, j in batch if kind == "s"]
            result = batch_gradient(state.params, b_unsup, b_sup, weight, cfg.scan, cfg.prior, cfg.threads,
                                    unsup_norm=unsup_norm, sup_norm=sup_norm)
            state.history.append(StepRecord(epoch=epoch, step=step, mode=mode, data_term=result.data_term,
                                            prior_term=result.prior_term, sup_term=result.sup_term,
                                            total=result.total))
            state.params, state.adam = net.adam_step(state.params, result.grads, state.adam)
            totals.append(result.total)
            step += 1

        state.epoch_losses.append(float(np.mean(totals)))
        logger.debug("Epoch %d: mean total %.6g", epoch, state.epoch_losses[-1])
        if on_epoch_end is not None:
            on_epoch_end(state)
        if has_converged(state.epoch_losses, cfg.early_stop_tol, cfg.patience):
            state.stopped_early = True
            logger.info("Early stop at epoch %d (relative change < %g over %d epochs)",
                        epoch, cfg.early_stop_tol, cfg.patience)
            break
    state.epoch += 1
    return state


def train_supervised(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], cfg: TrainConfig,
                     params: Optional[NetworkParams] = None,
                     on_epoch_end: Optional[EpochCallback] = None) -> TrainState:
    """Minimize the per-ray MSE between f(x) and y over the pairs."""
    if not pairs:
        raise ValidationError("supervised training needs at least one pair")
    _check_pairs(pairs)
    return _run([], pairs, 1.0, "supervised", cfg, params, on_epoch_end)


def train_unsupervised(samples: Sequence[Tuple[np.ndarray, PhotonData]], cfg: TrainConfig,
                       params: Optional[NetworkParams] = None,
                       on_epoch_end: Optional[EpochCallback] = None) -> TrainState:
    """
    Alternate update_G sweeps with Adam steps on the MAP objective.

    Latent counts start from the measured counts, round(max(I, 1)); any G carried by
    the samples is ignored.
    """
    if not samples:
        raise ValidationError("unsupervised training needs at least one sample")
    _check_samples(samples)
    return _run(samples, [], 0.0, "unsupervised", cfg, params, on_epoch_end)


def semi_weight(cfg: TrainConfig, n_unsup: int, n_sup: int) -> float:
    if cfg.lam is not None:
        return float(cfg.lam)
    if n_unsup + n_sup == 0:
        return 0.0
    return n_sup / (n_unsup + n_sup)


def train_semi(sup_pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
               unsup_samples: Sequence[Tuple[np.ndarray, PhotonData]], cfg: TrainConfig,
               params: Optional[NetworkParams] = None,
               on_epoch_end: Optional[EpochCallback] = None) -> TrainState:
    """MAP objective on unsup_samples plus lambda times the MSE on sup_pairs."""
    weight = semi_weight(cfg, len(unsup_samples), len(sup_pairs))
    if not unsup_samples:
        raise ValidationError("semi-supervised training needs unlabeled samples")
    if weight == 0.0:
        if sup_pairs:
            logger.warning("lambda = 0: ignoring %d supervised pairs", len(sup_pairs))
        sup_pairs = []
    elif not sup_pairs:
        raise ValidationError("semi-supervised training with lambda > 0 needs supervised pairs")
    _check_samples(unsup_samples)
    _check_pairs(sup_pairs)
    return _run(unsup_samples, sup_pairs, weight, "semi", cfg, params, on_epoch_end)


def enhance(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    out, _ = net.forward(params, x)
    return out


def timed_enhance(params: NetworkParams, x: np.ndarray, name: str = "") -> Tuple[np.ndarray, float]:
    """Enhance one sinogram and report the wall time in seconds."""
    start = time.perf_counter()
    out = enhance(params, x)
    elapsed = time.perf_counter() - start
    label = name or f"{np.shape(x)[0]}x{np.shape(x)[1]} sinogram"
    logger.info("Enhanced %s in %.4f s", label, elapsed)
    return out, elapsed
