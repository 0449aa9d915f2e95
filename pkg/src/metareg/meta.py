"""The four registration regimes: Reptile meta-training, conventional training,
classical single-pair optimization, and few-shot test-time optimization."""

from dataclasses import dataclass, field

import numpy as np

from .core import ParamVector, Tape, constant
from .losses import LossWeights, total_loss_node
from .models import DirectDdfModel, RegNet, RegNetConfig, init_regnet
from .optim import AdamState, LinearDecay, adam_step, sgd_step
from .transforms import AffineRanges, DisplacementField, apply_affine, sample_affine
from .volume import Volume


class EpisodeDiverged(RuntimeError):
    def __init__(self, step):
        super().__init__(f"non-finite loss at inner step {step}")
        self.step = step


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpisodeConfig:
    """Inner-loop settings: k mini-batches of independently augmented pair variants."""

    k: int = 10
    inner_batch: int = 4
    inner_lr: float = 1e-5
    augment: AffineRanges | None = field(default_factory=AffineRanges)
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.k < 0 or self.inner_batch < 1:
            raise ValueError("k must be >= 0 and inner_batch >= 1")


@dataclass
class MetaConfig:
    total_inner_iterations: int = 3000
    beta_schedule: LinearDecay = field(default_factory=LinearDecay)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    arch: RegNetConfig = field(default_factory=RegNetConfig)
    seed: int = 0

    def __post_init__(self):
        if self.episode.k and self.total_inner_iterations % self.episode.k != 0:
            raise ValueError("total_inner_iterations must be divisible by episode.k")


@dataclass
class TtoConfig:
    updates: int = 5
    batch: int = 1
    lr: float = 1e-5
    augment_enabled: bool = False
    augment: AffineRanges = field(default_factory=AffineRanges)
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.updates < 0:
            raise ValueError("updates must be >= 0")


def _pair_volumes(pair):
    if hasattr(pair, "moving") and hasattr(pair, "fixed"):
        mov, fix = pair.moving, pair.fixed
        mov = mov.image if hasattr(mov, "image") else mov
        fix = fix.image if hasattr(fix, "image") else fix
        return mov, fix
    mov, fix = pair
    return mov, fix


def batch_loss_and_grad(net: RegNet, params: ParamVector, items, weights: LossWeights):
    """Mean loss and mean parameter gradient over a list of (moving, fixed) grids."""
    total = 0.0
    grads = None
    for mov_grid, fix_grid in items:
        tape = Tape()
        ddf, leaves = net.forward(params, mov_grid, fix_grid, tape)
        loss = total_loss_node(
            constant(mov_grid, tape), constant(fix_grid, tape), ddf, weights
        )
        tape.backward(loss)
        total += float(loss.data)
        g = net.gather_grads(leaves)
        if grads is None:
            grads = g
        else:
            grads.values += g.values
    n = np.float32(len(items))
    grads.values /= n
    return total / float(n), grads


def _augmented_items(mov: Volume, fix: Volume, ranges, count, rng):
    if ranges is None:
        return [(mov.grid, fix.grid)] * count
    items = []
    for _ in range(count):
        m = apply_affine(mov, sample_affine(rng, ranges))
        f = apply_affine(fix, sample_affine(rng, ranges))
        items.append((m.grid, f.grid))
    return items


def run_episode(net: RegNet, pair, cfg: EpisodeConfig, rng):
    """One inner-loop episode: adapt a copy of the network to a single pair.

    theta starts as a copy of the current meta-parameters with fresh Adam
    state; the meta-parameters themselves are never touched. Returns the
    adapted parameters and the mean mini-batch loss over the episode.
    """
    mov, fix = _pair_volumes(pair)
    theta = net.params.copy()
    state = AdamState.init(theta, lr=cfg.inner_lr)
    losses = []
    for step in range(cfg.k):
        items = _augmented_items(mov, fix, cfg.augment, cfg.inner_batch, rng)
        loss, grads = batch_loss_and_grad(net, theta, items, cfg.loss_weights)
        if not np.isfinite(loss):
            raise EpisodeDiverged(step)
        losses.append(loss)
        theta = adam_step(state, theta, grads)
    return theta, (float(np.mean(losses)) if losses else float("nan"))


def reptile_update(omega: ParamVector, theta_end: ParamVector, beta: float) -> ParamVector:
    """Move meta-parameters toward the post-episode parameters: w + beta*(theta - w).

    Computed as (1-beta)*w + beta*theta so the beta=0 and beta=1 endpoints
    reproduce w and theta exactly in float32.
    """
    omega.check_layout(theta_end)
    b = np.float32(beta)
    return ParamVector(
        (np.float32(1.0) - b) * omega.values + b * theta_end.values,
        omega.layout,
    )


def meta_train(pairs, cfg: MetaConfig, net: RegNet = None):
    """Reptile meta-training over image-pair tasks.

    Each episode samples one training pair, adapts a copy of the network to
    it, and interpolates the meta-parameters toward the result with the
    decaying meta rate. Returns the trained network and the per-episode log.
    """
    if not pairs:
        raise ValueError("meta_train needs at least one training pair")
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = init_regnet(cfg.arch, rng)
    k = cfg.episode.k
    n_episodes = cfg.total_inner_iterations // k if k else 0
    log = []
    consecutive_aborts = 0
    for e in range(n_episodes):
        pair_id = int(rng.integers(len(pairs)))
        beta = cfg.beta_schedule.value(e * k)
        try:
            theta_end, mean_loss = run_episode(net, pairs[pair_id], cfg.episode, rng)
        except EpisodeDiverged as exc:
            consecutive_aborts += 1
            if consecutive_aborts > 3:
                raise TrainingDiverged(
                    f"{consecutive_aborts} consecutive aborted episodes (last: {exc})"
                ) from exc
            continue
        consecutive_aborts = 0
        net.params = reptile_update(net.params, theta_end, beta)
        log.append(
            {
                "episode": e,
                "cumulative_step": (e + 1) * k,
                "pair_id": pair_id,
                "beta": beta,
                "mean_episode_loss": mean_loss,
            }
        )
    return net, log


def train_conventional(
    pairs,
    iterations: int,
    batch: int = 4,
    lr: float = 1e-5,
    weights: LossWeights = None,
    augment: AffineRanges | None = None,
    arch: RegNetConfig = None,
    seed: int = 0,
    net: RegNet = None,
):
    """Plain population training: Adam on the batch-mean loss over sampled pairs."""
    if not pairs:
        raise ValueError("train_conventional needs at least one training pair")
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)
    if net is None:
        net = init_regnet(arch or RegNetConfig(), rng)
    state = AdamState.init(net.params, lr=lr)
    losses = []
    for it in range(iterations):
        items = []
        for _ in range(batch):
            mov, fix = _pair_volumes(pairs[int(rng.integers(len(pairs)))])
            items.extend(_augmented_items(mov, fix, augment, 1, rng))
        loss, grads = batch_loss_and_grad(net, net.params, items, weights)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        losses.append(loss)
        net.params = adam_step(state, net.params, grads)
    return net, losses


@dataclass
class ClassicalResult:
    ddf: DisplacementField
    trace: list  # loss before each iteration, plus the final loss


def classical_register(
    pair, iterations: int = 3000, lr: float = 0.01, weights: LossWeights = None
) -> ClassicalResult:
    """Single-pair optimization: SGD directly on a zero-initialized dense DDF."""
    mov, fix = _pair_volumes(pair)
    if mov.shape != fix.shape:
        raise ValueError("moving and fixed grids must match")
    weights = weights or LossWeights()
    model = DirectDdfModel(mov.shape)
    params = model.params.copy()
    trace = []

    def loss_and_grad(p):
        tape = Tape()
        ddf = model.forward(p, tape)
        loss = total_loss_node(
            constant(mov.grid, tape), constant(fix.grid, tape), ddf, weights
        )
        tape.backward(loss)
        g = ParamVector(
            (ddf.grad if ddf.grad is not None else np.zeros_like(ddf.data)).reshape(-1),
            p.layout,
        )
        return float(loss.data), g

    for it in range(iterations):
        loss, grads = loss_and_grad(params)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        trace.append(loss)
        params = sgd_step(params, grads, lr)

    final_loss, _ = loss_and_grad(params)
    trace.append(final_loss)
    ddf = DisplacementField(params.segment("ddf").copy())
    return ClassicalResult(ddf, trace)


@dataclass
class TtoResult:
    net: RegNet
    ddf: DisplacementField
    losses: list
    diverged: bool = False


def test_time_optimize(net: RegNet, pair, cfg: TtoConfig, seed: int = 0) -> TtoResult:
    """Few-shot adaptation: a handful of Adam updates on one unseen pair.

    Starts from a copy of the trained parameters with fresh optimizer state.
    On a non-finite loss the last finite parameters are kept and flagged.
    """
    mov, fix = _pair_volumes(pair)
    rng = np.random.default_rng(seed)
    params = net.params.copy()
    state = AdamState.init(params, lr=cfg.lr)
    losses = []
    diverged = False
    ranges = cfg.augment if cfg.augment_enabled else None
    for _ in range(cfg.updates):
        items = _augmented_items(mov, fix, ranges, cfg.batch, rng)
        loss, grads = batch_loss_and_grad(net, params, items, cfg.loss_weights)
        if not np.isfinite(loss):
            diverged = True
            break
        losses.append(loss)
        params = adam_step(state, params, grads)
    adapted = RegNet(net.config, params)
    ddf = DisplacementField(adapted.predict_ddf(mov.grid, fix.grid))
    return TtoResult(adapted, ddf, losses, diverged)
