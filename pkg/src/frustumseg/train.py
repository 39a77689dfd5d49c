"""Random-reference-point training loop.

Each iteration samples a scene and a projection reference point, builds
the nested window patches, applies synchronized flips, and takes one
decoupled-weight-decay adaptive step.  All randomness flows from a single
seeded PCG64 stream in a fixed draw order (scene, prp-x, prp-y, flip-h,
flip-v per sample), so single-worker runs are bitwise reproducible and
prefetch workers cannot change the sequence.
"""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import raster
from .geometry import FrustumConfig, ProjectionReferencePoint, frustum_windows
from .loss import LossWeights, total_loss
from .model import ModelConfig, ModelParams, backward, forward, save_checkpoint

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LOG_HEADER = ("iter", "dice", "ce_main", "ce_aux", "total", "lr")


@dataclass
class TrainConfig:
    manifest: str
    out_dir: str
    iterations: int
    frustum: FrustumConfig
    model: ModelConfig
    batch_size: int = 1
    learning_rate: float = 6e-5
    warmup_iterations: int = 1500
    weight_decay: float = 0.01
    weights: LossWeights = field(default_factory=lambda: LossWeights(5.0, 1.0, 1.0))
    seed: int = 0
    checkpoint_every: int = 500
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.warmup_iterations > self.iterations:
            raise ValueError("warmup cannot exceed the iteration count")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.workers < 1:
            raise ValueError("batch size and workers must be >= 1")


class OptimizerState:
    """First/second moment accumulators mirroring the parameter tensors."""

    def __init__(self, params: ModelParams):
        self.m = {k: np.zeros_like(v) for k, v in params.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.values.items()}
        self.step = 0


def sample_prp(rng: np.random.Generator, image_dims: tuple[int, int]) -> ProjectionReferencePoint:
    """Uniform over the closed image plane [0, W] x [0, H]."""
    w, h = image_dims
    return ProjectionReferencePoint(w=rng.uniform(0.0, w), h=rng.uniform(0.0, h))


def build_sample(image, labels, prp, frustum: FrustumConfig):
    """Patches for every window plus the label patch of the local window."""
    windows = frustum_windows(prp, frustum, image.dims)
    patches = [raster.extract_resample(image, win, frustum.unified_size).data for win in windows]
    label_patch = raster.extract_labels(labels, windows[0], frustum.unified_size)
    return patches, label_patch


def apply_flips(patches, label_patch, flip_h: bool, flip_v: bool):
    """Flip all patches and the label patch together (views, no copies)."""
    axes = []
    if flip_v:
        axes.append(0)
    if flip_h:
        axes.append(1)
    if not axes:
        return patches, label_patch
    flipped = [np.flip(p, axis=axes) for p in patches]
    labels = raster.LabelMap(
        data=np.ascontiguousarray(np.flip(label_patch.data, axis=axes)),
        class_count=label_patch.class_count,
    )
    return flipped, labels


def augment(patches, label_patch, rng: np.random.Generator):
    """One Bernoulli(0.5) draw per axis, applied to every scale at once."""
    flip_h = rng.random() < 0.5
    flip_v = rng.random() < 0.5
    return apply_flips(patches, label_patch, flip_h, flip_v)


def lr_schedule(step: int, base_lr: float, warmup: int) -> float:
    """Linear ramp to base_lr over the first `warmup` steps, then constant."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if warmup <= 0 or step >= warmup:
        return base_lr
    return base_lr * step / warmup


def optimizer_step(
    params: ModelParams,
    state: OptimizerState,
    lr: float,
    weight_decay: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """Adam moments with decoupled weight decay applied to the parameters."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, theta in params.values.items():
        grad = params.grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        theta -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * theta)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    rows: list[tuple]
    params: ModelParams


def _load_split(manifest_path: str, split: str, n_classes: int):
    entries = [e for e in raster.load_manifest(manifest_path) if e.split == split]
    if not entries:
        raise ValueError(f"manifest {manifest_path} has no '{split}' entries")
    return [
        (raster.load_raster(e.image_path), raster.load_labels(e.label_path, n_classes))
        for e in entries
    ]


def write_loss_log(rows, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_HEADER)
        writer.writerows(rows)


def train_loop(config: TrainConfig) -> TrainResult:
    """Run the full training schedule; deterministic for a fixed seed."""
    scenes = _load_split(config.manifest, "train", config.model.n_classes)
    os.makedirs(config.out_dir, exist_ok=True)

    seq = np.random.SeedSequence(config.seed)
    init_seed, data_seed = seq.spawn(2)
    params = ModelParams.initialize(config.model, np.random.default_rng(init_seed).integers(2**62))
    rng = np.random.default_rng(data_seed)

    state = OptimizerState(params)
    rows = []
    n_batch = config.batch_size

    def draw_one():
        idx = int(rng.integers(len(scenes)))
        image, labels = scenes[idx]
        prp = sample_prp(rng, image.dims)
        flip_h = rng.random() < 0.5
        flip_v = rng.random() < 0.5
        return image, labels, prp, flip_h, flip_v

    def build_one(drawn):
        image, labels, prp, flip_h, flip_v = drawn
        patches, label_patch = build_sample(image, labels, prp, config.frustum)
        return apply_flips(patches, label_patch, flip_h, flip_v)

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        pending = []
        total_samples = config.iterations * n_batch
        lookahead = config.workers if pool else 1

        def submit():
            drawn = draw_one()
            pending.append(pool.submit(build_one, drawn) if pool else drawn)

        produced = 0
        for _ in range(min(lookahead, total_samples)):
            submit()
            produced += 1

        for it in range(1, config.iterations + 1):
            lr = lr_schedule(it, config.learning_rate, config.warmup_iterations)
            params.zero_grads()
            sums = np.zeros(4)
            for _ in range(n_batch):
                item = pending.pop(0)
                patches, label_patch = item.result() if pool else build_one(item)
                if produced < total_samples:
                    submit()
                    produced += 1
                res = forward(patches, params, want_cache=True)
                lt = total_loss(res.main_logits, res.aux_logits, label_patch, config.weights)
                backward(lt.grad_main / n_batch, lt.grad_aux / n_batch, res.cache, params)
                sums += (lt.dice, lt.ce_main, lt.ce_aux, lt.total)
            optimizer_step(params, state, lr, config.weight_decay)
            d, cm, ca, tot = sums / n_batch
            rows.append((it, d, cm, ca, tot, lr))
            if config.checkpoint_every and it % config.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(config.out_dir, f"checkpoint_{it:06d}.ckpt"),
                    params, config.frustum,
                )
    finally:
        if pool:
            pool.shutdown(wait=False, cancel_futures=True)

    log_path = os.path.join(config.out_dir, "loss_log.csv")
    write_loss_log(rows, log_path)
    checkpoint_path = os.path.join(config.out_dir, "checkpoint_final.ckpt")
    save_checkpoint(checkpoint_path, params, config.frustum)
    return TrainResult(checkpoint_path, log_path, rows, params)
