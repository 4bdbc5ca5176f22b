"""SGD training loop with momentum, weight decay, and a step schedule.

The learning rate drops by the configured factor when the iteration
reaches ``round(fraction * max_iters)`` for each drop fraction.  Batches
and per-sample augmentations draw from seed sequences keyed on
``(seed, iteration, slot)``, so a run is a pure function of its config
and dataset: resuming from a checkpoint reproduces the unbroken run
bit for bit.

With ``workers > 1`` the batch is split across threads, each owning a
full parameter clone (samples are independent graphs); gradients merge
in fixed worker order, so parallel runs stay deterministic for a given
config on a given machine.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:  # keeps BLAS pools from oversubscribing cores when workers > 1
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - optional knob
    threadpool_limits = None

from .anchors import assign
from .data import AugmentConfig, Dataset, augment
from .evaluation import EvalResult, average_precision
from .exceptions import CheckpointError, ConfigError, TrainingDiverged
from .inference import InferenceConfig, postprocess
from .losses import LossConfig, multitask_loss
from .model import Detector, load_checkpoint, model_tensors, save_checkpoint

LOSS_LOG_HEADER = "iter,loss,cls,reg,lr"


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 1e-3
    lr_drop_fractions: tuple[float, ...] = (2.0 / 3.0, 5.0 / 6.0)
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    max_iters: int = 2000
    seed: int = 0
    checkpoint_interval: int = 500
    decay_all_params: bool = False  # strict mode: decay norms and biases too
    workers: int = 2  # batch-level thread parallelism (1 = sequential)

    def __post_init__(self):
        if self.lr_initial <= 0:
            raise ConfigError(f"lr_initial must be > 0, got {self.lr_initial}")
        fr = tuple(self.lr_drop_fractions)
        object.__setattr__(self, "lr_drop_fractions", fr)
        if list(fr) != sorted(fr) or any(not 0.0 < f < 1.0 for f in fr):
            raise ConfigError(f"lr_drop_fractions must be ascending in (0,1): {fr}")
        if not 0.0 < self.lr_drop_factor <= 1.0:
            raise ConfigError(f"lr_drop_factor must be in (0,1], got {self.lr_drop_factor}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.max_iters < 1:
            raise ConfigError("batch_size and max_iters must be positive")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0 (0 disables)")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    drops = sum(iteration >= round(f * cfg.max_iters) for f in cfg.lr_drop_fractions)
    return cfg.lr_initial * cfg.lr_drop_factor ** drops


def batch_indices(seed: int, iteration: int, batch_size: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(iteration, 0)))
    return rng.integers(0, n, size=batch_size)


def sample_rng(seed: int, iteration: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(iteration, slot + 1))
    )


@dataclass
class LossRow:
    iteration: int
    loss: float
    cls: float
    reg: float
    lr: float

    def csv(self) -> str:
        return f"{self.iteration},{self.loss:.6f},{self.cls:.6f},{self.reg:.6f},{self.lr:.6g}"


@dataclass
class TrainState:
    iteration: int
    detector: Detector
    momentum: dict[str, np.ndarray]
    loss_history: list[LossRow] = field(default_factory=list)

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        arrays = self.detector.state_arrays()
        for name, buf in self.momentum.items():
            arrays[f"momentum.{name}"] = buf.astype(np.float32, copy=True)
        arrays["trainer.iteration"] = np.array([float(self.iteration)], dtype=np.float32)
        return arrays

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint_arrays())


def load_train_state(path, detector: Detector) -> TrainState:
    """Restore parameters, momentum buffers, and the iteration counter."""
    arrays = load_checkpoint(path)
    detector.load_state_arrays(model_tensors(arrays))
    momentum: dict[str, np.ndarray] = {}
    missing = []
    for name, p in detector.named_parameters().items():
        key = f"momentum.{name}"
        if key in arrays:
            momentum[name] = arrays[key].astype(np.float32).reshape(p.shape)
        else:
            missing.append(key)
    if missing:
        raise CheckpointError(
            "checkpoint lacks momentum buffers for resume: " + ", ".join(sorted(missing)[:4])
        )
    if "trainer.iteration" not in arrays:
        raise CheckpointError("checkpoint lacks trainer.iteration; cannot resume")
    iteration = int(round(float(arrays["trainer.iteration"][0])))
    return TrainState(iteration=iteration, detector=detector, momentum=momentum)


def sgd_step(
    detector: Detector, momentum: dict[str, np.ndarray], lr: float, cfg: TrainConfig
) -> None:
    """v <- m*v - lr*(g + wd*theta); theta <- theta + v."""
    exempt = set() if cfg.decay_all_params else detector.decay_exempt_names()
    for name, p in detector.named_parameters().items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if cfg.weight_decay and name not in exempt:
            grad = grad + np.float32(cfg.weight_decay) * p.data
        v = momentum.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = np.float32(cfg.momentum) * v - np.float32(lr) * grad
        p.data = p.data + v
        momentum[name] = v
        p.grad = None


def _run_samples(
    detector: Detector,
    dataset: Dataset,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    augment_cfg: AugmentConfig,
    iteration: int,
    slots: list[tuple[int, int]],
    inv_batch: float,
) -> dict[int, tuple[float, float, float]]:
    """Forward/backward the given (slot, dataset index) pairs on ``detector``.

    Gradients accumulate on the detector's parameters; per-slot loss terms
    come back for deterministic, slot-ordered reduction.
    """
    results: dict[int, tuple[float, float, float]] = {}
    for slot, di in slots:
        rng = sample_rng(cfg.seed, iteration, slot)
        sample = augment(dataset.scene(di), augment_cfg, rng)
        outputs = detector.forward(sample.image)
        assignment = assign(detector.anchors, sample.boxes, detector.assignment_cfg)
        report = multitask_loss(outputs, assignment, loss_cfg)
        if not math.isfinite(report.value):
            raise TrainingDiverged(iteration, [di for _, di in slots])
        report.total.backward(seed=inv_batch)
        results[slot] = (report.value, report.cls_term, report.reg_term)
    return results


def _clone_detector(detector: Detector) -> Detector:
    clone = Detector(
        backbone_cfg=detector.backbone_cfg,
        fusion_cfg=detector.fusion_cfg,
        head_cfg=detector.head_cfg,
        assignment_cfg=detector.assignment_cfg,
        seed=detector.seed,
    )
    _copy_params_into(clone, detector)
    return clone


def _copy_params_into(dst: Detector, src: Detector) -> None:
    src_params = src.named_parameters()
    for name, p in dst.named_parameters().items():
        np.copyto(p.data, src_params[name].data)
        p.grad = None


def train(
    detector: Detector,
    dataset: Dataset,
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    augment_cfg: AugmentConfig = AugmentConfig(),
    out_dir=None,
    resume: TrainState | None = None,
    log_every: int = 0,
) -> TrainState:
    """Run (or continue) the loop until ``cfg.max_iters``.

    Aborts with a diagnostic on a non-finite loss; the exception carries
    the batch's sample indices so the offending batch can be replayed.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    state = resume or TrainState(iteration=0, detector=detector, momentum={})
    if state.detector is not detector:
        raise ConfigError("resume state belongs to a different detector instance")

    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss_log.csv"
        if state.iteration == 0 or not log_path.exists():
            log_path.write_text(LOSS_LOG_HEADER + "\n")

    n_workers = min(cfg.workers, cfg.batch_size)
    parallel = n_workers > 1
    clones = [_clone_detector(detector) for _ in range(n_workers)] if parallel else []
    pool = ThreadPoolExecutor(max_workers=n_workers) if parallel else None
    limiter = (
        threadpool_limits(limits=1, user_api="blas")
        if parallel and threadpool_limits is not None
        else nullcontext()
    )

    inv_batch = 1.0 / cfg.batch_size
    try:
        with limiter:
            for it in range(state.iteration, cfg.max_iters):
                lr = learning_rate(cfg, it)
                indices = [int(i) for i in batch_indices(cfg.seed, it, cfg.batch_size, len(dataset))]
                detector.zero_grads()

                if parallel:
                    shards = [
                        [(s, di) for s, di in enumerate(indices) if s % n_workers == w]
                        for w in range(n_workers)
                    ]
                    futures = [
                        pool.submit(
                            _run_samples, clones[w], dataset, cfg, loss_cfg,
                            augment_cfg, it, shards[w], inv_batch,
                        )
                        for w in range(n_workers)
                    ]
                    per_slot: dict[int, tuple[float, float, float]] = {}
                    try:
                        for f in futures:
                            per_slot.update(f.result())
                    except TrainingDiverged as err:
                        raise TrainingDiverged(it, indices) from err
                    params = detector.named_parameters()
                    for name, p in params.items():
                        total = np.zeros_like(p.data)
                        for clone in clones:  # fixed order keeps sums deterministic
                            g = clone.named_parameters()[name].grad
                            if g is not None:
                                total += g
                        p.grad = total
                else:
                    per_slot = _run_samples(
                        detector, dataset, cfg, loss_cfg, augment_cfg, it,
                        list(enumerate(indices)), inv_batch,
                    )

                tot = cls = reg = 0.0
                for slot in range(cfg.batch_size):  # slot order, not completion order
                    value, c, r = per_slot[slot]
                    tot += value
                    cls += c
                    reg += r

                sgd_step(detector, state.momentum, lr, cfg)
                if parallel:
                    for clone in clones:
                        _copy_params_into(clone, detector)

                row = LossRow(it, tot * inv_batch, cls * inv_batch, reg * inv_batch, lr)
                state.loss_history.append(row)
                state.iteration = it + 1
                if log_path is not None:
                    with open(log_path, "a") as fh:
                        fh.write(row.csv() + "\n")
                if log_every and (it + 1) % log_every == 0:
                    print(f"iter {it + 1}/{cfg.max_iters} loss {row.loss:.4f} lr {lr:.2g}")
                if (
                    out_dir is not None
                    and cfg.checkpoint_interval
                    and state.iteration % cfg.checkpoint_interval == 0
                ):
                    state.save(out_dir / f"ckpt_{state.iteration:06d}.ckpt")
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    if out_dir is not None:
        state.save(out_dir / "final.ckpt")
    return state


def smoothed_loss(history: list[LossRow], iteration: int, window: int = 50) -> float:
    """Mean loss over the ``window`` rows ending at ``iteration`` (inclusive)."""
    rows = [r.loss for r in history if iteration - window < r.iteration <= iteration]
    if not rows:
        raise ValueError(f"no loss rows in window ending at iteration {iteration}")
    return float(np.mean(rows))


@contextmanager
def inference_mode(detector: Detector):
    """Disable gradient graph construction while evaluating."""
    params = detector.named_parameters()
    flags = {name: p.requires_grad for name, p in params.items()}
    try:
        for p in params.values():
            p.requires_grad = False
        yield
    finally:
        for name, p in params.items():
            p.requires_grad = flags[name]


def evaluate_detector(
    detector: Detector,
    dataset: Dataset,
    inference_cfg: InferenceConfig = InferenceConfig(),
    iou_thresh: float = 0.5,
) -> EvalResult:
    """Post-process every image and score AP at the given IoU threshold."""
    size = float(detector.input_size)
    dets_by, gts_by = {}, {}
    with inference_mode(detector):
        for i in range(len(dataset)):
            outputs = detector.forward(dataset.load_image(i))
            dets_by[i] = postprocess(outputs, detector.anchors, inference_cfg, (size, size))
            gts_by[i] = dataset.boxes(i)
    return average_precision(dets_by, gts_by, iou_thresh)
