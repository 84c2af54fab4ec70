"""Self-supervised training: bidirectional warping loss with an annealed
Gaussian blur, stepped learning rate, and SGD with momentum.

Each sequence is one training sample. The first warmup frames only build
up the recurrent state; from then on every step contributes the sum of
the two reconstruction errors (forward-warped next map against the
current map, backward-warped current map against the next map), and the
sequence loss is the mean over contributing steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParameterError, Tape, Tensor, add, backward, bce_with_logits, bilinear_warp, gaussian_filter, mse, mul
from .model import ModelParams, backbone_forward, forward_step_batch, init_hidden, init_params


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite; names the epoch and batch."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr0: float = 0.01
    epochs: int = 200
    schedule_period: int = 25  # epochs between lr halvings and filter shrinks
    gaussian_f0: int = 9
    gaussian_step: int = 2
    seq_len: int = 20
    warmup_frames: int = 10
    seed: int = 0
    rows: int = 100
    cols: int = 100
    momentum: float = 0.9
    grad_clip: float = 10.0
    precision: str = "double"  # "double" | "single"

    def __post_init__(self):
        if self.warmup_frames >= self.seq_len:
            raise ParameterError("warmup_frames must be smaller than seq_len")
        if self.gaussian_f0 < 1 or self.gaussian_f0 % 2 == 0:
            raise ParameterError("gaussian_f0 must be odd and positive")
        if self.precision not in ("double", "single"):
            raise ParameterError("precision must be 'double' or 'single'")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        # Small grids carry ~10x fewer occupied cells and see far fewer
        # updates than the full protocol, so the mean-squared gradient needs
        # a proportionally larger step.
        base = dict(
            batch_size=4,
            lr0=0.3,
            epochs=50,
            schedule_period=6,
            rows=32,
            cols=32,
            precision="single",
        )
        base.update(overrides)
        return cls(**base)

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * 2.0 ** (-(epoch // self.schedule_period))

    def filter_size_at(self, epoch: int) -> int:
        return max(1, self.gaussian_f0 - self.gaussian_step * (epoch // self.schedule_period))


@dataclass
class EpochStats:
    epoch: int
    loss: float
    lr: float
    filter_size: int
    seconds: float


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (epoch, f1)

    def to_csv(self, path) -> None:
        lines = ["epoch,loss,lr,f,seconds"]
        lines += [
            f"{r.epoch},{r.loss:.10g},{r.lr:.10g},{r.filter_size},{r.seconds:.3f}" for r in self.rows
        ]
        if self.evals:
            lines.append("# eval: epoch,f1")
            lines += [f"# {e},{f1:.6f}" for e, f1 in self.evals]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def schedule_preview(config: TrainConfig) -> list[tuple[int, float, int]]:
    """(epoch, lr, filter size) for every epoch, without touching any data."""
    return [(e, config.lr_at(e), config.filter_size_at(e)) for e in range(config.epochs)]


# ---------------------------------------------------------------------------
# loss


def _step_loss(occ_t: Tensor, occ_t1: Tensor, prediction, f: int) -> Tensor:
    fwd = mse(occ_t, bilinear_warp(gaussian_filter(occ_t1, f), prediction.forward))
    bwd = mse(occ_t1, bilinear_warp(gaussian_filter(occ_t, f), prediction.backward))
    return add(fwd, bwd)


def sequence_loss_batched(
    occ: np.ndarray, vis: np.ndarray, params: ModelParams, f: int, warmup_frames: int
) -> Tensor:
    """Mean supervised-step loss over a (B, T, H, W) stack of sequences."""
    b, t_len, rows, cols = occ.shape
    if t_len < warmup_frames + 2:
        raise ParameterError(f"sequence of {t_len} frames is too short to supervise")
    dtype = params.conv0_w.dtype
    hidden = init_hidden(rows, cols, batch=b, channels=params.hidden_channels, dtype=dtype)
    terms = []
    for t in range(t_len):
        x = Tensor(np.stack((occ[:, t], vis[:, t]), axis=1).astype(dtype), dtype=dtype)
        prediction, hidden = forward_step_batch(x, hidden, params)
        if warmup_frames <= t <= t_len - 2:
            occ_t = Tensor(occ[:, t : t + 1].astype(dtype), dtype=dtype)
            occ_t1 = Tensor(occ[:, t + 1 : t + 2].astype(dtype), dtype=dtype)
            terms.append(_step_loss(occ_t, occ_t1, prediction, f))
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return mul(total, 1.0 / len(terms))


def sequence_loss(frames: list, params: ModelParams, f: int, warmup_frames: int = 10) -> Tensor:
    """Spec entry point on one sequence of GridPairs; returns the scalar node."""
    occ = np.stack([fr.occupancy for fr in frames])[None]
    vis = np.stack([fr.visibility for fr in frames])[None]
    return sequence_loss_batched(occ, vis, params, f, warmup_frames)


# ---------------------------------------------------------------------------
# optimization


def _global_grad_norm(params: ModelParams) -> float:
    total = 0.0
    for _, t in params.named_parameters():
        total += float((t.grad * t.grad).sum())
    return float(np.sqrt(total))


def _sgd_step(params: ModelParams, velocity: dict, lr: float, momentum: float, clip: float) -> None:
    scale = 1.0
    if clip > 0:
        norm = _global_grad_norm(params)
        if norm > clip:
            scale = clip / norm
    for name, t in params.named_parameters():
        v = velocity[name]
        v *= momentum
        v += scale * t.grad
        t.data -= lr * v


def _dataset_arrays(dataset: list, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    occ = np.stack([[fr.occupancy for fr in s.frames] for s in dataset]).astype(config.dtype)
    vis = np.stack([[fr.visibility for fr in s.frames] for s in dataset]).astype(config.dtype)
    return occ, vis


def _run_training(
    dataset: list,
    config: TrainConfig,
    loss_of_batch,
    params: ModelParams,
    val_metric=None,
    eval_every: int = 0,
    epoch_hook=None,
) -> TrainLog:
    if not dataset:
        raise ParameterError("dataset is empty")
    for s in dataset:
        if len(s.frames) != config.seq_len:
            raise ParameterError(f"sequence of {len(s.frames)} frames, config wants {config.seq_len}")
    occ, vis = _dataset_arrays(dataset, config)
    n = occ.shape[0]
    rng = np.random.default_rng(config.seed)
    velocity = {name: np.zeros_like(t.data) for name, t in params.named_parameters()}
    log = TrainLog()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        f = config.filter_size_at(epoch)
        order = rng.permutation(n)
        loss_sum, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            for _, t in params.named_parameters():
                t.zero_grad()
            with Tape() as tape:
                loss = loss_of_batch(occ[batch], vis[batch], params, f)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, batch {start // config.batch_size}"
                )
            backward(loss, tape)
            _sgd_step(params, velocity, lr, config.momentum, config.grad_clip)
            loss_sum += value * len(batch)
            seen += len(batch)
        log.rows.append(EpochStats(epoch, loss_sum / seen, lr, f, time.perf_counter() - t0))
        if val_metric is not None and eval_every > 0 and (
            epoch % eval_every == eval_every - 1 or epoch == config.epochs - 1
        ):
            log.evals.append((epoch, float(val_metric(params))))
        if epoch_hook is not None:
            epoch_hook(epoch, params)
    return log


def train(
    dataset: list,
    config: TrainConfig,
    params: ModelParams | None = None,
    val_metric=None,
    eval_every: int = 0,
    epoch_hook=None,
) -> tuple[ModelParams, TrainLog]:
    """Fit the flow model; deterministic for a fixed config and dataset."""
    if params is None:
        params = init_params(config.seed, kind="flow", dtype=config.dtype)

    def loss_of_batch(occ_b, vis_b, p, f):
        return sequence_loss_batched(occ_b, vis_b, p, f, config.warmup_frames)

    log = _run_training(dataset, config, loss_of_batch, params, val_metric, eval_every, epoch_hook)
    return params, log


def train_direct(
    dataset: list,
    config: TrainConfig,
    params: ModelParams | None = None,
    val_metric=None,
    eval_every: int = 0,
    epoch_hook=None,
) -> tuple[ModelParams, TrainLog]:
    """Fit the direct occupancy head (cross entropy against the next map)."""
    if params is None:
        params = init_params(config.seed, kind="direct", dtype=config.dtype)

    def loss_of_batch(occ_b, vis_b, p, f):
        dtype = p.conv0_w.dtype
        b, t_len = occ_b.shape[:2]
        hidden = init_hidden(occ_b.shape[2], occ_b.shape[3], batch=b, channels=p.hidden_channels, dtype=dtype)
        terms = []
        for t in range(t_len):
            x = Tensor(np.stack((occ_b[:, t], vis_b[:, t]), axis=1).astype(dtype), dtype=dtype)
            logits, hidden = backbone_forward(x, hidden, p)
            if config.warmup_frames <= t <= t_len - 2:
                target = Tensor(occ_b[:, t + 1 : t + 2].astype(dtype), dtype=dtype)
                terms.append(bce_with_logits(logits, target))
        total = terms[0]
        for term in terms[1:]:
            total = add(total, term)
        return mul(total, 1.0 / len(terms))

    log = _run_training(dataset, config, loss_of_batch, params, val_metric, eval_every, epoch_hook)
    return params, log


# ---------------------------------------------------------------------------
# gradient-support probe


def gradient_support_demo(
    f: int, i: int = 3, j: int = 7, length: int | None = None, flow_values=None
) -> tuple[np.ndarray, np.ndarray]:
    """Loss gradient at the occupied cell of a 1-D toy, per trial flow value.

    The current map has a single occupied cell at i, the next map one at j.
    For each trial value b the whole forward-flow field is set to b and the
    gradient of MSE(current, warp(blur(next, f), flow)) with respect to the
    flow at cell i is recorded. With f = 1 the gradient is nonzero exactly
    for b in (j-i-1, j-i+1) (zero at b = j-i where the maps align); blurring
    widens that support.
    """
    if length is None:
        length = j + (f + 1) // 2 + 3
    if not (0 <= i < length and 0 <= j < length):
        raise ParameterError("occupied cells must lie inside the toy map")
    if flow_values is None:
        flow_values = np.linspace(0.0, 2.0 * (j - i), 8 * (j - i) + 1)
    flow_values = np.asarray(flow_values, dtype=np.float64)

    current = np.zeros((1, 1, 1, length))
    current[0, 0, 0, i] = 1.0
    nxt = np.zeros((1, 1, 1, length))
    nxt[0, 0, 0, j] = 1.0
    target = Tensor(current)
    source = Tensor(nxt)

    grads = np.empty_like(flow_values)
    for idx, b in enumerate(flow_values):
        flow_data = np.zeros((1, 2, 1, length))
        flow_data[0, 0] = b
        flow = Tensor(flow_data, requires_grad=True)
        with Tape() as tape:
            loss = mse(target, bilinear_warp(gaussian_filter(source, f), flow))
        backward(loss, tape)
        grads[idx] = flow.grad[0, 0, 0, i]
    return flow_values, grads
