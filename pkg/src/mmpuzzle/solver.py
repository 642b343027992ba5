"""Puzzle-solver network and its training loop.

Each patch passes independently through a shared conv encoder that emits an
N-vector of position scores; stacking the N patch vectors gives an NxN score
matrix that the Sinkhorn layer relaxes into a soft permutation S. The
training loss is the mean squared error between the ground-truth ordered
patch stack and the soft reconstruction S^T P, plus an L2 weight penalty.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import DataError, DimensionError, TrainingDivergedError
from .optim import AdamState, adam_step
from .permute import Permutation, apply_soft, hard_decode, sinkhorn, sinkhorn_op
from .puzzle import Puzzle, ordered_patch_stack, trilinear_resize
from .rng import Rng

__all__ = [
    "SolverArch",
    "SolverParams",
    "TrainSettings",
    "TrainReport",
    "PreparedPuzzles",
    "init_params",
    "forward",
    "puzzle_loss",
    "prepare_puzzles",
    "train_epoch",
    "train",
    "evaluate",
]


@dataclass(frozen=True)
class SolverArch:
    """Encoder shape: conv channels/strides, then a dense layer of width n_out."""

    n_out: int
    channels: tuple[int, ...] = (16, 32, 32, 64, 64)
    strides: tuple[int, ...] = (1, 2, 1, 2, 1)
    kernel: int = 3
    padding: int = 1
    input_side: int = 16
    in_channels: int = 1

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise DataError("channels and strides must have equal length")
        side = self.input_side
        for s in self.strides:
            side = ops.conv_out_extent(side, self.kernel, s, self.padding)
            if side < 1:
                raise DataError(
                    f"encoder reduces {self.input_side}px input below 1px; "
                    f"use fewer strides or a larger input_side"
                )

    def param_order(self) -> list[str]:
        names = []
        for i in range(1, len(self.channels) + 1):
            names += [f"conv{i}_w", f"conv{i}_b"]
        names += ["dense_w", "dense_b"]
        return names

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        prev = self.in_channels
        for i, c in enumerate(self.channels, 1):
            shapes[f"conv{i}_w"] = (c, prev, self.kernel, self.kernel)
            shapes[f"conv{i}_b"] = (c,)
            prev = c
        shapes["dense_w"] = (self.n_out, prev)
        shapes["dense_b"] = (self.n_out,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "n_out": self.n_out,
            "channels": list(self.channels),
            "strides": list(self.strides),
            "kernel": self.kernel,
            "padding": self.padding,
            "input_side": self.input_side,
            "in_channels": self.in_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "SolverArch":
        return SolverArch(
            n_out=int(d["n_out"]),
            channels=tuple(int(c) for c in d["channels"]),
            strides=tuple(int(s) for s in d["strides"]),
            kernel=int(d["kernel"]),
            padding=int(d["padding"]),
            input_side=int(d["input_side"]),
            in_channels=int(d["in_channels"]),
        )


@dataclass
class SolverParams:
    arch: SolverArch
    params: dict[str, np.ndarray]

    def copy(self) -> "SolverParams":
        return SolverParams(self.arch, {k: v.copy() for k, v in self.params.items()})


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 0.001
    l2_lambda: float = 0.1
    batch_size: int = 32
    sinkhorn_iterations: int = 20
    eval_iterations: int = 50
    temperature: float = 1.0
    epochs: int = 500


@dataclass
class TrainReport:
    seed: int
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def rows(self):
        return list(zip(self.epochs, self.losses, self.accuracies, self.seconds))


def init_params(
    arch: SolverArch, rng: Rng, mean: float = 0.1, std: float = 0.001
) -> SolverParams:
    """Gaussian weights N(mean, std^2), zero biases."""
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = rng.normal(mean, std, size=shape) if std > 0 else np.full(
                shape, mean, dtype=np.float32
            )
    return params_wrap(arch, params)


def params_wrap(arch: SolverArch, params: dict) -> SolverParams:
    shapes = arch.param_shapes()
    for name, shape in shapes.items():
        if name not in params or tuple(params[name].shape) != shape:
            raise DimensionError(f"parameter '{name}' missing or misshaped")
    return SolverParams(arch, params)


def encoder_scores(pvars: dict, arch: SolverArch, x) -> ops.Var:
    """Shared encoder: (B, C_in, side, side) -> (B, n_out) score vectors."""
    h = x
    for i, stride in enumerate(arch.strides, 1):
        h = ops.relu(
            ops.conv2d(
                h,
                pvars[f"conv{i}_w"],
                pvars[f"conv{i}_b"],
                stride=stride,
                padding=arch.padding,
            )
        )
    h = ops.vmean(h, axis=(2, 3))  # global average pool
    return ops.dense(h, pvars["dense_w"], pvars["dense_b"])


@dataclass
class PreparedPuzzles:
    """Dataset tensors precomputed once for training/evaluation."""

    resized: np.ndarray      # (K, N, side, side) encoder inputs
    shuffled_flat: np.ndarray  # (K, N, l*l) puzzle patches, flattened
    ordered_flat: np.ndarray   # (K, N, l*l) ground-truth ordered stacks
    truths: np.ndarray         # (K, N) destination indices
    n: int
    patch_len: int

    @property
    def count(self) -> int:
        return self.resized.shape[0]

    def subset(self, idx) -> "PreparedPuzzles":
        idx = np.asarray(idx)
        return PreparedPuzzles(
            self.resized[idx],
            self.shuffled_flat[idx],
            self.ordered_flat[idx],
            self.truths[idx],
            self.n,
            self.patch_len,
        )


def _resize_stack(stack: np.ndarray, side: int) -> np.ndarray:
    """Bilinear-resize a (K, l, l) patch stack to (K, side, side)."""
    if stack.shape[1] == side and stack.shape[2] == side:
        return stack.astype(np.float32)
    return trilinear_resize(stack, (stack.shape[0], side, side))


def prepare_puzzles(puzzles: list[Puzzle], arch: SolverArch) -> PreparedPuzzles:
    if not puzzles:
        raise DataError("no puzzles to prepare")
    n = puzzles[0].patch_count
    if n != arch.n_out:
        raise DimensionError(
            f"puzzles have {n} patches but encoder emits {arch.n_out} scores"
        )
    l = puzzles[0].patches.shape[1]
    k = len(puzzles)
    patches = np.stack([p.patches for p in puzzles])  # (K, N, l, l)
    ordered = np.stack([ordered_patch_stack(p) for p in puzzles])
    truths = np.stack([p.truth.mapping for p in puzzles])
    resized = _resize_stack(
        patches.reshape(k * n, l, l), arch.input_side
    ).reshape(k, n, arch.input_side, arch.input_side)
    return PreparedPuzzles(
        resized=resized,
        shuffled_flat=patches.reshape(k, n, l * l),
        ordered_flat=ordered.reshape(k, n, l * l),
        truths=truths,
        n=n,
        patch_len=l,
    )


def _batch_graph(pvars, arch, prep: PreparedPuzzles, idx, iterations, temperature):
    """Score -> sinkhorn -> soft reconstruction -> mean pixel MSE."""
    b = len(idx)
    n = prep.n
    x = ops.constant(
        prep.resized[idx].reshape(b * n, 1, arch.input_side, arch.input_side)
    )
    scores = encoder_scores(pvars, arch, x)  # (b*n, n), row i = patch i
    scores = ops.reshape(scores, (b, n, n))
    s = sinkhorn_op(scores, iterations, temperature)
    recon = ops.matmul(
        ops.transpose_last2(s), ops.constant(prep.shuffled_flat[idx])
    )
    diff = ops.sub(recon, ops.constant(prep.ordered_flat[idx]))
    mse = ops.vmean(ops.mul(diff, diff))
    return mse, s


def _weight_penalty(pvars) -> ops.Var:
    total = None
    for name, v in pvars.items():
        if not name.endswith("_w"):
            continue
        sq = ops.vsum(ops.mul(v, v))
        total = sq if total is None else ops.add(total, sq)
    return total


def forward(
    solver: SolverParams,
    puzzle: Puzzle,
    sinkhorn_iters: int = 50,
    temperature: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Soft permutation and reconstructed patch stack for one puzzle."""
    if puzzle.patch_count != solver.arch.n_out:
        raise DimensionError(
            f"puzzle has {puzzle.patch_count} patches, encoder emits "
            f"{solver.arch.n_out}"
        )
    prep = prepare_puzzles([puzzle], solver.arch)
    pvars = {k: ops.constant(v) for k, v in solver.params.items()}
    x = ops.constant(
        prep.resized.reshape(prep.n, 1, solver.arch.input_side, solver.arch.input_side)
    )
    scores = encoder_scores(pvars, solver.arch, x).value
    s = sinkhorn(scores, sinkhorn_iters, temperature)
    recon = apply_soft(s, puzzle.patches)
    return s, recon


def puzzle_loss(recon: np.ndarray, truth_stack: np.ndarray) -> float:
    """Mean squared error over all pixels of all patches."""
    recon = np.asarray(recon)
    truth_stack = np.asarray(truth_stack)
    if recon.shape != truth_stack.shape:
        raise DimensionError("reconstruction and truth stacks differ in shape")
    d = (recon.astype(np.float64) - truth_stack.astype(np.float64)) ** 2
    return float(d.mean())


def train_epoch(
    solver: SolverParams,
    prep: PreparedPuzzles,
    state: AdamState,
    settings: TrainSettings,
    rng: Rng,
    epoch: int = 0,
) -> tuple[SolverParams, AdamState, float]:
    """One pass over the dataset in shuffled mini-batches; returns mean loss."""
    if prep.count == 0:
        raise DataError("empty training set")
    order = rng.shuffled_indices(prep.count)
    params = solver.params
    losses = []
    for start in range(0, prep.count, settings.batch_size):
        idx = order[start : start + settings.batch_size]
        pvars = {k: ops.param(v) for k, v in params.items()}
        mse, _ = _batch_graph(
            pvars, solver.arch, prep, idx,
            settings.sinkhorn_iterations, settings.temperature,
        )
        loss = ops.add(mse, ops.scale(_weight_penalty(pvars), settings.l2_lambda))
        mse_val = float(mse.value)
        if not np.isfinite(mse_val):
            raise TrainingDivergedError(
                f"non-finite puzzle loss at epoch {epoch}, batch {start // settings.batch_size}",
                epoch=epoch,
                batch=start // settings.batch_size,
                loss_trace=losses[-10:],
            )
        losses.append(mse_val)
        ops.backward(loss)
        grads = {k: v.grad for k, v in pvars.items() if v.grad is not None}
        params, state = adam_step(params, grads, state, lr=settings.lr)
    return SolverParams(solver.arch, params), state, float(np.mean(losses))


def evaluate(
    solver: SolverParams, prep: PreparedPuzzles, settings: TrainSettings
) -> tuple[float, float]:
    """(placement accuracy, mean puzzle loss) on a dataset; pure."""
    if prep.count == 0:
        return 0.0, 0.0
    arch = solver.arch
    pvars = {k: ops.constant(v) for k, v in solver.params.items()}
    accs, losses = [], []
    bs = 256 // max(prep.n, 1) + 1
    for start in range(0, prep.count, bs):
        idx = np.arange(start, min(start + bs, prep.count))
        mse, s = _batch_graph(
            pvars, arch, prep, idx, settings.eval_iterations, settings.temperature
        )
        losses.append(float(mse.value) * len(idx))
        for j, k in enumerate(idx):
            decoded = hard_decode(s.value[j])
            accs.append(float(np.mean(decoded.mapping == prep.truths[k])))
    return float(np.mean(accs)), float(np.sum(losses) / prep.count)


def train(
    solver: SolverParams,
    train_prep: PreparedPuzzles,
    heldout_prep: PreparedPuzzles | None,
    settings: TrainSettings,
    seed: int,
    eval_every: int = 1,
    target_accuracy: float | None = None,
) -> tuple[SolverParams, TrainReport]:
    """Full training loop with periodic held-out evaluation.

    Stops early once held-out placement accuracy reaches ``target_accuracy``
    (if given). The report's loss/accuracy traces are deterministic in the
    seed; wall-clock seconds are informational only.
    """
    rng = Rng(seed).substream("solver-train")
    state = AdamState()
    report = TrainReport(seed=seed)
    current = solver
    for epoch in range(1, settings.epochs + 1):
        t0 = time.perf_counter()
        current, state, loss = train_epoch(
            current, train_prep, state, settings, rng.substream("epoch", epoch), epoch
        )
        accuracy = float("nan")
        if heldout_prep is not None and (
            epoch % eval_every == 0 or epoch == settings.epochs
        ):
            accuracy, _ = evaluate(current, heldout_prep, settings)
        report.epochs.append(epoch)
        report.losses.append(loss)
        report.accuracies.append(accuracy)
        report.seconds.append(time.perf_counter() - t0)
        if (
            target_accuracy is not None
            and np.isfinite(accuracy)
            and accuracy >= target_accuracy
        ):
            break
    return current, report
