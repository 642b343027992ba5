"""Downstream transfer: segmentation U-Net, encoder transplantation,
dice/cross-entropy training, survival regression, and experiment sweeps.

The segmentation model reuses the puzzle encoder's conv stack (weights
copied in, input layer duplicated across channels) and mirrors it with a
randomly initialized decoder using nearest-neighbour upsampling and skip
concatenation. Low-shot and puzzle-complexity sweeps share their data
splits across arms, verified by content hash.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import DataError, DimensionError, TrainingDivergedError
from .optim import AdamState, adam_step
from .puzzle import MultimodalVolume, PuzzleSpec, auto_patch_len, create_puzzles
from .rng import Rng
from . import solver as solver_mod
from .solver import SolverArch, SolverParams, TrainSettings

__all__ = [
    "SegArch",
    "SegModel",
    "LabeledDataset",
    "FinetuneSettings",
    "adapt_input_layer",
    "transplant",
    "init_seg_model",
    "seg_forward",
    "seg_loss",
    "dice_score",
    "compute_class_weights",
    "build_labeled_dataset",
    "split_by_volume",
    "dataset_hash",
    "finetune",
    "evaluate_dice",
    "predict_masks",
    "lowshot_sweep",
    "complexity_ablation",
    "PretrainSettings",
    "pretrain_solver_on_volumes",
    "RegressionCase",
    "regress_survival",
]


@dataclass(frozen=True)
class SegArch:
    """U-Net shape: encoder mirrors a SolverArch, decoder mirrors the encoder."""

    in_channels: int
    classes: int
    channels: tuple[int, ...] = (16, 32, 32, 64, 64)
    strides: tuple[int, ...] = (1, 2, 1, 2, 1)
    kernel: int = 3
    padding: int = 1

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise DataError("channels and strides must have equal length")
        if self.strides[0] != 1:
            raise DataError("first encoder layer must keep full resolution")
        if self.classes < 2:
            raise DataError("need at least two classes")

    @property
    def downsample(self) -> int:
        d = 1
        for s in self.strides:
            d *= s
        return d

    def param_order(self) -> list[str]:
        names = []
        for i in range(1, len(self.channels) + 1):
            names += [f"enc_conv{i}_w", f"enc_conv{i}_b"]
        for i in range(1, len(self.channels) + 1):
            names += [f"dec_conv{i}_w", f"dec_conv{i}_b"]
        return names

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        shapes = {}
        prev = self.in_channels
        for i, c in enumerate(self.channels, 1):
            shapes[f"enc_conv{i}_w"] = (c, prev, k, k)
            shapes[f"enc_conv{i}_b"] = (c,)
            prev = c
        # decoder: concat(current, skip) -> skip's channel width, then classes
        cur = self.channels[-1]
        for j, i in enumerate(range(len(self.channels), 1, -1), 1):
            skip = self.channels[i - 2]
            shapes[f"dec_conv{j}_w"] = (skip, cur + skip, k, k)
            shapes[f"dec_conv{j}_b"] = (skip,)
            cur = skip
        last = len(self.channels)
        shapes[f"dec_conv{last}_w"] = (self.classes, cur, k, k)
        shapes[f"dec_conv{last}_b"] = (self.classes,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "classes": self.classes,
            "channels": list(self.channels),
            "strides": list(self.strides),
            "kernel": self.kernel,
            "padding": self.padding,
        }

    @staticmethod
    def from_dict(d: dict) -> "SegArch":
        return SegArch(
            in_channels=int(d["in_channels"]),
            classes=int(d["classes"]),
            channels=tuple(int(c) for c in d["channels"]),
            strides=tuple(int(s) for s in d["strides"]),
            kernel=int(d["kernel"]),
            padding=int(d["padding"]),
        )


@dataclass
class SegModel:
    arch: SegArch
    params: dict[str, np.ndarray]

    def copy(self) -> "SegModel":
        return SegModel(self.arch, {k: v.copy() for k, v in self.params.items()})


def init_seg_model(arch: SegArch, rng: Rng, mean: float = 0.1, std: float = 0.001) -> SegModel:
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = rng.normal(mean, std, size=shape) if std > 0 else np.full(
                shape, mean, dtype=np.float32
            )
    return SegModel(arch, params)


def adapt_input_layer(weights: np.ndarray, m: int, mode: str = "copy") -> np.ndarray:
    """Duplicate a single-channel first-layer kernel across m input channels.

    ``copy`` repeats the kernel verbatim; ``copy_scaled`` divides by m so
    identical data on all channels reproduces the single-channel
    pre-activations exactly.
    """
    if m < 1:
        raise DataError("need at least one input channel")
    if mode not in ("copy", "copy_scaled"):
        raise DataError(f"unknown adaptation mode '{mode}'")
    w = np.asarray(weights, dtype=np.float32)
    if w.ndim != 4 or w.shape[1] != 1:
        raise DimensionError("expected single-channel first-layer weights (O,1,kh,kw)")
    out = np.repeat(w, m, axis=1)
    if mode == "copy_scaled":
        out = out / np.float32(m)
    return out


def transplant(solver: SolverParams, seg: SegModel, mode: str = "copy") -> SegModel:
    """Copy encoder weights from a puzzle solver into a fresh copy of ``seg``.

    The first layer goes through :func:`adapt_input_layer`; decoder weights
    are untouched. Raises naming the first incompatible layer.
    """
    sa, ga = solver.arch, seg.arch
    if len(sa.channels) != len(ga.channels):
        raise DimensionError("encoder depth differs between solver and segmentation model")
    out = seg.copy()
    for i in range(1, len(ga.channels) + 1):
        sw = solver.params[f"conv{i}_w"]
        sb = solver.params[f"conv{i}_b"]
        if i == 1:
            if sw.shape[1] != 1:
                raise DimensionError("layer conv1: solver encoder must be single-channel")
            sw = adapt_input_layer(sw, ga.in_channels, mode)
        tgt = out.params[f"enc_conv{i}_w"]
        if sw.shape != tgt.shape:
            raise DimensionError(
                f"layer conv{i}: solver weights {sw.shape} do not fit "
                f"segmentation encoder {tgt.shape}"
            )
        out.params[f"enc_conv{i}_w"] = sw.copy()
        out.params[f"enc_conv{i}_b"] = sb.copy()
    return out


def _encoder_features(pvars, arch: SegArch, x) -> list:
    feats = []
    h = x
    for i, stride in enumerate(arch.strides, 1):
        h = ops.relu(
            ops.conv2d(
                h,
                pvars[f"enc_conv{i}_w"],
                pvars[f"enc_conv{i}_b"],
                stride=stride,
                padding=arch.padding,
            )
        )
        feats.append(h)
    return feats


def seg_forward(pvars, arch: SegArch, x) -> ops.Var:
    """Logits (B, classes, H, W) for input slices (B, M, H, W)."""
    feats = _encoder_features(pvars, arch, x)
    h = feats[-1]
    levels = len(arch.channels)
    for j, i in enumerate(range(levels, 1, -1), 1):
        if arch.strides[i - 1] == 2:
            h = ops.upsample2(h)
        h = ops.relu(
            ops.conv2d(
                ops.concat([h, feats[i - 2]], axis=1),
                pvars[f"dec_conv{j}_w"],
                pvars[f"dec_conv{j}_b"],
                stride=1,
                padding=arch.padding,
            )
        )
    return ops.conv2d(
        h,
        pvars[f"dec_conv{levels}_w"],
        pvars[f"dec_conv{levels}_b"],
        stride=1,
        padding=arch.padding,
    )


def _one_hot(mask: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((mask.shape[0], classes) + mask.shape[1:], dtype=np.float32)
    for c in range(classes):
        out[:, c][mask == c] = 1.0
    return out


def _seg_loss_graph(logits, mask: np.ndarray, class_weights: np.ndarray, eps: float = 1e-6):
    """0.5 * weighted cross-entropy + 0.5 * (1 - mean soft dice)."""
    classes = logits.shape[1]
    onehot = ops.constant(_one_hot(mask, classes))
    w = np.asarray(class_weights, dtype=np.float32)
    if w.shape != (classes,):
        raise DimensionError(f"class weights must have shape ({classes},)")
    pix_w = ops.constant(w[mask][:, None])  # (B, 1, H, W) after expand
    probs = ops.softmax(logits, axis=1)
    logp = ops.log(ops.clip(probs, 1e-12, 1.0))
    ce_map = ops.neg(ops.vsum(ops.mul(onehot, logp), axis=1, keepdims=True))
    ce = ops.div(
        ops.vsum(ops.mul(ce_map, pix_w)),
        ops.constant(np.float32(max(float(w[mask].sum(dtype=np.float64)), 1e-12))),
    )
    inter = ops.vsum(ops.mul(probs, onehot), axis=(0, 2, 3))
    psum = ops.vsum(probs, axis=(0, 2, 3))
    tsum = ops.vsum(onehot, axis=(0, 2, 3))
    dice = ops.div(
        ops.add(ops.scale(inter, 2.0), ops.constant(np.float32(eps))),
        ops.add(ops.add(psum, tsum), ops.constant(np.float32(eps))),
    )
    dice_term = ops.sub(ops.constant(np.float32(1.0)), ops.vmean(dice))
    return ops.add(ops.scale(ce, 0.5), ops.scale(dice_term, 0.5))


def seg_loss(logits: np.ndarray, mask: np.ndarray, class_weights) -> float:
    """Scalar loss for (B, C, H, W) logits against integer masks."""
    logits = np.asarray(logits, dtype=np.float32)
    mask = np.asarray(mask)
    if logits.shape[0] != mask.shape[0] or logits.shape[2:] != mask.shape[1:]:
        raise DimensionError("logits and mask shapes disagree")
    return float(_seg_loss_graph(ops.constant(logits), mask, class_weights).value)


def dice_score(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """2|A∩B| / (|A|+|B|) for one class; 1.0 when both masks are empty."""
    a = np.asarray(pred) == class_id
    b = np.asarray(truth) == class_id
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


def compute_class_weights(masks: np.ndarray, classes: int) -> np.ndarray:
    """Inverse-frequency weights, normalized to mean 1; unseen classes get 1."""
    counts = np.bincount(np.asarray(masks).ravel(), minlength=classes).astype(np.float64)
    total = counts.sum()
    w = np.where(counts > 0, total / np.maximum(counts, 1) / classes, 1.0)
    return (w / w.mean()).astype(np.float32)


# -- datasets -------------------------------------------------------------


@dataclass
class LabeledDataset:
    """Stacked multimodal slices with per-pixel class masks."""

    slices: np.ndarray  # (K, M, H, W) float32
    masks: np.ndarray   # (K, H, W) uint8
    classes: int
    volume_ids: np.ndarray  # (K,) which volume each slice came from

    def __post_init__(self):
        if self.slices.shape[0] != self.masks.shape[0]:
            raise DimensionError("slices and masks disagree in count")
        if int(self.masks.max(initial=0)) >= self.classes:
            raise DataError("mask labels exceed declared class count")

    @property
    def count(self) -> int:
        return self.slices.shape[0]

    @property
    def modality_count(self) -> int:
        return self.slices.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(
            self.slices[idx], self.masks[idx], self.classes, self.volume_ids[idx]
        )


def build_labeled_dataset(
    volumes: list[MultimodalVolume],
    masks: list[np.ndarray],
    classes: int,
    min_mask_fraction: float = 0.01,
) -> LabeledDataset:
    """Collect axial slices whose masks carry enough foreground."""
    xs, ys, ids = [], [], []
    for vid, (vol, mask) in enumerate(zip(volumes, masks)):
        if vol.dims != mask.shape:
            raise DimensionError(f"volume {vid} and mask shapes disagree")
        for z in range(vol.dims[0]):
            m = mask[z]
            if float(np.mean(m > 0)) < min_mask_fraction:
                continue
            xs.append(vol.data[:, z])
            ys.append(m)
            ids.append(vid)
    if not xs:
        raise DataError("no slices passed the mask-fraction threshold")
    return LabeledDataset(
        np.stack(xs).astype(np.float32),
        np.stack(ys).astype(np.uint8),
        classes,
        np.asarray(ids),
    )


def split_by_volume(
    ds: LabeledDataset, held_fraction: float = 0.2
) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic split on volume boundaries (last volumes held out)."""
    vols = np.unique(ds.volume_ids)
    n_held = max(1, int(round(held_fraction * len(vols))))
    if n_held >= len(vols):
        raise DataError("not enough volumes to split")
    held = set(vols[-n_held:].tolist())
    held_idx = [i for i in range(ds.count) if ds.volume_ids[i] in held]
    train_idx = [i for i in range(ds.count) if ds.volume_ids[i] not in held]
    return ds.subset(train_idx), ds.subset(held_idx)


def dataset_hash(ds: LabeledDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.slices).tobytes())
    h.update(np.ascontiguousarray(ds.masks).tobytes())
    h.update(np.ascontiguousarray(ds.volume_ids).tobytes())
    return h.hexdigest()


# -- fine-tuning ----------------------------------------------------------


@dataclass(frozen=True)
class FinetuneSettings:
    lr: float = 0.00001
    l2_lambda: float = 0.1
    batch_size: int = 8
    epochs: int = 50


def _weight_penalty(pvars) -> ops.Var:
    total = None
    for name, v in pvars.items():
        if not name.endswith("_w"):
            continue
        sq = ops.vsum(ops.mul(v, v))
        total = sq if total is None else ops.add(total, sq)
    return total


def predict_masks(model: SegModel, slices: np.ndarray, batch_size: int = 16) -> np.ndarray:
    pvars = {k: ops.constant(v) for k, v in model.params.items()}
    outs = []
    for start in range(0, slices.shape[0], batch_size):
        x = ops.constant(slices[start : start + batch_size])
        logits = seg_forward(pvars, model.arch, x)
        outs.append(np.argmax(logits.value, axis=1).astype(np.uint8))
    return np.concatenate(outs, axis=0)


def evaluate_dice(model: SegModel, ds: LabeledDataset) -> dict[int, float]:
    """Per-class dice pooled over all pixels of the dataset."""
    pred = predict_masks(model, ds.slices)
    return {c: dice_score(pred, ds.masks, c) for c in range(ds.classes)}


def mean_foreground_dice(per_class: dict[int, float]) -> float:
    fg = [v for c, v in per_class.items() if c != 0]
    return float(np.mean(fg)) if fg else float("nan")


def finetune(
    model: SegModel,
    train_ds: LabeledDataset,
    held_ds: LabeledDataset | None,
    settings: FinetuneSettings,
    seed: int,
    eval_every: int = 0,
) -> tuple[SegModel, list[dict]]:
    """Adam fine-tuning with the combined dice/cross-entropy loss.

    Returns the trained model and one metrics row per evaluated epoch
    (held-out per-class dice, train loss). ``eval_every=0`` evaluates only
    after the final epoch.
    """
    if train_ds.count == 0:
        raise DataError("empty fine-tuning set")
    weights = compute_class_weights(train_ds.masks, train_ds.classes)
    rng = Rng(seed).substream("finetune")
    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamState()
    history: list[dict] = []
    losses: list[float] = []
    for epoch in range(1, settings.epochs + 1):
        order = rng.substream("epoch", epoch).shuffled_indices(train_ds.count)
        epoch_losses = []
        for start in range(0, train_ds.count, settings.batch_size):
            idx = order[start : start + settings.batch_size]
            pvars = {k: ops.param(v) for k, v in params.items()}
            logits = seg_forward(
                pvars, model.arch, ops.constant(train_ds.slices[idx])
            )
            data_loss = _seg_loss_graph(logits, train_ds.masks[idx], weights)
            loss = ops.add(
                data_loss, ops.scale(_weight_penalty(pvars), settings.l2_lambda)
            )
            val = float(data_loss.value)
            if not np.isfinite(val):
                raise TrainingDivergedError(
                    f"non-finite segmentation loss at epoch {epoch}",
                    epoch=epoch,
                    batch=start // settings.batch_size,
                    loss_trace=losses[-10:],
                )
            epoch_losses.append(val)
            losses.append(val)
            ops.backward(loss)
            grads = {k: v.grad for k, v in pvars.items() if v.grad is not None}
            params, state = adam_step(params, grads, state, lr=settings.lr)
        if held_ds is not None and (
            (eval_every and epoch % eval_every == 0) or epoch == settings.epochs
        ):
            snapshot = SegModel(model.arch, params)
            per_class = evaluate_dice(snapshot, held_ds)
            history.append(
                {
                    "epoch": epoch,
                    "train_loss": float(np.mean(epoch_losses)),
                    "dice": per_class,
                    "mean_dice": mean_foreground_dice(per_class),
                }
            )
    return SegModel(model.arch, params), history


# -- experiment drivers ---------------------------------------------------


@dataclass(frozen=True)
class PretrainSettings:
    """Everything needed to pretrain a solver on volumes."""

    grid: int = 3
    jitter: int = 2
    puzzles_per_slice: int = 2
    train: TrainSettings = field(default_factory=TrainSettings)
    arch_channels: tuple[int, ...] = (16, 32, 32, 64, 64)
    arch_strides: tuple[int, ...] = (1, 2, 1, 2, 1)
    input_side: int = 16
    init_mean: float = 0.0
    init_std: float = 0.1
    held_fraction: float = 0.2
    target_accuracy: float | None = None
    eval_every: int = 5
    single_modality: int | None = None  # restrict puzzles to one modality


def pretrain_solver_on_volumes(
    volumes: list[MultimodalVolume],
    settings: PretrainSettings,
    seed: int,
) -> tuple[SolverParams, "solver_mod.TrainReport"]:
    """Build puzzles from volumes (last volumes held out) and train a solver."""
    vols = volumes
    if settings.single_modality is not None:
        vols = [v.restrict([settings.single_modality]) for v in volumes]
    n_held = max(1, int(round(settings.held_fraction * len(vols))))
    if n_held >= len(vols):
        raise DataError("not enough volumes for a held-out split")
    ext = min(vols[0].dims[1], vols[0].dims[2])
    spec = PuzzleSpec(
        grid=settings.grid,
        patch_len=auto_patch_len(ext, settings.grid, settings.jitter),
        jitter=settings.jitter,
        puzzles_per_slice=settings.puzzles_per_slice,
    )
    rng = Rng(seed).substream("pretrain-data")
    train_puzzles, held_puzzles = [], []
    for i, vol in enumerate(vols):
        dest = held_puzzles if i >= len(vols) - n_held else train_puzzles
        dest.extend(create_puzzles(vol, spec, rng.substream("vol", i)))
    if not train_puzzles or not held_puzzles:
        raise DataError("volumes produced no usable puzzles")
    arch = SolverArch(
        n_out=spec.patch_count,
        channels=settings.arch_channels,
        strides=settings.arch_strides,
        input_side=settings.input_side,
    )
    prep_train = solver_mod.prepare_puzzles(train_puzzles, arch)
    prep_held = solver_mod.prepare_puzzles(held_puzzles, arch)
    params = solver_mod.init_params(
        arch, Rng(seed).substream("pretrain-init"),
        mean=settings.init_mean, std=settings.init_std,
    )
    return solver_mod.train(
        params,
        prep_train,
        prep_held,
        settings.train,
        seed=seed,
        eval_every=settings.eval_every,
        target_accuracy=settings.target_accuracy,
    )


def lowshot_sweep(
    pretrained: SegModel,
    scratch: SegModel,
    train_ds: LabeledDataset,
    held_ds: LabeledDataset,
    fractions: list[float],
    seeds: list[int],
    settings: FinetuneSettings,
) -> list[dict]:
    """Fine-tune both arms on identical label subsets per (fraction, seed).

    Emits one row per (arm, fraction, seed, class). Both arms share the
    subset and the held-out set; the row carries the subset hash so callers
    can verify protocol integrity.
    """
    if pretrained.arch != scratch.arch:
        raise DataError("both arms must share one architecture")
    rows = []
    for fraction in fractions:
        if not 0 < fraction <= 1:
            raise DataError(f"invalid label fraction {fraction}")
        for seed in seeds:
            n = max(1, int(round(fraction * train_ds.count)))
            pick = Rng(seed).substream("lowshot", int(fraction * 10_000)).shuffled_indices(
                train_ds.count
            )[:n]
            subset = train_ds.subset(np.sort(pick))
            sub_hash = dataset_hash(subset)
            for arm, model in (("pretrained", pretrained), ("scratch", scratch)):
                trained, _ = finetune(model, subset, None, settings, seed)
                per_class = evaluate_dice(trained, held_ds)
                for c, d in per_class.items():
                    rows.append(
                        {
                            "experiment": "lowshot",
                            "arm": arm,
                            "fraction_or_grid": fraction,
                            "seed": seed,
                            "class": c,
                            "dice_or_mse": d,
                            "subset_hash": sub_hash,
                        }
                    )
    return rows


def complexity_ablation(
    volumes: list[MultimodalVolume],
    masks: list[np.ndarray],
    grids: list[int],
    seeds: list[int],
    pretrain: PretrainSettings,
    finetune_settings: FinetuneSettings,
    classes: int,
    adapt_mode: str = "copy",
) -> list[dict]:
    """Pretrain one solver per grid size, fine-tune identically, report dice.

    All grids share the same downstream split; the rows carry its hash.
    """
    ds = build_labeled_dataset(volumes, masks, classes)
    train_ds, held_ds = split_by_volume(ds)
    split_hash = dataset_hash(train_ds) + ":" + dataset_hash(held_ds)
    rows = []
    for grid in grids:
        for seed in seeds:
            psettings = PretrainSettings(
                grid=grid,
                jitter=pretrain.jitter,
                puzzles_per_slice=pretrain.puzzles_per_slice,
                train=pretrain.train,
                arch_channels=pretrain.arch_channels,
                arch_strides=pretrain.arch_strides,
                input_side=pretrain.input_side,
                init_mean=pretrain.init_mean,
                init_std=pretrain.init_std,
                held_fraction=pretrain.held_fraction,
                target_accuracy=pretrain.target_accuracy,
                eval_every=pretrain.eval_every,
            )
            solver_params, _ = pretrain_solver_on_volumes(volumes, psettings, seed)
            seg_arch = SegArch(
                in_channels=ds.modality_count,
                classes=classes,
                channels=psettings.arch_channels,
                strides=psettings.arch_strides,
            )
            base = init_seg_model(seg_arch, Rng(seed).substream("seg-init"), 0.0, 0.1)
            model = transplant(solver_params, base, adapt_mode)
            trained, _ = finetune(model, train_ds, None, finetune_settings, seed)
            per_class = evaluate_dice(trained, held_ds)
            for c, d in per_class.items():
                rows.append(
                    {
                        "experiment": "complexity",
                        "arm": "pretrained",
                        "fraction_or_grid": grid,
                        "seed": seed,
                        "class": c,
                        "dice_or_mse": d,
                        "split_hash": split_hash,
                    }
                )
    return rows


# -- survival regression --------------------------------------------------


@dataclass
class RegressionCase:
    slices: np.ndarray  # (M, H, W) representative slice stack
    age: float
    target: float


def _reg_forward(pvars, enc_arch: SegArch, x, ages):
    feats = _encoder_features(pvars, enc_arch, x)
    pooled = ops.vmean(feats[-1], axis=(2, 3))  # (B, C)
    h = ops.relu(ops.dense(pooled, pvars["reg_w1"], pvars["reg_b1"]))  # (B, 5)
    h = ops.concat([h, ops.constant(ages[:, None])], axis=1)  # age joins pre-output
    return ops.dense(h, pvars["reg_w2"], pvars["reg_b2"])  # (B, 1)


def regress_survival(
    solver_params: SolverParams,
    cases: list[RegressionCase],
    seed: int,
    lr: float = 0.001,
    epochs: int = 100,
    l2_lambda: float = 0.1,
    held_fraction: float = 0.25,
    freeze_encoder: bool = False,
    adapt_mode: str = "copy",
    head_init_mean: float = 0.0,
    head_init_std: float = 0.1,
) -> tuple[float, list[float]]:
    """Train the 5-feature regression head on pooled encoder features.

    Returns (held-out MSE, per-epoch train MSE trace). Cases are split
    deterministically (last fraction held out).
    """
    if len(cases) < 2:
        raise DataError("need at least two cases")
    m = cases[0].slices.shape[0]
    enc_arch = SegArch(
        in_channels=m,
        classes=2,  # unused by the regression path
        channels=solver_params.arch.channels,
        strides=solver_params.arch.strides,
        kernel=solver_params.arch.kernel,
        padding=solver_params.arch.padding,
    )
    rng = Rng(seed).substream("regression")
    params = {}
    for i in range(1, len(enc_arch.channels) + 1):
        w = solver_params.params[f"conv{i}_w"]
        if i == 1:
            w = adapt_input_layer(w, m, adapt_mode)
        params[f"enc_conv{i}_w"] = w.copy()
        params[f"enc_conv{i}_b"] = solver_params.params[f"conv{i}_b"].copy()
    c_last = enc_arch.channels[-1]

    def head_init(shape):
        if head_init_std > 0:
            return rng.normal(head_init_mean, head_init_std, size=shape)
        return np.full(shape, head_init_mean, dtype=np.float32)

    params["reg_w1"] = head_init((5, c_last))
    params["reg_b1"] = np.zeros(5, dtype=np.float32)
    params["reg_w2"] = head_init((1, 6))
    params["reg_b2"] = np.zeros(1, dtype=np.float32)

    n_held = max(1, int(round(held_fraction * len(cases))))
    train_cases = cases[: len(cases) - n_held]
    held_cases = cases[len(cases) - n_held :]
    if not train_cases:
        raise DataError("no training cases after split")

    def batch_arrays(cs):
        x = np.stack([c.slices for c in cs]).astype(np.float32)
        ages = np.asarray([c.age for c in cs], dtype=np.float32)
        y = np.asarray([[c.target] for c in cs], dtype=np.float32)
        return x, ages, y

    x_tr, age_tr, y_tr = batch_arrays(train_cases)
    x_he, age_he, y_he = batch_arrays(held_cases)
    state = AdamState()
    trace = []
    frozen = {k for k in params if k.startswith("enc_")} if freeze_encoder else set()
    for _ in range(epochs):
        pvars = {
            k: (ops.constant(v) if k in frozen else ops.param(v))
            for k, v in params.items()
        }
        pred = _reg_forward(pvars, enc_arch, ops.constant(x_tr), age_tr)
        diff = ops.sub(pred, ops.constant(y_tr))
        mse = ops.vmean(ops.mul(diff, diff))
        loss = ops.add(mse, ops.scale(_weight_penalty(pvars), l2_lambda))
        trace.append(float(mse.value))
        if not np.isfinite(trace[-1]):
            raise TrainingDivergedError("non-finite regression loss")
        ops.backward(loss)
        grads = {
            k: v.grad
            for k, v in pvars.items()
            if isinstance(v, ops.Var) and v.grad is not None and k not in frozen
        }
        updated, state = adam_step(
            {k: params[k] for k in grads}, grads, state, lr=lr
        )
        params.update(updated)
    pvars = {k: ops.constant(v) for k, v in params.items()}
    pred = _reg_forward(pvars, enc_arch, ops.constant(x_he), age_he)
    held_mse = float(np.mean((pred.value - y_he) ** 2, dtype=np.float64))
    return held_mse, trace
