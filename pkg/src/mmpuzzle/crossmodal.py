"""Paired modality translation at desk scale.

A small skip-connected encoder-decoder generator maps a source-modality
slice to a target-modality slice; a 3-layer conditional patch discriminator
scores (source, candidate) pairs. Training alternates discriminator and
generator steps under the adversarial + weighted-L1 objective; setting the
adversarial weight to zero gives a deterministic pure-L1 regression mode
used for reproducible tests and sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import transfer as transfer_mod
from .errors import DataError, DimensionError, TrainingDivergedError
from .optim import AdamState, adam_step
from .puzzle import MultimodalVolume
from .rng import Rng
from .solver import TrainSettings
from .transfer import FinetuneSettings, PretrainSettings, SegArch

__all__ = [
    "TranslatorArch",
    "TranslatorParams",
    "TranslatorSettings",
    "cgan_losses",
    "init_translator",
    "generator_apply",
    "build_paired_slices",
    "train_translator",
    "synthesize",
    "semi_supervised_sweep",
]

EPS = 1e-7


@dataclass(frozen=True)
class TranslatorArch:
    base: int = 16
    kernel: int = 3

    def g_param_shapes(self) -> dict[str, tuple[int, ...]]:
        b, k = self.base, self.kernel
        return {
            "g_conv1_w": (b, 1, k, k), "g_conv1_b": (b,),
            "g_conv2_w": (2 * b, b, k, k), "g_conv2_b": (2 * b,),
            "g_conv3_w": (2 * b, 2 * b, k, k), "g_conv3_b": (2 * b,),
            "g_conv4_w": (b, 4 * b, k, k), "g_conv4_b": (b,),
            "g_conv5_w": (b, 2 * b, k, k), "g_conv5_b": (b,),
            "g_conv6_w": (1, b, k, k), "g_conv6_b": (1,),
        }

    def d_param_shapes(self) -> dict[str, tuple[int, ...]]:
        b, k = self.base, self.kernel
        return {
            "d_conv1_w": (b, 2, k, k), "d_conv1_b": (b,),
            "d_conv2_w": (2 * b, b, k, k), "d_conv2_b": (2 * b,),
            "d_conv3_w": (1, 2 * b, k, k), "d_conv3_b": (1,),
        }

    def to_dict(self) -> dict:
        return {"base": self.base, "kernel": self.kernel}

    @staticmethod
    def from_dict(d: dict) -> "TranslatorArch":
        return TranslatorArch(base=int(d["base"]), kernel=int(d["kernel"]))

    def param_order(self) -> list[str]:
        return list(self.g_param_shapes()) + list(self.d_param_shapes())


@dataclass
class TranslatorParams:
    arch: TranslatorArch
    g: dict[str, np.ndarray]
    d: dict[str, np.ndarray]
    l1_weight: float = 100.0
    trained: bool = False

    def __post_init__(self):
        if self.l1_weight < 0:
            raise DataError("l1_weight must be non-negative")


@dataclass(frozen=True)
class TranslatorSettings:
    lr: float = 0.0002
    epochs: int = 200
    batch_size: int = 8
    l1_weight: float = 100.0
    adversarial_weight: float = 1.0
    init_mean: float = 0.0
    init_std: float = 0.02


def init_translator(
    arch: TranslatorArch, rng: Rng, mean: float = 0.0, std: float = 0.02,
    l1_weight: float = 100.0,
) -> TranslatorParams:
    def make(shapes):
        out = {}
        for name, shape in shapes.items():
            if name.endswith("_b"):
                out[name] = np.zeros(shape, dtype=np.float32)
            else:
                out[name] = rng.normal(mean, std, size=shape) if std > 0 else np.full(
                    shape, mean, dtype=np.float32
                )
        return out

    return TranslatorParams(
        arch, make(arch.g_param_shapes()), make(arch.d_param_shapes()),
        l1_weight=l1_weight,
    )


def _gen_forward(gvars, arch: TranslatorArch, a) -> ops.Var:
    p = arch.kernel // 2
    e1 = ops.relu(ops.conv2d(a, gvars["g_conv1_w"], gvars["g_conv1_b"], stride=2, padding=p))
    e2 = ops.relu(ops.conv2d(e1, gvars["g_conv2_w"], gvars["g_conv2_b"], stride=2, padding=p))
    e3 = ops.relu(ops.conv2d(e2, gvars["g_conv3_w"], gvars["g_conv3_b"], stride=1, padding=p))
    h = ops.relu(
        ops.conv2d(ops.concat([e3, e2], axis=1), gvars["g_conv4_w"], gvars["g_conv4_b"], stride=1, padding=p)
    )
    h = ops.upsample2(h)
    h = ops.relu(
        ops.conv2d(ops.concat([h, e1], axis=1), gvars["g_conv5_w"], gvars["g_conv5_b"], stride=1, padding=p)
    )
    h = ops.upsample2(h)
    return ops.sigmoid(
        ops.conv2d(h, gvars["g_conv6_w"], gvars["g_conv6_b"], stride=1, padding=p)
    )


def _disc_forward(dvars, arch: TranslatorArch, a, b) -> ops.Var:
    p = arch.kernel // 2
    h = ops.relu(
        ops.conv2d(ops.concat([a, b], axis=1), dvars["d_conv1_w"], dvars["d_conv1_b"], stride=2, padding=p)
    )
    h = ops.relu(ops.conv2d(h, dvars["d_conv2_w"], dvars["d_conv2_b"], stride=2, padding=p))
    return ops.sigmoid(
        ops.conv2d(h, dvars["d_conv3_w"], dvars["d_conv3_b"], stride=1, padding=p)
    )


def generator_apply(params: TranslatorParams, slices: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Translate (K, H, W) source slices; output clamped to [0, 1]."""
    x = np.asarray(slices, dtype=np.float32)
    if x.ndim != 3:
        raise DimensionError("expected (K, H, W) slices")
    _check_extent(x.shape[1:])
    gvars = {k: ops.constant(v) for k, v in params.g.items()}
    outs = []
    for start in range(0, x.shape[0], batch_size):
        batch = ops.constant(x[start : start + batch_size][:, None])
        y = _gen_forward(gvars, params.arch, batch)
        outs.append(np.clip(y.value[:, 0], 0.0, 1.0))
    return np.concatenate(outs, axis=0)


def _check_extent(hw) -> None:
    h, w = hw
    if h % 4 or w % 4:
        raise DataError(f"slice extent {h}x{w} must be divisible by 4")


def cgan_losses(
    g_out: np.ndarray,
    real_b: np.ndarray,
    d_real_score: np.ndarray,
    d_fake_score: np.ndarray,
    l1_weight: float,
) -> tuple[float, float]:
    """Adversarial + L1 objective values (generator total, discriminator).

    Scores are probabilities; exact 0/1 are clamped at 1e-7 before the log.
    """
    g_out = np.asarray(g_out, dtype=np.float64)
    real_b = np.asarray(real_b, dtype=np.float64)
    if g_out.shape != real_b.shape:
        raise DimensionError("generator output and target shapes disagree")
    dr = np.clip(np.asarray(d_real_score, dtype=np.float64), EPS, 1 - EPS)
    df = np.clip(np.asarray(d_fake_score, dtype=np.float64), EPS, 1 - EPS)
    disc = float(-np.mean(np.log(dr) + np.log(1.0 - df)))
    adv = float(-np.mean(np.log(df)))
    l1 = float(np.mean(np.abs(g_out - real_b)))
    return adv + l1_weight * l1, disc


def build_paired_slices(
    volumes: list[MultimodalVolume],
    source_idx: int,
    target_idx: int,
    foreground_intensity: float = 0.2,
    min_foreground: float = 0.05,
) -> tuple[np.ndarray, np.ndarray]:
    """Aligned (source, target) slice arrays from the given volumes."""
    srcs, tgts = [], []
    for vol in volumes:
        m = vol.modality_count
        if source_idx >= m or target_idx >= m:
            raise DataError("modality index out of range")
        for z in range(vol.dims[0]):
            sl = vol.data[:, z]
            if float(np.mean(sl.max(axis=0) > foreground_intensity)) < min_foreground:
                continue
            srcs.append(sl[source_idx])
            tgts.append(sl[target_idx])
    if not srcs:
        raise DataError("no usable slice pairs")
    return np.stack(srcs), np.stack(tgts)


def _l1_graph(fake, target) -> ops.Var:
    return ops.vmean(ops.absval(ops.sub(fake, target)))


def train_translator(
    pairs: tuple[np.ndarray, np.ndarray],
    settings: TranslatorSettings,
    seed: int,
    arch: TranslatorArch = TranslatorArch(),
) -> tuple[TranslatorParams, dict[str, list[float]]]:
    """Alternating D/G updates (or pure L1 when adversarial_weight is 0).

    Returns trained params and per-epoch loss curves
    {"generator": [...], "discriminator": [...], "l1": [...]}.
    """
    src, tgt = pairs
    if src.shape != tgt.shape or src.ndim != 3:
        raise DimensionError("paired slices must be matching (K, H, W) arrays")
    if src.shape[0] < 1:
        raise DataError("need at least one pair")
    _check_extent(src.shape[1:])
    src = src.astype(np.float32)
    tgt = tgt.astype(np.float32)
    rng = Rng(seed).substream("translator")
    params = init_translator(
        arch, rng.substream("init"), settings.init_mean, settings.init_std,
        settings.l1_weight,
    )
    g_state, d_state = AdamState(), AdamState()
    curves: dict[str, list[float]] = {"generator": [], "discriminator": [], "l1": []}
    adversarial = settings.adversarial_weight > 0
    k = src.shape[0]
    for epoch in range(1, settings.epochs + 1):
        order = rng.substream("epoch", epoch).shuffled_indices(k)
        g_losses, d_losses, l1_losses = [], [], []
        for start in range(0, k, settings.batch_size):
            idx = order[start : start + settings.batch_size]
            a = ops.constant(src[idx][:, None])
            b = ops.constant(tgt[idx][:, None])

            if adversarial:
                # discriminator step: generator frozen
                gconst = {n: ops.constant(v) for n, v in params.g.items()}
                fake_const = ops.constant(_gen_forward(gconst, arch, a).value)
                dvars = {n: ops.param(v) for n, v in params.d.items()}
                d_real = ops.clip(_disc_forward(dvars, arch, a, b), EPS, 1 - EPS)
                d_fake = ops.clip(_disc_forward(dvars, arch, a, fake_const), EPS, 1 - EPS)
                d_loss = ops.neg(
                    ops.add(
                        ops.vmean(ops.log(d_real)),
                        ops.vmean(ops.log(ops.sub(ops.constant(np.float32(1.0)), d_fake))),
                    )
                )
                _check_finite(float(d_loss.value), epoch, start, d_losses)
                d_losses.append(float(d_loss.value))
                ops.backward(d_loss)
                grads = {n: v.grad for n, v in dvars.items() if v.grad is not None}
                params.d, d_state = adam_step(params.d, grads, d_state, lr=settings.lr)

            # generator step: discriminator frozen
            gvars = {n: ops.param(v) for n, v in params.g.items()}
            fake = _gen_forward(gvars, arch, a)
            l1 = _l1_graph(fake, b)
            if adversarial:
                dconst = {n: ops.constant(v) for n, v in params.d.items()}
                d_fake = ops.clip(_disc_forward(dconst, arch, a, fake), EPS, 1 - EPS)
                adv = ops.neg(ops.vmean(ops.log(d_fake)))
                g_loss = ops.add(
                    ops.scale(adv, settings.adversarial_weight),
                    ops.scale(l1, settings.l1_weight),
                )
            else:
                g_loss = ops.scale(l1, settings.l1_weight)
            _check_finite(float(g_loss.value), epoch, start, g_losses)
            g_losses.append(float(g_loss.value))
            l1_losses.append(float(l1.value))
            ops.backward(g_loss)
            grads = {n: v.grad for n, v in gvars.items() if v.grad is not None}
            params.g, g_state = adam_step(params.g, grads, g_state, lr=settings.lr)

        curves["generator"].append(float(np.mean(g_losses)))
        curves["discriminator"].append(float(np.mean(d_losses)) if d_losses else 0.0)
        curves["l1"].append(float(np.mean(l1_losses)))
    params.trained = True
    return params, curves


def _check_finite(value: float, epoch: int, batch_start: int, trace) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite translator loss at epoch {epoch}",
            epoch=epoch,
            batch=batch_start,
            loss_trace=trace[-10:],
        )


def synthesize(
    params: TranslatorParams,
    volume: MultimodalVolume,
    source_idx: int,
    target_idx: int,
) -> MultimodalVolume:
    """Replace the target modality with the translated source, slice-wise.

    The returned volume flags the target modality as synthetic.
    """
    if not params.trained:
        raise DataError("translator has not been trained")
    m = volume.modality_count
    if source_idx >= m or target_idx >= m or source_idx < 0 or target_idx < 0:
        raise DataError("modality index out of range")
    fake = generator_apply(params, volume.data[source_idx])
    data = volume.data.copy()
    data[target_idx] = fake
    flags = volume.synthetic.copy()
    flags[target_idx] = True
    return MultimodalVolume(data, flags, name=volume.name)


def semi_supervised_sweep(
    volumes: list[MultimodalVolume],
    masks: list[np.ndarray],
    fractions: list[float],
    seeds: list[int],
    classes: int,
    translator_settings: TranslatorSettings,
    pretrain_settings: PretrainSettings,
    finetune_settings: FinetuneSettings,
    source_idx: int = 0,
    target_idx: int = 1,
) -> list[dict]:
    """Train translator on a fraction of pairs, synthesize the rest, build
    multimodal puzzles on the mix, pretrain, fine-tune, record dice.

    Fraction 1.0 leaves every volume real, i.e. the all-real pipeline.
    Returns rows {fraction, metric, seed}.
    """
    for f in fractions:
        if not 0 < f <= 1:
            raise DataError(f"invalid fraction {f}")
    ds = transfer_mod.build_labeled_dataset(volumes, masks, classes)
    train_ds, held_ds = transfer_mod.split_by_volume(ds)
    train_vol_ids = sorted(set(train_ds.volume_ids.tolist()))
    rows = []
    for fraction in fractions:
        n_real = max(1, int(round(fraction * len(train_vol_ids))))
        real_ids = set(train_vol_ids[:n_real])
        for seed in seeds:
            if n_real < len(train_vol_ids):
                pairs = build_paired_slices(
                    [volumes[i] for i in sorted(real_ids)], source_idx, target_idx
                )
                translator, _ = train_translator(pairs, translator_settings, seed)
                mixed = [
                    volumes[i]
                    if i in real_ids or i not in train_vol_ids
                    else synthesize(translator, volumes[i], source_idx, target_idx)
                    for i in range(len(volumes))
                ]
            else:
                mixed = list(volumes)
            pretrain_vols = [mixed[i] for i in train_vol_ids]
            solver_params, _ = transfer_mod.pretrain_solver_on_volumes(
                pretrain_vols, pretrain_settings, seed
            )
            seg_arch = SegArch(
                in_channels=ds.modality_count,
                classes=classes,
                channels=pretrain_settings.arch_channels,
                strides=pretrain_settings.arch_strides,
            )
            base = transfer_mod.init_seg_model(
                seg_arch, Rng(seed).substream("seg-init"), 0.0, 0.1
            )
            model = transfer_mod.transplant(solver_params, base)
            trained, _ = transfer_mod.finetune(
                model, train_ds, None, finetune_settings, seed
            )
            per_class = transfer_mod.evaluate_dice(trained, held_ds)
            rows.append(
                {
                    "fraction": fraction,
                    "metric": transfer_mod.mean_foreground_dice(per_class),
                    "seed": seed,
                }
            )
    return rows
