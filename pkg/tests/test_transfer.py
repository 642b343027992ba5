import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmpuzzle import ops
from mmpuzzle.errors import DataError, DimensionError
from mmpuzzle.rng import Rng
from mmpuzzle.solver import SolverArch, init_params
from mmpuzzle.synth import CLASS_COUNT, synth_dataset
from mmpuzzle.transfer import (
    FinetuneSettings,
    LabeledDataset,
    RegressionCase,
    SegArch,
    SegModel,
    adapt_input_layer,
    build_labeled_dataset,
    compute_class_weights,
    dataset_hash,
    dice_score,
    evaluate_dice,
    finetune,
    init_seg_model,
    lowshot_sweep,
    predict_masks,
    regress_survival,
    seg_forward,
    seg_loss,
    split_by_volume,
    transplant,
    _seg_loss_graph,
)

SMALL = dict(channels=(4, 8, 8, 16, 16), strides=(1, 2, 1, 2, 1))


def small_solver(rng, n_out=4, mean=0.05, std=0.05):
    arch = SolverArch(n_out=n_out, input_side=8, **SMALL)
    return init_params(arch, rng, mean=mean, std=std)


def small_seg(m=2, classes=3, rng=None, mean=0.0, std=0.1):
    arch = SegArch(in_channels=m, classes=classes, **SMALL)
    return init_seg_model(arch, rng or Rng(0), mean=mean, std=std)


def test_adapt_input_layer_m1_identity():
    w = Rng(60).uniform(-1, 1, (4, 1, 3, 3))
    for mode in ("copy", "copy_scaled"):
        assert np.array_equal(adapt_input_layer(w, 1, mode), w)


def test_adapt_copy_scaled_preserves_preactivations():
    rng = Rng(61)
    w = rng.uniform(-1, 1, (4, 1, 3, 3))
    x1 = rng.uniform(0, 1, (2, 1, 8, 8))
    x4 = np.repeat(x1, 4, axis=1)
    y1 = ops.conv2d(ops.constant(x1), ops.constant(w), padding=1).value
    w4 = adapt_input_layer(w, 4, "copy_scaled")
    y4 = ops.conv2d(ops.constant(x4), ops.constant(w4), padding=1).value
    assert np.allclose(y1, y4, atol=1e-6)
    wc = adapt_input_layer(w, 4, "copy")
    yc = ops.conv2d(ops.constant(x4), ops.constant(wc), padding=1).value
    assert np.allclose(yc, 4 * y1, atol=1e-5)


def test_adapt_rejects_bad_input():
    with pytest.raises(DimensionError):
        adapt_input_layer(np.zeros((4, 2, 3, 3)), 2)
    with pytest.raises(DataError):
        adapt_input_layer(np.zeros((4, 1, 3, 3)), 2, mode="average")


def test_transplant_copies_encoder_and_keeps_decoder():
    rng = Rng(62)
    solver = small_solver(rng)
    seg = small_seg(m=3, rng=rng.substream("seg"))
    before_dec = {
        k: v.copy() for k, v in seg.params.items() if k.startswith("dec_")
    }
    out = transplant(solver, seg, mode="copy")
    for i in range(2, 6):
        assert np.array_equal(out.params[f"enc_conv{i}_w"], solver.params[f"conv{i}_w"])
        assert np.array_equal(out.params[f"enc_conv{i}_b"], solver.params[f"conv{i}_b"])
    assert np.array_equal(
        out.params["enc_conv1_w"], adapt_input_layer(solver.params["conv1_w"], 3)
    )
    for k, v in before_dec.items():
        assert np.array_equal(out.params[k], v)
        assert np.array_equal(seg.params[k], v)  # source untouched


def test_transplant_shape_mismatch_names_layer():
    solver = small_solver(Rng(63))
    seg_arch = SegArch(in_channels=2, classes=3, channels=(4, 8, 8, 16, 32))
    seg = init_seg_model(seg_arch, Rng(64))
    with pytest.raises(DimensionError, match="conv5"):
        transplant(solver, seg)


def test_transplant_zero_solver_forward_defined():
    solver = small_solver(Rng(65), mean=0.0, std=0.0)
    seg = small_seg(m=2, rng=Rng(66))
    model = transplant(solver, seg)
    x = Rng(67).uniform(0, 1, (2, 2, 16, 16))
    masks = predict_masks(model, x)
    assert masks.shape == (2, 16, 16)


def naive_seg_loss(logits, mask, weights, eps=1e-6):
    """Independent recomputation with plain loops over classes."""
    logits = np.asarray(logits, dtype=np.float64)
    b, c, h, w = logits.shape
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    ce_num, ce_den = 0.0, 0.0
    for i in range(b):
        for y in range(h):
            for x in range(w):
                cls = mask[i, y, x]
                ce_num += weights[cls] * -np.log(probs[i, cls, y, x])
                ce_den += weights[cls]
    ce = ce_num / ce_den
    dices = []
    for cls in range(c):
        t = (mask == cls).astype(np.float64)
        p = probs[:, cls]
        dices.append((2 * (p * t).sum() + eps) / (p.sum() + t.sum() + eps))
    return 0.5 * ce + 0.5 * (1 - np.mean(dices))


def test_seg_loss_matches_independent_recomputation():
    rng = Rng(68)
    logits = rng.uniform(-2, 2, (2, 3, 6, 6))
    mask = rng.integers(0, 3, size=(2, 6, 6)).astype(np.uint8)
    weights = np.array([0.5, 1.0, 1.5], dtype=np.float32)
    got = seg_loss(logits, mask, weights)
    ref = naive_seg_loss(logits, mask, weights)
    assert got == pytest.approx(ref, rel=1e-5)


def test_seg_loss_uniform_logits_balanced_classes():
    logits = np.zeros((1, 2, 4, 4), dtype=np.float32)
    mask = np.zeros((1, 4, 4), dtype=np.uint8)
    mask[0, 2:] = 1  # balanced halves
    loss = seg_loss(logits, mask, np.ones(2, dtype=np.float32))
    # CE term ln 2; soft dice is exactly 1/2 for uniform probabilities
    assert loss == pytest.approx(0.5 * np.log(2) + 0.5 * 0.5, rel=1e-5)


def test_seg_loss_saturated_correct_logits_vanishes():
    rng = Rng(69)
    mask = rng.integers(0, 3, size=(1, 6, 6)).astype(np.uint8)
    logits = np.full((1, 3, 6, 6), -30.0, dtype=np.float32)
    for c in range(3):
        logits[0, c][mask[0] == c] = 30.0
    loss = seg_loss(logits, mask, np.ones(3, dtype=np.float32))
    assert loss < 1e-5


def test_seg_loss_gradient_matches_finite_differences():
    rng = Rng(70)
    logits = rng.uniform(-1, 1, (1, 3, 8, 8))
    mask = rng.integers(0, 3, size=(1, 8, 8)).astype(np.uint8)
    weights = compute_class_weights(mask, 3)

    def f(lv):
        return _seg_loss_graph(lv, mask, weights)

    assert ops.gradcheck(f, [logits], h=1e-4) < 1e-3


def test_dice_score_examples():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.zeros((4, 4), dtype=np.uint8)
    a[1, 1] = 1
    b[1, 1] = 1
    b[1, 2] = 1
    assert dice_score(a, a, 1) == 1.0
    assert dice_score(a, b, 1) == pytest.approx(2 / 3)
    c = np.zeros((4, 4), dtype=np.uint8)
    c[3, 3] = 1
    assert dice_score(a, c, 1) == 0.0
    assert dice_score(np.zeros((2, 2)), np.zeros((2, 2)), 1) == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_dice_symmetry_and_permutation_invariance(seed):
    rng = Rng(seed)
    a = (rng.uniform(0, 1, (5, 5)) > 0.5).astype(np.uint8)
    b = (rng.uniform(0, 1, (5, 5)) > 0.5).astype(np.uint8)
    assert dice_score(a, b, 1) == dice_score(b, a, 1)
    order = rng.permutation(25)
    assert dice_score(a, b, 1) == dice_score(
        a.ravel()[order].reshape(5, 5), b.ravel()[order].reshape(5, 5), 1
    )


@pytest.fixture(scope="module")
def tiny_dataset():
    vols, masks = synth_dataset(4, (32, 32, 32), 2, Rng(71))
    return build_labeled_dataset(vols, masks, CLASS_COUNT)


def test_build_and_split_dataset(tiny_dataset):
    ds = tiny_dataset
    assert ds.modality_count == 2
    tr, he = split_by_volume(ds, 0.25)
    assert set(np.unique(tr.volume_ids)).isdisjoint(np.unique(he.volume_ids))
    assert dataset_hash(tr) != dataset_hash(he)
    assert dataset_hash(tr) == dataset_hash(tr)


def test_finetune_lr_zero_keeps_model(tiny_dataset):
    tr, he = split_by_volume(tiny_dataset, 0.25)
    model = small_seg(m=2, classes=CLASS_COUNT, rng=Rng(72))
    out, history = finetune(
        model, tr.subset(range(4)), he.subset(range(2)),
        FinetuneSettings(lr=0.0, epochs=1, batch_size=2), seed=0,
    )
    for k in model.params:
        assert np.array_equal(out.params[k], model.params[k])
    assert history and "mean_dice" in history[-1]


def test_finetune_overfits_tiny_set(tiny_dataset):
    tr, _ = split_by_volume(tiny_dataset, 0.25)
    four = tr.subset(range(0, tr.count, max(1, tr.count // 4))[:4] if tr.count >= 4 else range(tr.count))
    model = small_seg(m=2, classes=CLASS_COUNT, rng=Rng(73))
    trained, _ = finetune(
        model, four, None,
        FinetuneSettings(lr=0.008, l2_lambda=1e-5, epochs=300, batch_size=4),
        seed=1,
    )
    per_class = evaluate_dice(trained, four)
    for c, d in per_class.items():
        assert d > 0.95, (c, per_class)


def test_finetune_seeded_rerun_identical(tiny_dataset):
    tr, he = split_by_volume(tiny_dataset, 0.25)
    sub = tr.subset(range(6))

    def run():
        model = small_seg(m=2, classes=CLASS_COUNT, rng=Rng(74))
        _, history = finetune(
            model, sub, he, FinetuneSettings(lr=0.001, epochs=3, batch_size=3),
            seed=5, eval_every=1,
        )
        return history

    h1, h2 = run(), run()
    assert h1 == h2


def test_lowshot_single_cell_row_shape(tiny_dataset):
    tr, he = split_by_volume(tiny_dataset, 0.25)
    pre = small_seg(m=2, classes=CLASS_COUNT, rng=Rng(75))
    scr = small_seg(m=2, classes=CLASS_COUNT, rng=Rng(76))
    rows = lowshot_sweep(
        pre, scr, tr, he, [1.0], [0],
        FinetuneSettings(lr=0.001, epochs=1, batch_size=8),
    )
    assert len(rows) == 2 * CLASS_COUNT  # both arms, one row per class
    assert len({r["subset_hash"] for r in rows}) == 1
    assert {r["arm"] for r in rows} == {"pretrained", "scratch"}


def test_lowshot_subsets_shared_across_arms(tiny_dataset):
    tr, he = split_by_volume(tiny_dataset, 0.25)
    pre = small_seg(m=2, classes=CLASS_COUNT, rng=Rng(77))
    scr = small_seg(m=2, classes=CLASS_COUNT, rng=Rng(78))
    rows = lowshot_sweep(
        pre, scr, tr, he, [0.1, 0.5], [0, 1],
        FinetuneSettings(lr=0.001, epochs=1, batch_size=8),
    )
    for fraction in (0.1, 0.5):
        for seed in (0, 1):
            cell = [
                r["subset_hash"]
                for r in rows
                if r["fraction_or_grid"] == fraction and r["seed"] == seed
            ]
            assert len(set(cell)) == 1


def test_regress_survival_zero_head_predicts_zero():
    rng = Rng(79)
    solver = small_solver(rng, mean=0.0, std=0.0)
    cases = [
        RegressionCase(
            slices=rng.uniform(0, 1, (2, 16, 16)), age=0.5, target=float(t)
        )
        for t in (1.0, -2.0, 0.5, 3.0)
    ]
    mse, _ = regress_survival(
        solver, cases, seed=0, lr=0.0, epochs=1, l2_lambda=0.0, held_fraction=0.5,
        head_init_mean=0.0, head_init_std=0.0,
    )
    # zero everything -> prediction 0 -> held-out MSE = mean(target^2)
    targets = np.array([0.5, 3.0])
    assert mse == pytest.approx(float(np.mean(targets**2)), rel=1e-5)


def test_regress_survival_learns_linear_age_signal():
    rng = Rng(80)
    solver = small_solver(rng.substream("solver"), mean=0.0, std=0.05)
    cases = []
    for i in range(24):
        r = rng.substream("case", i)
        age = float(r.uniform(0, 1))
        cases.append(
            RegressionCase(
                slices=r.uniform(0, 1, (2, 16, 16)),
                age=age,
                target=2.0 * age - 1.0 + float(r.normal(0, 0.02)),
            )
        )
    mse, trace = regress_survival(
        solver, cases, seed=1, lr=0.01, epochs=500, l2_lambda=1e-5,
        held_fraction=0.25, freeze_encoder=True,
    )
    targets = np.array([c.target for c in cases[-6:]])
    assert mse < 0.1 * float(np.var(targets))
    mse2, trace2 = regress_survival(
        solver, cases, seed=1, lr=0.01, epochs=500, l2_lambda=1e-5,
        held_fraction=0.25, freeze_encoder=True,
    )
    assert mse == mse2 and trace == trace2


def test_class_weights_inverse_frequency():
    mask = np.zeros((1, 10, 10), dtype=np.uint8)
    mask[0, :2] = 1  # 20 of 100 pixels
    w = compute_class_weights(mask, 2)
    assert w[1] > w[0]
    assert w.mean() == pytest.approx(1.0, rel=1e-6)
