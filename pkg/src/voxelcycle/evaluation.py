"""Metrics, the geometric-ambiguity check, and the experiment harness.

Dice is computed per foreground class (classes absent from both volumes
score 1.0 by convention) and averaged over foreground classes only.  The
S-score runs an auxiliary segmentor, trained exclusively on real data of
the target modality, over a synthetic volume and scores its prediction
against the labels of the volume the synthetic one was translated from.

The ambiguity check wraps a trained generator pair with an exact grid
transform so that the pair stays perfectly cycle-consistent (wrapped cycle
loss equals the original to float-summation accuracy) while its synthetic
volumes are geometrically distorted, which the shape loss detects.
"""

from __future__ import annotations

import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .engine import Tensor, no_grad
from .errors import LabelError, ShapeError, SpecError
from .networks import SegmentorNet, predict_labels
from .phantom import Dataset, PhantomSpec, assert_unpaired, make_dataset
from .trainer import (TrainConfig, TrainState, ada_pregenerate, ada_train,
                      joint_train, pretrain_generators, pretrain_segmentors,
                      train_segmentor)

# ---------------------------------------------------------------------------
# Dice and S-score


@dataclass(frozen=True)
class DiceResult:
    per_class: dict[int, float]
    mean: float


@dataclass(frozen=True)
class SScoreResult:
    mean_dice: float
    per_class: dict[int, float]


def dice(pred: np.ndarray, gt: np.ndarray, class_count: int) -> DiceResult:
    """Per-foreground-class overlap 2|P∩G| / (|P|+|G|)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"dice: shape mismatch {pred.shape} vs {gt.shape}")
    if int(pred.max(initial=0)) >= class_count or int(gt.max(initial=0)) >= class_count:
        raise LabelError(f"dice: labels exceed class count {class_count}")
    if int(pred.min(initial=0)) < 0 or int(gt.min(initial=0)) < 0:
        raise LabelError("dice: negative labels")
    per_class = {}
    for c in range(1, class_count):
        p = pred == c
        g = gt == c
        denom = int(p.sum()) + int(g.sum())
        per_class[c] = 1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom
    return DiceResult(per_class=per_class,
                      mean=float(np.mean(list(per_class.values()))))


def s_score(synthetic: np.ndarray, source_labels: np.ndarray,
            aux_segmentor: SegmentorNet) -> SScoreResult:
    """Dice of the auxiliary segmentor's prediction on a synthetic volume
    against the ground truth of the real volume it was translated from."""
    pred = predict_labels(aux_segmentor, Tensor(np.asarray(synthetic)[None, None]))[0]
    result = dice(pred, source_labels, aux_segmentor.class_count)
    return SScoreResult(mean_dice=result.mean, per_class=result.per_class)


def mean_dice_over(segmentor: SegmentorNet, dataset: Dataset,
                   batch: int = 4) -> float:
    """Mean of per-volume mean foreground Dice (not voxel-pooled)."""
    scores = []
    with no_grad():
        for start in range(0, len(dataset), batch):
            chunk = dataset.samples[start:start + batch]
            volumes = Tensor(np.stack([v for v, _ in chunk])[:, None])
            preds = predict_labels(segmentor, volumes)
            for p, (_, labels) in zip(preds, chunk):
                scores.append(dice(p, labels, segmentor.class_count).mean)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# exact grid transforms


class GridTransform:
    """Bijective voxel permutation acting on the last three axes."""

    def apply(self, arr: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def inverse(self) -> "GridTransform":
        raise NotImplementedError

    def apply_volume_tensor(self, t: Tensor) -> Tensor:
        return Tensor(self.apply(t.data))

    def __repr__(self) -> str:
        return self.describe()

    def describe(self) -> str:
        raise NotImplementedError


class Identity(GridTransform):
    def apply(self, arr):
        return np.asarray(arr).copy()

    def inverse(self):
        return self

    def describe(self):
        return "identity"


class AxisFlip(GridTransform):
    def __init__(self, axis: int):
        if axis not in (0, 1, 2):
            raise SpecError(f"flip axis must be 0, 1, or 2, got {axis}")
        self.axis = axis

    def apply(self, arr):
        arr = np.asarray(arr)
        return np.flip(arr, axis=arr.ndim - 3 + self.axis).copy()

    def inverse(self):
        return self

    def describe(self):
        return f"flip(axis={self.axis})"


class CyclicShift(GridTransform):
    def __init__(self, shifts: tuple[int, int, int]):
        self.shifts = tuple(int(s) for s in shifts)
        if len(self.shifts) != 3:
            raise SpecError(f"need 3 shift amounts, got {shifts}")

    def apply(self, arr):
        arr = np.asarray(arr)
        axes = tuple(arr.ndim - 3 + i for i in range(3))
        return np.roll(arr, self.shifts, axis=axes)

    def inverse(self):
        return CyclicShift(tuple(-s for s in self.shifts))

    def describe(self):
        return f"shift{self.shifts}"


class Rotation90(GridTransform):
    """Quarter turns in the plane of two spatial axes (equal extents)."""

    def __init__(self, axes: tuple[int, int], turns: int = 1):
        if sorted(axes) not in ([0, 1], [0, 2], [1, 2]):
            raise SpecError(f"rotation axes must be two distinct spatial axes, got {axes}")
        self.axes = (int(axes[0]), int(axes[1]))
        self.turns = int(turns) % 4

    def apply(self, arr):
        arr = np.asarray(arr)
        if arr.shape[arr.ndim - 3 + self.axes[0]] != arr.shape[arr.ndim - 3 + self.axes[1]]:
            raise ShapeError("rotation requires equal extents on the rotated axes")
        axes = tuple(arr.ndim - 3 + a for a in self.axes)
        return np.rot90(arr, k=self.turns, axes=axes).copy()

    def inverse(self):
        return Rotation90(self.axes, turns=(4 - self.turns) % 4)

    def describe(self):
        return f"rot90(axes={self.axes}, turns={self.turns})"


class Compose(GridTransform):
    def __init__(self, transforms: list[GridTransform]):
        self.transforms = list(transforms)

    def apply(self, arr):
        for t in self.transforms:
            arr = t.apply(arr)
        return arr

    def inverse(self):
        return Compose([t.inverse() for t in reversed(self.transforms)])

    def describe(self):
        return " . ".join(t.describe() for t in reversed(self.transforms)) or "identity"


def transform_suite(shift: int = 4) -> list[GridTransform]:
    """The exact grid transforms exercised by the ambiguity demonstration."""
    return [
        Identity(),
        AxisFlip(0),
        AxisFlip(1),
        AxisFlip(2),
        CyclicShift((shift, 0, 0)),
        CyclicShift((0, shift, 0)),
        CyclicShift((0, 0, shift)),
        CyclicShift((shift, shift // 2, 0)),
        Rotation90((1, 2)),
        Rotation90((0, 2), turns=3),
        Compose([AxisFlip(0), CyclicShift((0, shift, 0))]),
    ]


# ---------------------------------------------------------------------------
# geometric-ambiguity check


@dataclass(frozen=True)
class AmbiguityReport:
    transform: str
    cycle_original: float
    cycle_wrapped: float
    shape_original: float
    shape_wrapped: float


def _batched(samples, batch):
    for start in range(0, len(samples), batch):
        yield samples[start:start + batch]


def ambiguity_check(gen_ab, gen_ba, seg_a, seg_b, transform: GridTransform,
                    test_a: Dataset, test_b: Dataset,
                    batch: int = 4) -> AmbiguityReport:
    """Compare a generator pair against its transform-wrapped twin.

    The wrapped pair distorts synthetic B volumes by T and undoes T when
    translating back (wrapped_ab = T . gen_ab, wrapped_ba = gen_ba . T^-1),
    so it is exactly as cycle-consistent as the original pair on its own
    (T-warped) view of domain B.  Its shape losses are scored against the
    labels of the volumes each synthetic sample came from, which the
    distortion misaligns.
    """
    t_inv = transform.inverse()

    def wrapped_ab(x: Tensor) -> Tensor:
        return transform.apply_volume_tensor(gen_ab(x))

    def wrapped_ba(y: Tensor) -> Tensor:
        return gen_ba(t_inv.apply_volume_tensor(y))

    cyc_orig_terms = {"a": [], "b": []}
    cyc_wrap_terms = {"a": [], "b": []}
    shape_orig_terms = []
    shape_wrap_terms = []
    with no_grad():
        for chunk in _batched(test_a.samples, batch):
            va = Tensor(np.stack([v for v, _ in chunk])[:, None])
            ya = np.stack([l for _, l in chunk]).astype(np.int64)
            cyc_orig_terms["a"].append(ops.l1_loss(gen_ba(gen_ab(va)), va).item())
            cyc_wrap_terms["a"].append(ops.l1_loss(wrapped_ba(wrapped_ab(va)), va).item())
            shape_orig_terms.append(
                ops.softmax_cross_entropy(seg_b(gen_ab(va)), ya).item())
            shape_wrap_terms.append(
                ops.softmax_cross_entropy(seg_b(wrapped_ab(va)), ya).item())
        for chunk in _batched(test_b.samples, batch):
            vb = Tensor(np.stack([v for v, _ in chunk])[:, None])
            yb = np.stack([l for _, l in chunk]).astype(np.int64)
            cyc_orig_terms["b"].append(ops.l1_loss(gen_ab(gen_ba(vb)), vb).item())
            # the wrapped pair's B domain is the T-warped one
            vb_warp = transform.apply_volume_tensor(vb)
            yb_warp = transform.apply(yb)
            cyc_wrap_terms["b"].append(
                ops.l1_loss(wrapped_ab(wrapped_ba(vb_warp)), vb_warp).item())
            shape_orig_terms.append(
                ops.softmax_cross_entropy(seg_a(gen_ba(vb)), yb).item())
            shape_wrap_terms.append(
                ops.softmax_cross_entropy(seg_a(wrapped_ba(vb_warp)), yb_warp).item())
    cycle_original = float(np.mean(cyc_orig_terms["a"]) + np.mean(cyc_orig_terms["b"]))
    cycle_wrapped = float(np.mean(cyc_wrap_terms["a"]) + np.mean(cyc_wrap_terms["b"]))
    return AmbiguityReport(transform=transform.describe(),
                           cycle_original=cycle_original,
                           cycle_wrapped=cycle_wrapped,
                           shape_original=float(np.mean(shape_orig_terms)),
                           shape_wrapped=float(np.mean(shape_wrap_terms)))


# ---------------------------------------------------------------------------
# experiment harness


PLAN_NAMES = ("sc-ablation", "vary-real-fraction", "vary-synthetic-count",
              "gap-analysis")

DICE_AVERAGING_NOTE = "mean of per-volume means over foreground classes"


@dataclass(frozen=True)
class ExperimentRow:
    plan: str
    condition: str
    fraction_or_count: str
    seed: int
    metric_name: str
    value: float


@dataclass(frozen=True)
class ExperimentSetup:
    """Data layout shared by every experiment plan."""
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    train_per_modality: int = 40
    test_count: int = 20
    fractions: tuple[float, ...] = (0.14, 0.5, 1.0)
    synthetic_fractions: tuple[float, ...] = (0.25, 0.5, 1.0)
    target: str = "a"
    seed_a: int = 10_000
    seed_b: int = 20_000
    seed_test: int = 30_000

    def train_datasets(self) -> tuple[Dataset, Dataset]:
        data_a = make_dataset(self.train_per_modality, self.spec, "A", self.seed_a)
        data_b = make_dataset(self.train_per_modality, self.spec, "B", self.seed_b)
        assert_unpaired(data_a, data_b)
        return data_a, data_b

    def test_datasets(self) -> tuple[Dataset, Dataset]:
        # the test split is fixed across all conditions and seeds
        data_a = make_dataset(self.test_count, self.spec, "A", self.seed_test)
        data_b = make_dataset(self.test_count, self.spec, "B",
                              self.seed_test + self.test_count)
        return data_a, data_b


def labeled_fraction_subset(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Deterministic labeled subset for limited-supervision conditions."""
    count = int(np.ceil(fraction * len(dataset)))
    if count < 1:
        raise SpecError(f"fraction {fraction} selects no volumes from "
                        f"{len(dataset)} available")
    if count > len(dataset):
        raise SpecError(f"fraction {fraction} exceeds available data")
    order = np.random.default_rng([seed, 9]).permutation(len(dataset))
    return dataset.subset(sorted(order[:count]))


def enumerate_plan(plan: str, seeds: list[int],
                   setup: ExperimentSetup) -> list[ExperimentRow]:
    """Dry-run expansion of a plan into its (condition, seed, metric) grid,
    in the exact order run_experiment emits them."""
    rows: list[ExperimentRow] = []
    if plan == "sc-ablation":
        for seed in seeds:
            for condition in ("gamma0", "gamma1"):
                for metric in ("s_score_a2b", "s_score_b2a"):
                    rows.append(ExperimentRow(plan, condition, "", seed, metric, np.nan))
    elif plan == "vary-real-fraction":
        for fraction in setup.fractions:
            for condition in ("baseline_r", "ada_rs", "ours_rs"):
                for seed in seeds:
                    rows.append(ExperimentRow(plan, condition, repr(fraction), seed,
                                              "mean_dice", np.nan))
    elif plan == "vary-synthetic-count":
        for count in setup.synthetic_fractions:
            for condition in ("ada_rs", "ours_rs"):
                for seed in seeds:
                    rows.append(ExperimentRow(plan, condition, repr(count), seed,
                                              "mean_dice", np.nan))
        for seed in seeds:
            rows.append(ExperimentRow(plan, "baseline_r", "0.0", seed,
                                      "mean_dice", np.nan))
    elif plan == "gap-analysis":
        for fraction in setup.fractions:
            for condition in ("baseline_rr", "baseline_rs", "ours_rs"):
                for seed in seeds:
                    rows.append(ExperimentRow(plan, condition, repr(fraction), seed,
                                              "mean_dice", np.nan))
    else:
        raise SpecError(f"unknown experiment plan {plan!r}; "
                        f"choose one of {PLAN_NAMES}")
    return rows


def write_experiment_csv(path, rows: list[ExperimentRow]) -> None:
    lines = [f"# dice averaging: {DICE_AVERAGING_NOTE}",
             "plan,condition,fraction_or_count,seed,metric_name,value"]
    for r in rows:
        lines.append(f"{r.plan},{r.condition},{r.fraction_or_count},{r.seed},"
                     f"{r.metric_name},{r.value!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- training protocols shared by plans and the acceptance suite ------------


def clone_state(state: TrainState) -> TrainState:
    """Independent deep copy via the checkpoint round trip."""
    tmp = tempfile.mkdtemp(prefix="voxelcycle_state_")
    try:
        path = Path(tmp) / "state.vxck"
        state.save(path)
        return TrainState.load(path)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def train_aux_segmentor(config: TrainConfig, which: str, dataset: Dataset,
                        seed_offset: int = 777) -> SegmentorNet:
    """Fresh real-data-only segmentor for S-score evaluation, trained with a
    dedicated seed so it never aliases the system under test."""
    aux_cfg = replace(config, seed=config.seed + seed_offset)
    aux_state = TrainState(aux_cfg)
    train_segmentor(aux_state, which, dataset)
    return aux_state.net(which)


def train_shape_ablation_pair(config: TrainConfig, data_a: Dataset,
                              data_b: Dataset) -> tuple[TrainState, TrainState]:
    """Two systems differing only in shape supervision, with equal generator
    update budgets: the gamma0 arm keeps optimizing adversarial + cycle for
    as many epochs as the gamma1 arm spends in joint training."""
    state = TrainState(replace(config, shape_weight=max(config.shape_weight, 1.0)))
    pretrain_segmentors(state, data_a, data_b)
    pretrain_generators(state, data_a, data_b)
    gamma0 = clone_state(state)
    gamma1 = state
    extra = config.epochs_joint + config.epochs_decay
    pretrain_generators(gamma0, data_a, data_b, epochs=extra)
    joint_train(gamma1, data_a, data_b)
    return gamma0, gamma1


def evaluate_s_scores(state: TrainState, test_a: Dataset, test_b: Dataset,
                      aux_a: SegmentorNet, aux_b: SegmentorNet) -> dict[str, float]:
    """Held-out S-scores for both translation directions."""
    scores_ab = []
    scores_ba = []
    with no_grad():
        for vol, labels in test_a.samples:
            synthetic = state.gen_ab(Tensor(vol[None, None])).data[0, 0]
            scores_ab.append(s_score(synthetic, labels, aux_b).mean_dice)
        for vol, labels in test_b.samples:
            synthetic = state.gen_ba(Tensor(vol[None, None])).data[0, 0]
            scores_ba.append(s_score(synthetic, labels, aux_a).mean_dice)
    return {"s_score_a2b": float(np.mean(scores_ab)),
            "s_score_b2a": float(np.mean(scores_ba))}


def train_tilde_generators(config: TrainConfig, data_a: Dataset,
                           data_b: Dataset) -> TrainState:
    """Generators trained with adversarial + cycle losses only, used as the
    frozen translation source for offline augmentation baselines."""
    state = TrainState(replace(config, shape_weight=0.0))
    pretrain_generators(state, data_a, data_b,
                        epochs=config.epochs_pretrain_gan + config.epochs_joint
                        + config.epochs_decay)
    return state


@dataclass
class SegmentationArms:
    baseline: float
    ada: float
    ours: float


def run_segmentation_comparison(config: TrainConfig, data_a: Dataset,
                                data_b: Dataset, test_target: Dataset,
                                real_fraction: float, target: str = "a",
                                tilde: TrainState | None = None,
                                synth_dir=None,
                                synthetic_fraction: float = 1.0) -> SegmentationArms:
    """Baseline(R) vs ADA(R+S) vs Ours(R+S) for one target modality.

    The label-limited target modality contributes only its labeled subset
    wherever labels are needed; the counter modality keeps all labels.
    """
    target_data = data_a if target == "a" else data_b
    counter_data = data_b if target == "a" else data_a
    which = "seg_a" if target == "a" else "seg_b"
    labeled = labeled_fraction_subset(target_data, real_fraction, config.seed)

    if tilde is None:
        tilde = train_tilde_generators(config, data_a, data_b)

    # Baseline (R): segmentors trained on real data only
    base_state = clone_state(tilde)
    train_segmentor(base_state, which, labeled)
    counter_which = "seg_b" if target == "a" else "seg_a"
    train_segmentor(base_state, counter_which, counter_data)
    baseline_dice = mean_dice_over(base_state.net(which), test_target)

    # ADA (R+S): offline fine-tuning on pre-generated synthetic volumes
    ada_state = clone_state(base_state)
    own_dir = synth_dir is None
    synth_dir = Path(tempfile.mkdtemp(prefix="voxelcycle_ada_")) if own_dir \
        else Path(synth_dir)
    try:
        pool = ada_pregenerate(ada_state, target, counter_data, labeled, synth_dir)
        if synthetic_fraction < 1.0:
            keep = max(1, int(np.ceil(synthetic_fraction * len(pool))))
            pool = pool[:keep]
        ada_train(ada_state, which, labeled, pool)
    finally:
        if own_dir:
            shutil.rmtree(synth_dir, ignore_errors=True)
    ada_dice = mean_dice_over(ada_state.net(which), test_target)

    # Ours (R+S): joint fine-tuning with online synthetic data
    ours_state = clone_state(base_state)
    if target == "a":
        joint_train(ours_state, labeled, counter_data)
    else:
        joint_train(ours_state, counter_data, labeled)
    ours_dice = mean_dice_over(ours_state.net(which), test_target)

    return SegmentationArms(baseline=baseline_dice, ada=ada_dice, ours=ours_dice)


def run_experiment(plan: str, config: TrainConfig, setup: ExperimentSetup,
                   seeds: list[int], out_csv=None) -> list[ExperimentRow]:
    """Execute one of the named plans across seeds and emit result rows in
    the enumerate_plan order."""
    skeleton = enumerate_plan(plan, seeds, setup)
    values: dict[tuple, float] = {}
    test_a, test_b = setup.test_datasets()
    test_target = test_a if setup.target == "a" else test_b

    if plan == "sc-ablation":
        data_a, data_b = setup.train_datasets()
        aux_cfg = replace(config, seed=config.seed + 999)
        aux_a = train_aux_segmentor(aux_cfg, "seg_a", data_a)
        aux_b = train_aux_segmentor(aux_cfg, "seg_b", data_b)
        for seed in seeds:
            seeded = replace(config, seed=seed)
            gamma0, gamma1 = train_shape_ablation_pair(seeded, data_a, data_b)
            for condition, state in (("gamma0", gamma0), ("gamma1", gamma1)):
                scores = evaluate_s_scores(state, test_a, test_b, aux_a, aux_b)
                for metric, value in scores.items():
                    values[(condition, "", seed, metric)] = value
    elif plan in ("vary-real-fraction", "gap-analysis"):
        data_a, data_b = setup.train_datasets()
        for seed in seeds:
            seeded = replace(config, seed=seed)
            tilde = train_tilde_generators(seeded, data_a, data_b)
            for fraction in setup.fractions:
                arms = run_segmentation_comparison(seeded, data_a, data_b,
                                                   test_target, fraction,
                                                   target=setup.target, tilde=tilde)
                if plan == "vary-real-fraction":
                    mapping = {"baseline_r": arms.baseline, "ada_rs": arms.ada,
                               "ours_rs": arms.ours}
                else:
                    # gap analysis reuses the arms with "more real data" as
                    # the baseline_rr comparator at the same budget
                    full = run_segmentation_comparison(
                        seeded, data_a, data_b, test_target,
                        min(1.0, 2 * fraction), target=setup.target, tilde=tilde)
                    mapping = {"baseline_rr": full.baseline, "baseline_rs": arms.ada,
                               "ours_rs": arms.ours}
                for condition, value in mapping.items():
                    values[(condition, repr(fraction), seed, "mean_dice")] = value
    elif plan == "vary-synthetic-count":
        data_a, data_b = setup.train_datasets()
        for seed in seeds:
            seeded = replace(config, seed=seed)
            tilde = train_tilde_generators(seeded, data_a, data_b)
            for count in setup.synthetic_fractions:
                arms = run_segmentation_comparison(seeded, data_a, data_b,
                                                   test_target, 1.0,
                                                   target=setup.target, tilde=tilde,
                                                   synthetic_fraction=count)
                values[("ada_rs", repr(count), seed, "mean_dice")] = arms.ada
                values[("ours_rs", repr(count), seed, "mean_dice")] = arms.ours
                values[("baseline_r", "0.0", seed, "mean_dice")] = arms.baseline
    else:
        raise SpecError(f"unknown experiment plan {plan!r}; choose one of {PLAN_NAMES}")

    rows = [replace(row, value=values[(row.condition, row.fraction_or_count,
                                       row.seed, row.metric_name)])
            for row in skeleton]
    if out_csv is not None:
        write_experiment_csv(out_csv, rows)
    return rows
