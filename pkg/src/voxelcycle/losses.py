"""Loss terms for translation/segmentation training and the full objective.

The adversarial term is the least-squares form: generators are scored by
mean((D(fake) - 1)^2), discriminators by 0.5 * [mean((D(real) - 1)^2) +
mean(D(fake)^2)].  Cycle reconstruction uses the voxelwise L1 mean in both
directions; shape consistency scores the segmentation of each translated
volume against the source volume's labels.  The generator total is

    total_G = gan_g_A + gan_g_B + cycle_weight * cycle + shape_weight * shape

with discriminator and segmentor losses reported separately because they
are optimized in the alternating phase.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .engine import Tensor
from .errors import SpecError
from .networks import GeneratorNet, SegmentorNet


@dataclass(frozen=True)
class LossWeights:
    cycle_weight: float = 10.0
    shape_weight: float = 1.0

    def __post_init__(self):
        if self.cycle_weight < 0 or self.shape_weight < 0:
            raise SpecError(f"loss weights must be non-negative, got {self}")


# CSV column names are a wire format: keep the order and spelling stable.
LOSS_REPORT_FIELDS = ("gan_g_A", "gan_g_B", "gan_d_A", "gan_d_B",
                      "cycle", "shape", "seg_A", "seg_B", "total")


@dataclass
class LossReport:
    gan_g_A: float = 0.0
    gan_g_B: float = 0.0
    gan_d_A: float = 0.0
    gan_d_B: float = 0.0
    cycle: float = 0.0
    shape: float = 0.0
    seg_A: float = 0.0
    seg_B: float = 0.0
    total: float = 0.0

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in LOSS_REPORT_FIELDS]

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise SpecError(f"loss report field {f.name} is not finite: {v}")


def gan_loss_generator(disc_logits_on_fake: Tensor) -> Tensor:
    """Least-squares generator objective: push patch logits toward 1."""
    return ops.mse_loss(disc_logits_on_fake, 1.0)


def gan_loss_discriminator(disc_logits_real: Tensor, disc_logits_fake: Tensor) -> Tensor:
    """Least-squares discriminator objective, halved per convention."""
    real_term = ops.mse_loss(disc_logits_real, 1.0)
    fake_term = ops.mse_loss(disc_logits_fake, 0.0)
    return (real_term + fake_term) * 0.5


def cycle_loss(gen_ab, gen_ba, vol_a: Tensor, vol_b: Tensor) -> Tensor:
    """L1 reconstruction through both translation round trips.

    Gradients flow through both generators twice (once per direction).
    """
    rec_a = gen_ba(gen_ab(vol_a))
    rec_b = gen_ab(gen_ba(vol_b))
    return ops.l1_loss(rec_a, vol_a) + ops.l1_loss(rec_b, vol_b)


def shape_loss(seg_a, seg_b, gen_ab, gen_ba,
               vol_a: Tensor, labels_a: np.ndarray,
               vol_b: Tensor, labels_b: np.ndarray) -> Tensor:
    """Cross-entropy of each translated volume's segmentation against the
    source volume's labels: the translated anatomy must stay segmentable
    as the anatomy it came from."""
    fake_b = gen_ab(vol_a)
    fake_a = gen_ba(vol_b)
    return (ops.softmax_cross_entropy(seg_b(fake_b), labels_a)
            + ops.softmax_cross_entropy(seg_a(fake_a), labels_b))


def segmentation_loss(seg, batch: list[tuple[Tensor, np.ndarray]]) -> Tensor:
    """Mean cross-entropy over a batch of (volume, labels) pairs.

    The batch may mix real, synthetic, and reconstructed-synthetic samples;
    samples are stacked so every voxel weighs equally.
    """
    if not batch:
        raise SpecError("segmentation_loss needs a non-empty batch")
    volumes = Tensor(np.concatenate([v.data for v, _ in batch], axis=0))
    labels = np.concatenate([np.asarray(l) for _, l in batch], axis=0)
    # stacking real copies would detach everything; single-source batches
    # with live gradients must go through the graph, so re-route:
    if any(v.requires_grad for v, _ in batch):
        total = None
        for vol, lab in batch:
            term = ops.softmax_cross_entropy(seg(vol), lab) * (vol.shape[0] / volumes.shape[0])
            total = term if total is None else total + term
        return total
    return ops.softmax_cross_entropy(seg(volumes), labels)


def full_objective(gen_ab: GeneratorNet, gen_ba: GeneratorNet,
                   disc_a, disc_b, seg_a: SegmentorNet, seg_b: SegmentorNet,
                   vol_a: Tensor, labels_a: np.ndarray,
                   vol_b: Tensor, labels_b: np.ndarray,
                   weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Assemble every term of the training objective in one pass.

    Returns the differentiable generator total and a report carrying all
    nine logged values.  Discriminator losses here use the current fakes
    directly (the trainer substitutes replay-buffer fakes during training),
    and segmentor losses use the real + synthetic + reconstructed batch
    with synthetic inputs detached.  With shape_weight == 0 the shape term
    is skipped entirely, so no gradient can reach the segmentors.
    """
    fake_b = gen_ab(vol_a)
    fake_a = gen_ba(vol_b)
    rec_a = gen_ba(fake_b)
    rec_b = gen_ab(fake_a)

    gan_g_b = gan_loss_generator(disc_b(fake_b))   # generator producing B
    gan_g_a = gan_loss_generator(disc_a(fake_a))   # generator producing A
    cyc = ops.l1_loss(rec_a, vol_a) + ops.l1_loss(rec_b, vol_b)

    total = gan_g_a + gan_g_b + cyc * weights.cycle_weight
    if weights.shape_weight > 0:
        shp = (ops.softmax_cross_entropy(seg_b(fake_b), labels_a)
               + ops.softmax_cross_entropy(seg_a(fake_a), labels_b))
        total = total + shp * weights.shape_weight
        shape_value = shp.item()
    else:
        shape_value = 0.0

    gan_d_a = gan_loss_discriminator(disc_a(vol_a), disc_a(fake_a.detach()))
    gan_d_b = gan_loss_discriminator(disc_b(vol_b), disc_b(fake_b.detach()))
    seg_a_loss = segmentation_loss(seg_a, [(vol_a, labels_a),
                                           (fake_a.detach(), labels_b),
                                           (rec_a.detach(), labels_a)])
    seg_b_loss = segmentation_loss(seg_b, [(vol_b, labels_b),
                                           (fake_b.detach(), labels_a),
                                           (rec_b.detach(), labels_b)])

    report = LossReport(
        gan_g_A=gan_g_a.item(), gan_g_B=gan_g_b.item(),
        gan_d_A=gan_d_a.item(), gan_d_B=gan_d_b.item(),
        cycle=cyc.item(), shape=shape_value,
        seg_A=seg_a_loss.item(), seg_B=seg_b_loss.item(),
        total=total.item(),
    )
    return total, report
