"""Three-phase optimization: pretraining, alternating joint training with
online synthetic data, and the offline fine-tuning comparator.

Joint steps alternate strictly: phase 1 updates only the two generators
from adversarial + cycle (+ weighted shape) losses with discriminators and
segmentors frozen; phase 2 updates discriminators on replay-buffer fakes
and segmentors on real + one-hop synthetic + reconstructed-synthetic
samples, with every synthetic input detached so no gradient reaches the
generators.  An epoch walks the larger domain once; the smaller domain
cycles with reshuffling.  All randomness flows from named substreams of
the config seed, so a rerun reproduces the training log byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import kvconfig, ops
from .engine import Tensor, no_grad
from .errors import SpecError
from .losses import (LOSS_REPORT_FIELDS, LossReport, LossWeights,
                     gan_loss_discriminator, gan_loss_generator, segmentation_loss)
from .networks import (DiscriminatorNet, GeneratorNet, Network, SegmentorNet,
                       read_entries, write_entries)
from .optim import Adam
from .phantom import Dataset, save_volume

NET_NAMES = ("gen_ab", "gen_ba", "disc_a", "disc_b", "seg_a", "seg_b")


@dataclass(frozen=True)
class TrainConfig:
    cycle_weight: float = 10.0
    shape_weight: float = 1.0
    lr_seg: float = 2e-4
    lr_gan: float = 2e-4
    seg_beta1: float = 0.9
    seg_beta2: float = 0.999
    gan_beta1: float = 0.5
    gan_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs_pretrain_seg: int = 50
    epochs_pretrain_gan: int = 30
    epochs_joint: int = 25
    epochs_decay: int = 25
    batch_size: int = 2
    early_stop_patience: int = 5
    replay_capacity: int = 50
    validation_fraction: float = 0.2
    base_filters: int = 16
    class_count: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lr_seg <= 0 or self.lr_gan <= 0:
            raise SpecError("learning rates must be positive")
        if self.batch_size < 1:
            raise SpecError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise SpecError("early_stop_patience must be >= 1")
        if self.replay_capacity < 1:
            raise SpecError("replay_capacity must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise SpecError("validation_fraction must lie in [0, 1)")
        if min(self.epochs_pretrain_seg, self.epochs_pretrain_gan,
               self.epochs_joint, self.epochs_decay) < 0:
            raise SpecError("epoch counts must be non-negative")
        if self.cycle_weight < 0 or self.shape_weight < 0:
            raise SpecError("loss weights must be non-negative")

    def weights(self) -> LossWeights:
        return LossWeights(self.cycle_weight, self.shape_weight)

    def to_file(self, path) -> None:
        kvconfig.write_kv_file(path, asdict(self))

    def config_hash(self) -> int:
        return kvconfig.fnv1a32(
            "\n".join(f"{k} = {v}" for k, v in asdict(self).items()))

    @classmethod
    def schema(cls) -> dict[str, type]:
        return {f.name: (int if f.type == "int" else float) for f in fields(cls)}

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        values = kvconfig.coerce(kvconfig.read_kv_file(path), cls.schema(),
                                 "train config")
        return cls(**values)


def lr_schedule(epoch: int, config: TrainConfig) -> tuple[float, float]:
    """Constant through the joint epochs, then linear decay that lands on
    exactly zero at the final decay epoch."""
    if epoch < 0:
        raise SpecError(f"epoch must be >= 0, got {epoch}")
    if epoch < config.epochs_joint:
        factor = 1.0
    elif config.epochs_decay == 0:
        factor = 0.0
    else:
        k = min(epoch - config.epochs_joint, config.epochs_decay - 1)
        factor = 1.0 - (k + 1) / config.epochs_decay
    return config.lr_gan * factor, config.lr_seg * factor


class EarlyStopMonitor:
    """Stop once the best loss has not improved for `patience` epochs."""

    IMPROVEMENT_THRESHOLD = 1e-6

    def __init__(self, patience: int):
        if patience < 1:
            raise SpecError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = np.inf
        self.stale_epochs = 0

    def update(self, loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        if loss < self.best - self.IMPROVEMENT_THRESHOLD:
            self.best = loss
            self.stale_epochs = 0
        else:
            self.stale_epochs += 1
        return self.stale_epochs >= self.patience


class ReplayBuffer:
    """Pool of past synthetic volumes used for discriminator updates.

    Until full, stores and returns the incoming fake.  Once full, each
    incoming fake is returned as-is with probability 0.5; otherwise a
    random stored fake is returned and the incoming one takes its slot.
    """

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise SpecError(f"replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.rng = rng
        self.volumes: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.volumes)

    def query(self, batch: Tensor) -> Tensor:
        out = []
        for i in range(batch.shape[0]):
            incoming = batch.data[i:i + 1].copy()
            if len(self.volumes) < self.capacity:
                self.volumes.append(incoming)
                out.append(incoming)
            elif self.rng.random() < 0.5:
                out.append(incoming)
            else:
                slot = int(self.rng.integers(0, self.capacity))
                out.append(self.volumes[slot])
                self.volumes[slot] = incoming
            assert len(self.volumes) <= self.capacity
        return Tensor(np.concatenate(out, axis=0))


class CyclingSampler:
    """Endless shuffled index stream; reshuffles at each wrap."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> list[int]:
        out = []
        for _ in range(k):
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


def stack_batch(dataset: Dataset, indices) -> tuple[Tensor, np.ndarray]:
    volumes = np.stack([dataset.samples[i][0] for i in indices])[:, None]
    labels = np.stack([dataset.samples[i][1] for i in indices]).astype(np.int64)
    return Tensor(volumes), labels


def split_train_val(dataset: Dataset, fraction: float,
                    rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Deterministic validation split over anatomies."""
    n = len(dataset)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val >= n:
        return dataset, dataset.subset([])
    order = rng.permutation(n)
    return dataset.subset(sorted(order[n_val:])), dataset.subset(sorted(order[:n_val]))


class TrainState:
    """All six networks, their optimizers, buffers, counters, and RNGs."""

    def __init__(self, config: TrainConfig):
        self.config = config
        f, c = config.base_filters, config.class_count
        self.gen_ab = GeneratorNet(f)
        self.gen_ba = GeneratorNet(f)
        self.disc_a = DiscriminatorNet(f)
        self.disc_b = DiscriminatorNet(f)
        self.seg_a = SegmentorNet(f, c)
        self.seg_b = SegmentorNet(f, c)
        for i, name in enumerate(NET_NAMES):
            self.net(name).init_parameters(np.random.SeedSequence([config.seed, 10 + i]))
        self.opts: dict[str, Adam] = {}
        for name in ("gen_ab", "gen_ba", "disc_a", "disc_b"):
            self.opts[name] = Adam(self.net(name).parameters(), lr=config.lr_gan,
                                   beta1=config.gan_beta1, beta2=config.gan_beta2,
                                   eps=config.adam_eps)
        for name in ("seg_a", "seg_b"):
            self.opts[name] = Adam(self.net(name).parameters(), lr=config.lr_seg,
                                   beta1=config.seg_beta1, beta2=config.seg_beta2,
                                   eps=config.adam_eps)
        self.buffer_a = ReplayBuffer(config.replay_capacity,
                                     np.random.default_rng([config.seed, 2]))
        self.buffer_b = ReplayBuffer(config.replay_capacity,
                                     np.random.default_rng([config.seed, 3]))
        self.rng_data = np.random.default_rng([config.seed, 1])
        self.step = 0
        self.joint_epoch = 0
        self.best_validation = np.inf

    def net(self, name: str) -> Network:
        return getattr(self, name)

    def nets(self) -> dict[str, Network]:
        return {name: self.net(name) for name in NET_NAMES}

    def zero_all_grads(self) -> None:
        for net in self.nets().values():
            net.zero_grad()

    def params_snapshot(self, names) -> dict[str, bytes]:
        return {f"{n}.{p}": self.net(n).params[p].data.tobytes()
                for n in names for p in self.net(n).params}

    # -- full-state checkpointing ------------------------------------------

    def save(self, path) -> None:
        entries: dict[str, np.ndarray] = {}
        for key, value in asdict(self.config).items():
            entries[f"config/{key}"] = np.array([float(value)])
        for name in NET_NAMES:
            for pname, p in self.net(name).params.items():
                entries[f"net/{name}/{pname}"] = p.data
            for sname, arr in self.opts[name].state_arrays().items():
                entries[f"opt/{name}/{sname}"] = arr
        entries["counter/step"] = np.array([float(self.step)])
        entries["counter/joint_epoch"] = np.array([float(self.joint_epoch)])
        entries["counter/best_validation"] = np.array([float(self.best_validation)])
        for tag, buf in (("buffer_a", self.buffer_a), ("buffer_b", self.buffer_b)):
            for i, vol in enumerate(buf.volumes):
                entries[f"{tag}/{i}"] = vol.reshape(-1)
            entries[f"{tag}/shape"] = (np.array([float(s) for s in buf.volumes[0].shape])
                                       if buf.volumes else np.zeros(0))
        entries["rng/data"] = _pack_rng(self.rng_data)
        entries["rng/buffer_a"] = _pack_rng(self.buffer_a.rng)
        entries["rng/buffer_b"] = _pack_rng(self.buffer_b.rng)
        write_entries(path, entries)

    @classmethod
    def load(cls, path) -> "TrainState":
        entries = read_entries(path)
        values = {}
        for f in fields(TrainConfig):
            raw = float(entries[f"config/{f.name}"][0])
            values[f.name] = int(raw) if f.type == "int" else raw
        state = cls(TrainConfig(**values))
        for name in NET_NAMES:
            net = state.net(name)
            for pname in net.params:
                net.params[pname] = Tensor(entries[f"net/{name}/{pname}"],
                                           requires_grad=True)
            state.opts[name].params = net.parameters()
            opt_arrays = {sname.split("/", 2)[2]: arr for sname, arr in entries.items()
                          if sname.startswith(f"opt/{name}/")}
            state.opts[name].load_state_arrays(opt_arrays)
        state.step = int(entries["counter/step"][0])
        state.joint_epoch = int(entries["counter/joint_epoch"][0])
        state.best_validation = float(entries["counter/best_validation"][0])
        for tag, buf in (("buffer_a", state.buffer_a), ("buffer_b", state.buffer_b)):
            shape = tuple(int(s) for s in entries[f"{tag}/shape"])
            buf.volumes = []
            i = 0
            while f"{tag}/{i}" in entries:
                buf.volumes.append(entries[f"{tag}/{i}"].reshape(shape))
                i += 1
        state.rng_data = _unpack_rng(entries["rng/data"])
        state.buffer_a.rng = _unpack_rng(entries["rng/buffer_a"])
        state.buffer_b.rng = _unpack_rng(entries["rng/buffer_b"])
        return state


def _pack_rng(rng: np.random.Generator) -> np.ndarray:
    """Bit-pack a PCG64 generator state into six raw float64 slots."""
    st = rng.bit_generator.state
    words = []
    for value in (st["state"]["state"], st["state"]["inc"]):
        words.extend([(value >> 64) & (2 ** 64 - 1), value & (2 ** 64 - 1)])
    words.append(int(st["has_uint32"]))
    words.append(int(st["uinteger"]))
    raw = struct.pack("<6Q", *words)
    return np.frombuffer(raw, dtype="<f8").copy()


def _unpack_rng(arr: np.ndarray) -> np.random.Generator:
    words = struct.unpack("<6Q", arr.astype("<f8").tobytes())
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (words[0] << 64) | words[1],
                  "inc": (words[2] << 64) | words[3]},
        "has_uint32": int(words[4]),
        "uinteger": int(words[5]),
    }
    return rng


# ---------------------------------------------------------------------------
# single steps


def generator_phase(state: TrainState, vol_a: Tensor, labels_a: np.ndarray,
                    vol_b: Tensor, labels_b: np.ndarray,
                    lr_gan: float) -> dict:
    """Joint-step phase 1: update both generators; everything else frozen."""
    weights = state.config.weights()
    for name in ("gen_ab", "gen_ba"):
        state.opts[name].lr = lr_gan
    state.zero_all_grads()
    fake_b = state.gen_ab(vol_a)
    fake_a = state.gen_ba(vol_b)
    rec_a = state.gen_ba(fake_b)
    rec_b = state.gen_ab(fake_a)
    adv_a = gan_loss_generator(state.disc_a(fake_a))
    adv_b = gan_loss_generator(state.disc_b(fake_b))
    cyc = ops.l1_loss(rec_a, vol_a) + ops.l1_loss(rec_b, vol_b)
    total = adv_a + adv_b + cyc * weights.cycle_weight
    shape_value = 0.0
    if weights.shape_weight > 0:
        shp = (ops.softmax_cross_entropy(state.seg_b(fake_b), labels_a)
               + ops.softmax_cross_entropy(state.seg_a(fake_a), labels_b))
        total = total + shp * weights.shape_weight
        shape_value = shp.item()
    total.backward()
    state.opts["gen_ab"].step()
    state.opts["gen_ba"].step()
    state.zero_all_grads()
    return {
        "fake_a": fake_a.detach(), "fake_b": fake_b.detach(),
        "rec_a": rec_a.detach(), "rec_b": rec_b.detach(),
        "gan_g_A": adv_a.item(), "gan_g_B": adv_b.item(),
        "cycle": cyc.item(), "shape": shape_value, "total": total.item(),
    }


def critic_phase(state: TrainState, vol_a: Tensor, labels_a: np.ndarray,
                 vol_b: Tensor, labels_b: np.ndarray, produced: dict,
                 lr_gan: float, lr_seg: float,
                 audit: dict | None = None) -> dict:
    """Joint-step phase 2: update discriminators (replay-buffer fakes) and
    segmentors (real + one-hop + reconstructed samples, all detached);
    generators frozen."""
    for name in ("disc_a", "disc_b"):
        state.opts[name].lr = lr_gan
    for name in ("seg_a", "seg_b"):
        state.opts[name].lr = lr_seg

    state.zero_all_grads()
    d_a = gan_loss_discriminator(state.disc_a(vol_a),
                                 state.disc_a(state.buffer_a.query(produced["fake_a"])))
    d_a.backward()
    state.opts["disc_a"].step()
    d_b = gan_loss_discriminator(state.disc_b(vol_b),
                                 state.disc_b(state.buffer_b.query(produced["fake_b"])))
    d_b.backward()
    state.opts["disc_b"].step()

    state.zero_all_grads()
    batch_a = [(vol_a, labels_a), (produced["fake_a"], labels_b),
               (produced["rec_a"], labels_a)]
    batch_b = [(vol_b, labels_b), (produced["fake_b"], labels_a),
               (produced["rec_b"], labels_b)]
    if audit is not None:
        audit["seg_a_batch"] = [(v.shape, l.shape) for v, l in batch_a]
        audit["seg_b_batch"] = [(v.shape, l.shape) for v, l in batch_b]
    seg_a_loss = segmentation_loss(state.seg_a, batch_a)
    seg_a_loss.backward()
    state.opts["seg_a"].step()
    seg_b_loss = segmentation_loss(state.seg_b, batch_b)
    seg_b_loss.backward()
    state.opts["seg_b"].step()
    state.zero_all_grads()
    return {"gan_d_A": d_a.item(), "gan_d_B": d_b.item(),
            "seg_A": seg_a_loss.item(), "seg_B": seg_b_loss.item()}


def joint_step(state: TrainState, vol_a: Tensor, labels_a: np.ndarray,
               vol_b: Tensor, labels_b: np.ndarray,
               lr_gan: float | None = None,
               lr_seg: float | None = None,
               audit: dict | None = None) -> LossReport:
    """One alternating update of the whole system: generator phase, then
    discriminator/segmentor phase; exactly one Adam step per network."""
    cfg = state.config
    lr_gan = cfg.lr_gan if lr_gan is None else lr_gan
    lr_seg = cfg.lr_seg if lr_seg is None else lr_seg
    produced = generator_phase(state, vol_a, labels_a, vol_b, labels_b, lr_gan)
    critic = critic_phase(state, vol_a, labels_a, vol_b, labels_b, produced,
                          lr_gan, lr_seg, audit=audit)
    state.step += 1
    return LossReport(gan_g_A=produced["gan_g_A"], gan_g_B=produced["gan_g_B"],
                      gan_d_A=critic["gan_d_A"], gan_d_B=critic["gan_d_B"],
                      cycle=produced["cycle"], shape=produced["shape"],
                      seg_A=critic["seg_A"], seg_B=critic["seg_B"],
                      total=produced["total"])


def generator_step(state: TrainState, vol_a: Tensor, vol_b: Tensor,
                   lr: float | None = None) -> LossReport:
    """Pretraining step: adversarial + cycle only (shape weight forced 0),
    then discriminator updates from the replay buffers."""
    cfg = state.config
    for name in ("gen_ab", "gen_ba", "disc_a", "disc_b"):
        state.opts[name].lr = cfg.lr_gan if lr is None else lr

    state.zero_all_grads()
    fake_b = state.gen_ab(vol_a)
    fake_a = state.gen_ba(vol_b)
    rec_a = state.gen_ba(fake_b)
    rec_b = state.gen_ab(fake_a)
    adv_a = gan_loss_generator(state.disc_a(fake_a))
    adv_b = gan_loss_generator(state.disc_b(fake_b))
    cyc = ops.l1_loss(rec_a, vol_a) + ops.l1_loss(rec_b, vol_b)
    total = adv_a + adv_b + cyc * cfg.cycle_weight
    total.backward()
    state.opts["gen_ab"].step()
    state.opts["gen_ba"].step()

    state.zero_all_grads()
    d_a = gan_loss_discriminator(state.disc_a(vol_a),
                                 state.disc_a(state.buffer_a.query(fake_a.detach())))
    d_a.backward()
    state.opts["disc_a"].step()
    d_b = gan_loss_discriminator(state.disc_b(vol_b),
                                 state.disc_b(state.buffer_b.query(fake_b.detach())))
    d_b.backward()
    state.opts["disc_b"].step()
    state.zero_all_grads()

    state.step += 1
    return LossReport(gan_g_A=adv_a.item(), gan_g_B=adv_b.item(),
                      gan_d_A=d_a.item(), gan_d_B=d_b.item(),
                      cycle=cyc.item(), total=total.item())


def segmentor_step(state: TrainState, which: str,
                   batch: list[tuple[Tensor, np.ndarray]],
                   lr: float | None = None) -> float:
    """One cross-entropy update of a single segmentor."""
    opt = state.opts[which]
    opt.lr = state.config.lr_seg if lr is None else lr
    net = state.net(which)
    net.zero_grad()
    loss = segmentation_loss(net, batch)
    loss.backward()
    opt.step()
    net.zero_grad()
    state.step += 1
    return loss.item()


def ada_step(state: TrainState, which: str, real_batch, synthetic_batch,
             lr: float | None = None) -> float:
    """Offline fine-tuning step on a half-real, half-synthetic batch.

    Generators are not involved at all: the synthetic volumes were
    pre-generated, so this is a plain segmentor update.
    """
    return segmentor_step(state, which, list(real_batch) + list(synthetic_batch), lr=lr)


# ---------------------------------------------------------------------------
# training loops


def validation_seg_loss(segmentor: SegmentorNet, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return np.nan
    with no_grad():
        volumes, labels = stack_batch(dataset, range(len(dataset)))
        return ops.softmax_cross_entropy(segmentor(volumes), labels).item()


def train_segmentor(state: TrainState, which: str, dataset: Dataset,
                    epochs: int | None = None, log: list | None = None,
                    lr: float | None = None) -> dict[str, list[float]]:
    """Cross-entropy training of one segmentor on real data, with early
    stopping on a seed-fixed validation split of the anatomies."""
    cfg = state.config
    if len(dataset) == 0:
        raise SpecError("segmentor training needs a non-empty dataset")
    epochs = cfg.epochs_pretrain_seg if epochs is None else epochs
    val_rng = np.random.default_rng([cfg.seed, 4, 0 if which == "seg_a" else 1])
    train_ds, val_ds = split_train_val(dataset, cfg.validation_fraction, val_rng)
    monitor = EarlyStopMonitor(cfg.early_stop_patience)
    history: dict[str, list[float]] = {"train": [], "val": []}
    for _ in range(epochs):
        order = state.rng_data.permutation(len(train_ds))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            indices = order[start:start + cfg.batch_size]
            volumes, labels = stack_batch(train_ds, indices)
            loss = segmentor_step(state, which, [(volumes, labels)], lr=lr)
            epoch_losses.append(loss)
            if log is not None:
                report = LossReport(**{("seg_A" if which == "seg_a" else "seg_B"): loss})
                log.append((state.step, report))
        history["train"].append(float(np.mean(epoch_losses)))
        if len(val_ds) > 0:
            val = validation_seg_loss(state.net(which), val_ds)
            history["val"].append(val)
            if monitor.update(val):
                break
    return history


def pretrain_segmentors(state: TrainState, data_a: Dataset, data_b: Dataset,
                        epochs: int | None = None,
                        log: list | None = None) -> dict[str, list[float]]:
    """Train both segmentors on real data of their own modality."""
    if len(data_a) == 0 or len(data_b) == 0:
        raise SpecError("pretraining needs non-empty datasets for both modalities")
    hist_a = train_segmentor(state, "seg_a", data_a, epochs=epochs, log=log)
    hist_b = train_segmentor(state, "seg_b", data_b, epochs=epochs, log=log)
    return {"seg_a": hist_a["train"], "seg_b": hist_b["train"],
            "val_a": hist_a["val"], "val_b": hist_b["val"]}


def pretrain_generators(state: TrainState, data_a: Dataset, data_b: Dataset,
                        epochs: int | None = None,
                        log: list | None = None) -> list[float]:
    """Adversarial + cycle pretraining of the generator/discriminator pairs
    (shape weight forced to zero)."""
    cfg = state.config
    if len(data_a) == 0 or len(data_b) == 0:
        raise SpecError("pretraining needs non-empty datasets for both modalities")
    epochs = cfg.epochs_pretrain_gan if epochs is None else epochs
    cycle_per_epoch = []
    small_sampler = None
    for _ in range(epochs):
        reports, small_sampler, logged = _paired_epoch(
            state, data_a, data_b,
            lambda va, la, vb, lb: generator_step(state, va, vb),
            small_sampler)
        cycle_per_epoch.append(float(np.mean([r.cycle for r in reports])))
        if log is not None:
            log.extend(logged)
    return cycle_per_epoch


def _paired_epoch(state: TrainState, data_a: Dataset, data_b: Dataset, step_fn,
                  small_sampler: CyclingSampler | None):
    """One epoch over the larger domain; the smaller one cycles/reshuffles."""
    cfg = state.config
    large_is_a = len(data_a) >= len(data_b)
    large, small = (data_a, data_b) if large_is_a else (data_b, data_a)
    if small_sampler is None:
        small_sampler = CyclingSampler(len(small), np.random.default_rng([cfg.seed, 6]))
    order = state.rng_data.permutation(len(large))
    reports = []
    logged = []
    for start in range(0, len(order), cfg.batch_size):
        large_idx = order[start:start + cfg.batch_size]
        small_idx = small_sampler.take(len(large_idx))
        vol_l, lab_l = stack_batch(large, large_idx)
        vol_s, lab_s = stack_batch(small, small_idx)
        if large_is_a:
            report = step_fn(vol_l, lab_l, vol_s, lab_s)
        else:
            report = step_fn(vol_s, lab_s, vol_l, lab_l)
        reports.append(report)
        logged.append((state.step, report))
    return reports, small_sampler, logged


def joint_train(state: TrainState, data_a: Dataset, data_b: Dataset,
                epochs_joint: int | None = None, epochs_decay: int | None = None,
                log: list | None = None) -> dict[str, list[float]]:
    """Alternating joint training with the learning-rate schedule and early
    stopping on held-out segmentation loss."""
    cfg = state.config
    epochs_joint = cfg.epochs_joint if epochs_joint is None else epochs_joint
    epochs_decay = cfg.epochs_decay if epochs_decay is None else epochs_decay
    schedule_cfg = TrainConfig(**{**asdict(cfg), "epochs_joint": epochs_joint,
                                  "epochs_decay": epochs_decay})
    val_rng = np.random.default_rng([cfg.seed, 4])
    train_a, val_a = split_train_val(data_a, cfg.validation_fraction, val_rng)
    train_b, val_b = split_train_val(data_b, cfg.validation_fraction, val_rng)
    monitor = EarlyStopMonitor(cfg.early_stop_patience)
    history: dict[str, list[float]] = {"val_seg": [], "cycle": [], "shape": []}
    small_sampler = None

    for epoch in range(epochs_joint + epochs_decay):
        lr_gan, lr_seg = lr_schedule(epoch, schedule_cfg)
        if lr_gan == 0.0 and lr_seg == 0.0:
            break

        def step_fn(va, la, vb, lb):
            return joint_step(state, va, la, vb, lb, lr_gan=lr_gan, lr_seg=lr_seg)

        reports, small_sampler, logged = _paired_epoch(state, train_a, train_b,
                                                       step_fn, small_sampler)
        if log is not None:
            log.extend(logged)
        history["cycle"].append(float(np.mean([r.cycle for r in reports])))
        history["shape"].append(float(np.mean([r.shape for r in reports])))
        state.joint_epoch += 1
        val_terms = [validation_seg_loss(state.seg_a, val_a),
                     validation_seg_loss(state.seg_b, val_b)]
        val_terms = [v for v in val_terms if np.isfinite(v)]
        if val_terms:
            val = float(np.mean(val_terms))
            history["val_seg"].append(val)
            state.best_validation = min(state.best_validation, val)
            if monitor.update(val):
                break
    return history


# ---------------------------------------------------------------------------
# offline (ADA) pipeline


def ada_pregenerate(state: TrainState, target: str, counter_data: Dataset,
                    target_data: Dataset, out_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    """Build the offline synthetic pool for one target modality.

    One-hop volumes translate the counter modality into the target (keeping
    the counter volume's labels); reconstructed volumes round-trip target
    volumes through both generators (keeping the target volume's labels).
    Everything is written to disk and read back, which is what separates
    this pipeline from online training.
    """
    if target not in ("a", "b"):
        raise SpecError(f"target must be 'a' or 'b', got {target!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    into_target = state.gen_ba if target == "a" else state.gen_ab
    out_of_target = state.gen_ab if target == "a" else state.gen_ba
    cc = state.config.class_count
    paths = []
    with no_grad():
        for i, (vol, labels) in enumerate(counter_data.samples):
            one_hop = into_target(Tensor(vol[None, None]))
            paths.append((f"onehop_{i:04d}", one_hop.data[0, 0], labels))
        for i, (vol, labels) in enumerate(target_data.samples):
            reconstructed = into_target(out_of_target(Tensor(vol[None, None])))
            paths.append((f"recon_{i:04d}", reconstructed.data[0, 0], labels))
    pool = []
    from .phantom import load_volume
    for name, volume, labels in paths:
        vol_path = out_dir / f"{name}.vvol"
        lab_path = out_dir / f"{name}_labels.vvol"
        save_volume(vol_path, volume)
        save_volume(lab_path, labels, class_count=cc)
        vol_back, _ = load_volume(vol_path)
        lab_back, _ = load_volume(lab_path)
        pool.append((vol_back, lab_back))
    return pool


def ada_train(state: TrainState, which: str, real_data: Dataset,
              synthetic_pool: list[tuple[np.ndarray, np.ndarray]],
              epochs: int | None = None, log: list | None = None) -> list[float]:
    """Fine-tune one segmentor on 50/50 real/synthetic batches.

    Real samples fill ceil(batch/2) slots; generators stay untouched.
    An epoch is one pass over the larger of the two pools.
    """
    cfg = state.config
    if not synthetic_pool:
        raise SpecError("ADA fine-tuning needs a non-empty synthetic pool")
    epochs = cfg.epochs_joint + cfg.epochs_decay if epochs is None else epochs
    real_count = (cfg.batch_size + 1) // 2
    synth_count = cfg.batch_size - real_count
    rng = np.random.default_rng([cfg.seed, 5])
    real_sampler = CyclingSampler(len(real_data), rng)
    synth_sampler = CyclingSampler(len(synthetic_pool),
                                   np.random.default_rng([cfg.seed, 5, 1]))
    steps_per_epoch = max(
        -(-len(real_data) // max(real_count, 1)),
        -(-len(synthetic_pool) // max(synth_count, 1)) if synth_count else 0,
    )
    epoch_losses = []
    for epoch in range(epochs):
        lr_gan, lr_seg = lr_schedule(epoch, cfg)
        if lr_seg == 0.0:
            break
        losses_this_epoch = []
        for _ in range(steps_per_epoch):
            real_idx = real_sampler.take(real_count)
            real_vols, real_labs = stack_batch(real_data, real_idx)
            batch = [(real_vols, real_labs)]
            if synth_count:
                synth_idx = synth_sampler.take(synth_count)
                vols = np.stack([synthetic_pool[i][0] for i in synth_idx])[:, None]
                labs = np.stack([synthetic_pool[i][1] for i in synth_idx]).astype(np.int64)
                batch.append((Tensor(vols), labs))
            loss = ada_step(state, which, batch[:1], batch[1:], lr=lr_seg)
            losses_this_epoch.append(loss)
            if log is not None:
                report = LossReport(**{("seg_A" if which == "seg_a" else "seg_B"): loss})
                log.append((state.step, report))
        epoch_losses.append(float(np.mean(losses_this_epoch)))
    return epoch_losses


# ---------------------------------------------------------------------------
# training log


def write_train_log(path, rows: list[tuple[int, LossReport]]) -> None:
    """CSV with the step column followed by the nine loss fields."""
    lines = ["step," + ",".join(LOSS_REPORT_FIELDS)]
    for step, report in rows:
        lines.append(str(step) + "," + ",".join(repr(v) for v in report.as_row()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
