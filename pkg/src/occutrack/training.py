"""Training curricula: unsupervised future prediction, semantic transfer,
and the one-shot baseline classifier.

The unsupervised stage unrolls the network over 40-frame minibatches in
two show/predict cycles: 10 frames of real input with no loss, then 10
frames of empty input where the predicted occupancy is scored against
the observed part of each future frame.  The semantic stage reuses the
same schedule but supervises the class head with future visible labels,
by default leaving the recurrent parameters frozen.

Minibatches are data-parallel in principle (gradients merge by
addition); this implementation runs them sequentially, which also makes
fixed-seed runs byte-reproducible.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import engine, network
from .engine import Graph, Tensor
from .sim import IGNORE_LABEL, Episode

DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending minibatch id."""


@dataclass(frozen=True)
class TrainConfig:
    minibatch_len: int = 40
    show: int = 10
    predict: int = 10
    cycles: int = 2
    learning_rate: float = 1e-3
    optimizer: str = "adaptive-moment"
    epochs: int = 6
    grad_clip: float = 5.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.cycles * (self.show + self.predict) != self.minibatch_len:
            raise ValueError(
                f"{self.cycles} cycles of {self.show}+{self.predict} frames do not "
                f"tile a minibatch of {self.minibatch_len}"
            )
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")


def minibatch_schedule(config: TrainConfig) -> list:
    """Per-frame roles: False = show (real input), True = predict (empty input)."""
    cycle = [False] * config.show + [True] * config.predict
    return cycle * config.cycles


def _episode_minibatches(episodes, length):
    """Split episodes into consecutive windows of exactly ``length`` frames."""
    out = []
    for ep_idx, ep in enumerate(episodes):
        if len(ep) < length:
            raise ValueError(f"episode {ep_idx} has {len(ep)} < {length} frames")
        for start in range(0, len(ep) - length + 1, length):
            out.append((ep_idx, start, ep.frames[start:start + length]))
    return out


def unsupervised_occupancy_step(net: network.TrackingNetwork, frames,
                                config: TrainConfig):
    """One BPTT pass over a 40-frame slice; returns (loss, pre-clip grad norm).

    Show frames feed the true observation and contribute no loss; predict
    frames feed the empty observation and score the predicted occupancy
    against the observed part of the real frame.  Gradients are
    accumulated through the whole unroll, then clipped to the configured
    global norm.  The caller applies the optimizer step.
    """
    schedule = minibatch_schedule(config)
    if len(frames) != len(schedule):
        raise ValueError(f"need exactly {len(schedule)} frames, got {len(frames)}")
    dtype = DTYPES[config.dtype]
    with Graph() as g:
        h = net.zero_state()
        total = None
        n_scored = 0
        for is_predict, frame in zip(schedule, frames):
            x = net.encode_observation(None if is_predict else frame.observation)
            h, y_hat, _ = net.forward_step(h, x)
            if is_predict:
                target = Tensor(frame.occupancy.astype(dtype))
                mask = Tensor(frame.visibility.astype(dtype))
                loss_t = engine.masked_bce_loss(y_hat, target, mask)
                total = loss_t if total is None else engine.elem_add(total, loss_t)
                n_scored += 1
        total = engine.scalar_mul(total, 1.0 / n_scored)
        g.backward(total)
    grad_norm = net.store.clip_grads(config.grad_clip)
    return total.item(), grad_norm


class MetricsWriter:
    """Append-only CSV stream: epoch,minibatch,loss,grad_norm,wall_ms."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self._fh = open(self.path, "a", newline="")
        self._csv = csv.writer(self._fh)
        if new:
            self._csv.writerow(["epoch", "minibatch", "loss", "grad_norm", "wall_ms"])

    def row(self, epoch, minibatch, loss, grad_norm, wall_ms):
        self._csv.writerow(
            [epoch, minibatch, f"{loss:.6f}", f"{grad_norm:.6f}", f"{wall_ms:.1f}"]
        )
        self._fh.flush()

    def close(self):
        self._fh.close()


def _checkpoint_paths(out_dir, epoch):
    out = Path(out_dir)
    return out / f"checkpoint_ep{epoch:03d}.dtck", out / f"optstate_ep{epoch:03d}.dtck"


def latest_checkpoint_epoch(out_dir) -> int:
    """Highest epoch with a saved checkpoint in out_dir, or 0."""
    best = 0
    for p in Path(out_dir).glob("checkpoint_ep*.dtck"):
        try:
            best = max(best, int(p.stem.split("ep")[-1]))
        except ValueError:
            continue
    return best


def _restore(net, out_dir, epoch):
    ckpt, opt = _checkpoint_paths(out_dir, epoch)
    _, store, _ = network.load_checkpoint(ckpt, dtype=net.dtype)
    for name, t in net.store.items():
        t.data[...] = store[name].data
    if opt.exists():
        _, _, arrays = network.load_blocks(opt)
        net.store.load_optimizer_state(arrays)


def train_occupancy(net: network.TrackingNetwork, episodes, config: TrainConfig,
                    out_dir=None, resume=False):
    """Run the unsupervised curriculum; returns the per-epoch mean losses.

    Minibatch order is reshuffled each epoch from a seed derived from
    (config.seed, epoch), so an interrupted run resumed from the latest
    checkpoint replays the remaining epochs identically.  Checkpoints and
    Adam state are written after every epoch when out_dir is given.
    """
    minibatches = _episode_minibatches(episodes, config.minibatch_len)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(Path(out_dir) / "metrics.csv") if out_dir else None
    start_epoch = 0
    if out_dir and resume:
        start_epoch = latest_checkpoint_epoch(out_dir)
        if start_epoch:
            _restore(net, out_dir, start_epoch)
    curve = []
    try:
        for epoch in range(start_epoch + 1, config.epochs + 1):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(minibatches))
            losses = []
            for rank, mb_index in enumerate(order):
                ep_idx, start, frames = minibatches[int(mb_index)]
                t0 = time.perf_counter()
                loss, grad_norm = unsupervised_occupancy_step(net, frames, config)
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss in minibatch {ep_idx}:{start} (epoch {epoch})"
                    )
                net.store.step(config.learning_rate, config.optimizer)
                losses.append(loss)
                if writer:
                    writer.row(epoch, f"{ep_idx}:{start}", loss, grad_norm,
                               (time.perf_counter() - t0) * 1e3)
            curve.append(float(np.mean(losses)))
            if out_dir:
                ckpt, opt = _checkpoint_paths(out_dir, epoch)
                network.save_checkpoint(ckpt, net.config, net.store)
                network.save_blocks(opt, net.config, network.KIND_OPTIMIZER,
                                    net.store.optimizer_state_arrays())
    finally:
        if writer:
            writer.close()
    return curve


# ---------------------------------------------------------------------------
# semantic transfer


@dataclass(frozen=True)
class SemanticTrainConfig:
    label_stride: int = 50          # one labeled frame per this many frames
    freeze_recurrent: bool = True
    learning_rate: float = 0.05
    epochs: int = 40
    grad_clip: float = 5.0
    seed: int = 0
    minibatch_len: int = 40
    show: int = 10
    predict: int = 10
    cycles: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.cycles * (self.show + self.predict) != self.minibatch_len:
            raise ValueError("show/predict cycles must tile the minibatch")
        if self.label_stride < 1:
            raise ValueError("label stride must be >= 1")

    def schedule(self):
        return ([False] * self.show + [True] * self.predict) * self.cycles


def labeled_frame_set(episode_index: int, episode_len: int, stride: int) -> set:
    """Deterministic sparse labeling: every stride-th frame globally."""
    return {
        t for t in range(episode_len)
        if (episode_index * episode_len + t) % stride == stride - 1
    }


def label_grid(frame) -> np.ndarray:
    """Labels at visible, observed-occupied cells that carry a true class.

    Everything else is the ignore marker, mirroring hand-labeling of the
    obstacles actually seen in a raw scan.
    """
    lab = np.full(frame.c_true.shape, IGNORE_LABEL, dtype=np.uint8)
    usable = (frame.visibility == 1) & (frame.occupancy == 1) & (frame.c_true != IGNORE_LABEL)
    lab[usable] = frame.c_true[usable]
    return lab


def compute_class_weights(episodes, config: SemanticTrainConfig, n_classes: int):
    """Inverse empirical class frequency over the labeled training cells.

    Laplace-smoothed so absent classes stay finite, normalized to mean 1
    (the loss renormalizes by total weight anyway).
    """
    counts = np.ones(n_classes, dtype=np.float64)  # smoothing
    for ep_idx, ep in enumerate(episodes):
        labeled = labeled_frame_set(ep_idx, len(ep), config.label_stride)
        for t in labeled:
            lab = label_grid(ep.frames[t])
            for k in range(n_classes):
                counts[k] += int((lab == k).sum())
    weights = counts.sum() / (n_classes * counts)
    return weights


def semantic_transfer_step(net: network.TrackingNetwork, frames, labeled: set,
                           class_weights, config: SemanticTrainConfig):
    """One semantic pass over a slice; returns the loss (0 if nothing labeled).

    Labels are scored only on predict frames, so objects occluded at
    prediction time are supervised through their future visible labels.
    With freeze_recurrent the unroll runs outside the graph and only the
    class decoder receives gradients.
    """
    schedule = config.schedule()
    if len(frames) != len(schedule):
        raise ValueError(f"need exactly {len(schedule)} frames, got {len(frames)}")
    scored = [t for t, is_predict in enumerate(schedule) if is_predict and t in labeled]
    scored = [t for t in scored if (label_grid(frames[t]) != IGNORE_LABEL).any()]
    if not scored:
        return 0.0

    if config.freeze_recurrent:
        h = net.zero_state()
        tops = {}
        for t, (is_predict, frame) in enumerate(zip(schedule, frames)):
            x = net.encode_observation(None if is_predict else frame.observation)
            h, _, _ = net.forward_step(h, x)
            if t in scored:
                tops[t] = h[-1].data
        with Graph() as g:
            total = None
            for t in scored:
                logits = engine.conv2d_dilated(Tensor(tops[t]), net.store["sem.w"], 1,
                                               bias=net.store["sem.b"])
                c_hat = engine.softmax_per_cell(logits)
                loss_t = engine.weighted_masked_nll(c_hat, label_grid(frames[t]),
                                                    class_weights)
                total = loss_t if total is None else engine.elem_add(total, loss_t)
            total = engine.scalar_mul(total, 1.0 / len(scored))
            g.backward(total)
    else:
        with Graph() as g:
            h = net.zero_state()
            total = None
            for t, (is_predict, frame) in enumerate(zip(schedule, frames)):
                x = net.encode_observation(None if is_predict else frame.observation)
                h, _, c_hat = net.forward_step(h, x)
                if t in scored:
                    loss_t = engine.weighted_masked_nll(c_hat, label_grid(frame),
                                                        class_weights)
                    total = loss_t if total is None else engine.elem_add(total, loss_t)
            total = engine.scalar_mul(total, 1.0 / len(scored))
            g.backward(total)
    net.store.clip_grads(config.grad_clip)
    return total.item()


def train_semantic(net: network.TrackingNetwork, episodes, config: SemanticTrainConfig,
                   class_weights=None, out_dir=None):
    """Fit the class decoder on sparsely labeled episodes; returns epoch losses."""
    if class_weights is None:
        class_weights = compute_class_weights(episodes, config, net.config.classes)
    recurrent_names = [n for n in net.store.names() if not n.startswith("sem.")]
    frozen_before = {n: net.store[n].data.copy() for n in recurrent_names} \
        if config.freeze_recurrent else None

    slices = []
    for ep_idx, ep in enumerate(episodes):
        labeled = labeled_frame_set(ep_idx, len(ep), config.label_stride)
        for start in range(0, len(ep) - config.minibatch_len + 1, config.minibatch_len):
            local = {t - start for t in labeled if start <= t < start + config.minibatch_len}
            if local:
                slices.append((ep.frames[start:start + config.minibatch_len], local))
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(Path(out_dir) / "metrics_semantic.csv") if out_dir else None
    curve = []
    try:
        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(slices))
            losses = []
            for mb in order:
                frames, labeled = slices[int(mb)]
                t0 = time.perf_counter()
                loss = semantic_transfer_step(net, frames, labeled, class_weights, config)
                if loss:
                    net.store.step(config.learning_rate, "adaptive-moment")
                    losses.append(loss)
                if writer:
                    writer.row(epoch, int(mb), loss, net.store.grad_norm(),
                               (time.perf_counter() - t0) * 1e3)
            curve.append(float(np.mean(losses)) if losses else 0.0)
    finally:
        if writer:
            writer.close()
    if frozen_before is not None:
        for name, before in frozen_before.items():
            if not np.array_equal(before, net.store[name].data):
                raise AssertionError(f"frozen parameter {name} changed during transfer")
    return curve, class_weights


# ---------------------------------------------------------------------------
# one-shot baseline classifier


class OneShotClassifier:
    """Feed-forward three-layer dilated-conv classifier of the raw input.

    Dilations 1, 2, 4 with tanh activations and a per-cell softmax head;
    no recurrence, so anything invisible in the current frame is out of
    reach by construction.
    """

    def __init__(self, config: network.NetworkConfig, store, dtype=np.float32):
        self.config = config
        self.store = store
        self.dtype = np.dtype(dtype)

    @classmethod
    def create(cls, config: network.NetworkConfig, seed: int, dtype=np.float32):
        rng = np.random.default_rng(seed)
        store = engine.ParameterStore()
        c = config.channels
        cin = network.IN_CHANNELS
        for i in range(3):
            store.add(f"conv{i + 1}.w", network._glorot(rng, (c, cin, 3, 3), dtype))
            store.add(f"conv{i + 1}.b", np.zeros((c, 1, 1), dtype=dtype))
            cin = c
        store.add("head.w", network._glorot(rng, (config.classes, c, 1, 1), dtype))
        store.add("head.b", np.zeros((config.classes, 1, 1), dtype=dtype))
        return cls(config, store, dtype)

    def class_belief(self, x: Tensor) -> Tensor:
        out = x
        for i, dilation in enumerate((1, 2, 4)):
            out = engine.tanh_act(engine.conv2d_dilated(
                out, self.store[f"conv{i + 1}.w"], dilation,
                bias=self.store[f"conv{i + 1}.b"]))
        logits = engine.conv2d_dilated(out, self.store["head.w"], 1,
                                       bias=self.store["head.b"])
        return engine.softmax_per_cell(logits)

    def encode_observation(self, obs) -> Tensor:
        m = self.config.grid
        if obs is None:
            return Tensor(np.zeros((network.IN_CHANNELS, m, m), dtype=self.dtype))
        return Tensor(np.stack([obs.visibility, obs.occupancy]).astype(self.dtype))

    def predict(self, obs) -> np.ndarray:
        return self.class_belief(self.encode_observation(obs)).data

    def save(self, path):
        network.save_blocks(path, self.config, network.KIND_ONESHOT,
                            {name: t.data for name, t in self.store.items()})

    @classmethod
    def load(cls, path, dtype=np.float32):
        config, kind, arrays = network.load_blocks(path)
        if kind != network.KIND_ONESHOT:
            raise network.CheckpointError(f"checkpoint kind {kind} is not a one-shot "
                                          f"classifier", 6)
        store = engine.ParameterStore()
        for name, arr in arrays.items():
            store.add(name, arr.astype(dtype))
        return cls(config, store, dtype)


def train_one_shot_baseline(labeled_frames, config: network.NetworkConfig,
                            class_weights, seed=0, learning_rate=3e-3, epochs=60,
                            grad_clip=5.0, dtype=np.float32):
    """Fit the baseline on (frame, labels) pairs of currently visible cells."""
    clf = OneShotClassifier.create(config, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(labeled_frames))
        epoch_losses = []
        for idx in order:
            frame = labeled_frames[int(idx)]
            labels = label_grid(frame)
            if not (labels != IGNORE_LABEL).any():
                continue
            with Graph() as g:
                c_hat = clf.class_belief(clf.encode_observation(frame.observation))
                loss = engine.weighted_masked_nll(c_hat, labels, class_weights)
                g.backward(loss)
            clf.store.clip_grads(grad_clip)
            clf.store.step(learning_rate, "adaptive-moment")
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
    return clf, losses
