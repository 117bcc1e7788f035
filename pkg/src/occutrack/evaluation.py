"""Quantitative evaluation: F1-vs-horizon, confusion matrices, NLL
comparison, static-memory probe, occlusion tracking, and the classical
constant-velocity baseline.

All metrics are pure functions of (predictions, episodes): byte-identical
inputs give byte-identical CSV outputs.  Scoring accumulates plain count
records, so episode-parallel runs could merge them associatively; this
implementation scores sequentially.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import PartialObservation
from .sim import IGNORE_LABEL, Episode
from .training import label_grid

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class F1Point:
    horizon: int
    precision: float
    recall: float
    f1: float
    support: int


def _f1(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return (2 * precision * recall / (precision + recall) if precision + recall else 0.0,
            precision, recall)


def default_anchors(episode_len: int, horizon: int, stride: int = 10):
    """Evaluation anchor times: every stride-th frame with a full horizon left."""
    return list(range(stride, episode_len - horizon + 1, stride))


def network_predictor(net):
    """Prediction closure: feed x[0:anchor], then roll empty inputs.

    Returns probabilities of occupancy for horizons 1..n as [n, M, M].
    """

    def predict(episode: Episode, anchor: int, horizon: int) -> np.ndarray:
        h = net.zero_state()
        for frame in episode.frames[:anchor]:
            h, _, _ = net.forward_step(h, net.encode_observation(frame.observation))
        out = np.empty((horizon, episode.m, episode.m), dtype=np.float64)
        for n in range(horizon):
            h, y, _ = net.forward_step(h, net.encode_observation(None))
            out[n] = y.data
        return out

    return predict


def oracle_predictor():
    """Upper-bound predictor that reads the future ground truth."""

    def predict(episode: Episode, anchor: int, horizon: int) -> np.ndarray:
        return np.stack([
            episode.frames[anchor + n].y_true.astype(np.float64)
            for n in range(horizon)
        ])

    return predict


def constant_predictor(value: float):
    def predict(episode: Episode, anchor: int, horizon: int) -> np.ndarray:
        return np.full((horizon, episode.m, episode.m), value, dtype=np.float64)

    return predict


def f1_curve_from_predictor(predict, episodes, horizon: int = 10,
                            threshold: float = 0.5, anchor_stride: int = 10):
    """Score any predictor against observed future occupancy.

    At each anchor t the predictor sees x[0:t] and emits occupancy grids
    for t+1..t+horizon; grids are thresholded and compared against the
    observed occupancy of each future frame restricted to its visibility
    mask.  Counts accumulate over all anchors and episodes.
    """
    tp = np.zeros(horizon, dtype=np.int64)
    fp = np.zeros(horizon, dtype=np.int64)
    fn = np.zeros(horizon, dtype=np.int64)
    support = np.zeros(horizon, dtype=np.int64)
    for episode in episodes:
        for anchor in default_anchors(len(episode), horizon, anchor_stride):
            probs = predict(episode, anchor, horizon)
            for n in range(horizon):
                frame = episode.frames[anchor + n]
                visible = frame.visibility.astype(bool)
                pred = (probs[n] >= threshold) & visible
                target = frame.occupancy.astype(bool) & visible
                tp[n] += int(np.sum(pred & target))
                fp[n] += int(np.sum(pred & ~target))
                fn[n] += int(np.sum(~pred & target))
                support[n] += int(np.sum(visible))
    curve = []
    for n in range(horizon):
        f1, precision, recall = _f1(int(tp[n]), int(fp[n]), int(fn[n]))
        curve.append(F1Point(n + 1, precision, recall, f1, int(support[n])))
    return curve


def f1_curve(net, episodes, horizon: int = 10, threshold: float = 0.5,
             anchor_stride: int = 10):
    return f1_curve_from_predictor(network_predictor(net), episodes, horizon,
                                   threshold, anchor_stride)


def calibrate_threshold(net, episodes, horizon: int = 10, anchor_stride: int = 10,
                        grid=None):
    """Threshold maximizing mean F1 over horizons on a validation split."""
    if grid is None:
        grid = [round(0.05 * k, 2) for k in range(1, 20)]
    predict = network_predictor(net)
    counts = {th: np.zeros((horizon, 3), dtype=np.int64) for th in grid}
    for episode in episodes:
        for anchor in default_anchors(len(episode), horizon, anchor_stride):
            probs = predict(episode, anchor, horizon)
            for n in range(horizon):
                frame = episode.frames[anchor + n]
                visible = frame.visibility.astype(bool)
                target = frame.occupancy.astype(bool) & visible
                for th in grid:
                    pred = (probs[n] >= th) & visible
                    c = counts[th]
                    c[n, 0] += int(np.sum(pred & target))
                    c[n, 1] += int(np.sum(pred & ~target))
                    c[n, 2] += int(np.sum(~pred & target))
    best_th, best_score = grid[0], -1.0
    for th in grid:
        scores = [_f1(*map(int, counts[th][n]))[0] for n in range(horizon)]
        mean = float(np.mean(scores))
        if mean > best_score:
            best_th, best_score = th, mean
    return best_th, best_score


# ---------------------------------------------------------------------------
# semantic scoring


def confusion_matrix(net, episodes, variant: str, anchor_stride: int = 10,
                     occluded_horizon: int = 5) -> np.ndarray:
    """K x K counts, rows = true class, columns = argmax prediction.

    visible: every frame is scored at its labeled cells given the inputs
    up to and including it.  occluded: from each anchor the network rolls
    forward on empty inputs and is scored against the labels of the
    future frames (horizons 1..occluded_horizon).
    """
    if variant not in ("visible", "occluded"):
        raise ValueError(f"unknown confusion variant {variant!r}")
    k = net.config.classes
    counts = np.zeros((k, k), dtype=np.int64)

    def score(c_hat, frame):
        labels = label_grid(frame)
        mask = labels != IGNORE_LABEL
        if not mask.any():
            return
        pred = np.argmax(c_hat, axis=0)
        for true_cls, pred_cls in zip(labels[mask], pred[mask]):
            counts[int(true_cls), int(pred_cls)] += 1

    for episode in episodes:
        if variant == "visible":
            h = net.zero_state()
            for frame in episode.frames:
                h, _, c = net.forward_step(h, net.encode_observation(frame.observation))
                score(c.data, frame)
        else:
            for anchor in default_anchors(len(episode), occluded_horizon, anchor_stride):
                h = net.zero_state()
                for frame in episode.frames[:anchor]:
                    h, _, _ = net.forward_step(h, net.encode_observation(frame.observation))
                for n in range(occluded_horizon):
                    h, _, c = net.forward_step(h, net.encode_observation(None))
                    score(c.data, episode.frames[anchor + n])
    return counts


def per_class_recall(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(totals > 0, np.diag(counts) / totals, np.nan)
    return recall


def nll_comparison(net, oneshot, episodes, anchor_stride: int = 10,
                   occluded_horizon: int = 5):
    """Summed NLL of true labels under the recurrent and one-shot models.

    Scored on identical cells.  visible: both models see the current
    frame (the recurrent one through its filtered history).  occluded:
    neither model receives input after the anchor; the recurrent model
    rolls its memory forward while the one-shot model falls back to its
    input-free prior.
    """
    out = {}
    for variant in ("visible", "occluded"):
        nll_h = 0.0
        nll_x = 0.0
        cells = 0
        for episode in episodes:
            if variant == "visible":
                h = net.zero_state()
                for frame in episode.frames:
                    h, _, c = net.forward_step(h, net.encode_observation(frame.observation))
                    cx = oneshot.predict(frame.observation)
                    labels = label_grid(frame)
                    mask = labels != IGNORE_LABEL
                    if not mask.any():
                        continue
                    idx = labels[mask].astype(np.intp)
                    ys, xs = np.nonzero(mask)
                    nll_h += float(-np.log(np.maximum(c.data[idx, ys, xs], 1e-12)).sum())
                    nll_x += float(-np.log(np.maximum(cx[idx, ys, xs], 1e-12)).sum())
                    cells += int(mask.sum())
            else:
                empty_prior = oneshot.predict(None)
                for anchor in default_anchors(len(episode), occluded_horizon, anchor_stride):
                    h = net.zero_state()
                    for frame in episode.frames[:anchor]:
                        h, _, _ = net.forward_step(h, net.encode_observation(frame.observation))
                    for n in range(occluded_horizon):
                        h, _, c = net.forward_step(h, net.encode_observation(None))
                        frame = episode.frames[anchor + n]
                        labels = label_grid(frame)
                        mask = labels != IGNORE_LABEL
                        if not mask.any():
                            continue
                        idx = labels[mask].astype(np.intp)
                        ys, xs = np.nonzero(mask)
                        nll_h += float(-np.log(np.maximum(c.data[idx, ys, xs], 1e-12)).sum())
                        nll_x += float(-np.log(np.maximum(empty_prior[idx, ys, xs], 1e-12)).sum())
                        cells += int(mask.sum())
        out[variant] = {"nll_h": nll_h, "nll_x": nll_x, "cells": cells}
    return out


# ---------------------------------------------------------------------------
# static memory probe


def static_memory_probe(net, steps: int = 20) -> np.ndarray:
    """Occupancy maps from rolling empty inputs out of the zero state."""
    h = net.zero_state()
    maps = np.empty((steps, net.config.grid, net.config.grid), dtype=np.float64)
    for t in range(steps):
        h, y, _ = net.forward_step(h, net.encode_observation(None))
        maps[t] = y.data
    return maps


def mean_occupancy_map(episodes) -> np.ndarray:
    """Mean ground-truth occupancy over all frames of the given episodes."""
    total = None
    count = 0
    for episode in episodes:
        for frame in episode.frames:
            grid = frame.y_true.astype(np.float64)
            total = grid if total is None else total + grid
            count += 1
    return total / count


def probe_statistics(probe_map: np.ndarray, mean_map: np.ndarray,
                     static_grid: np.ndarray, open_threshold: float = 0.05):
    """Pearson r against the mean map plus static vs open-area contrast."""
    r = float(np.corrcoef(probe_map.reshape(-1), mean_map.reshape(-1))[0, 1])
    static = static_grid.astype(bool)
    open_area = (~static) & (mean_map <= open_threshold)
    static_mean = float(probe_map[static].mean()) if static.any() else math.nan
    open_mean = float(probe_map[open_area].mean()) if open_area.any() else math.nan
    return {"pearson_r": r, "static_mean": static_mean, "open_mean": open_mean,
            "margin": static_mean - open_mean}


# ---------------------------------------------------------------------------
# occlusion tracking


def _dilate(mask: np.ndarray, cells: int = 1) -> np.ndarray:
    padded = np.pad(mask, cells)
    out = np.zeros_like(mask)
    for dx in range(-cells, cells + 1):
        for dy in range(-cells, cells + 1):
            out |= padded[cells + dx:cells + dx + mask.shape[0],
                          cells + dy:cells + dy + mask.shape[1]]
    return out


def fully_occluded_frames(episode: Episode, static_grid: np.ndarray):
    """Frames whose moving object is present but unreachable by any beam.

    Endpoint cells may fall one cell outside the footprint (surface
    quantization and range noise), so "seen" means a hit within one cell
    of the true object cells.
    """
    static = static_grid.astype(bool)
    occluded = []
    for t, frame in enumerate(episode.frames):
        obj = (frame.y_true == 1) & ~static
        if not obj.any():
            continue
        seen = (frame.occupancy.astype(bool) & _dilate(obj)).any()
        if not seen and not frame.visibility[obj].any():
            occluded.append(t)
    return occluded


def occlusion_tracking_score(net, episode: Episode, static_grid: np.ndarray):
    """Centroid error, in cells, of the belief inside the occlusion shadow.

    The network filters the episode's real observations; at each fully
    occluded frame the predicted mass above the shadow's background level
    is reduced to a centroid and compared with the true object centroid.
    A frame with no mass clearly above background is reported as a miss.
    """
    static = static_grid.astype(bool)
    occluded = set(fully_occluded_frames(episode, static_grid))
    results = []
    h = net.zero_state()
    for t, frame in enumerate(episode.frames):
        h, y, _ = net.forward_step(h, net.encode_observation(frame.observation))
        if t not in occluded:
            continue
        shadow = (frame.visibility == 0) & ~static
        belief = y.data
        background = float(np.median(belief[shadow]))
        peak = float(belief[shadow].max())
        obj = (frame.y_true == 1) & ~static
        true_centroid = np.argwhere(obj).mean(axis=0)
        if peak < max(2.0 * background, 0.05):
            results.append({"frame": t, "miss": True, "error_cells": math.inf})
            continue
        weights = np.where(shadow, np.maximum(belief - background, 0.0), 0.0)
        coords = np.argwhere(weights > 0)
        w = weights[weights > 0]
        centroid = (coords * w[:, None]).sum(axis=0) / w.sum()
        err = float(np.linalg.norm(centroid - true_centroid))
        results.append({"frame": t, "miss": False, "error_cells": err})
    return results


# ---------------------------------------------------------------------------
# constant-velocity baseline


@dataclass
class _Track:
    cells: np.ndarray       # (n, 2) int cell indices
    centroid: np.ndarray    # (2,) float
    velocity: np.ndarray | None   # cells per frame, None until associated


def _clusters(occupancy: np.ndarray):
    labeled, n = ndimage.label(occupancy, structure=EIGHT_CONNECTED)
    out = []
    for i in range(1, n + 1):
        cells = np.argwhere(labeled == i)
        out.append(_Track(cells=cells, centroid=cells.mean(axis=0), velocity=None))
    return out


def baseline_predict(observations, horizon: int, gate_cells: float = 5.0,
                     smoothing: float = 0.5, static_fraction: float = 0.9):
    """Cluster + constant-velocity extrapolation of observed occupancy.

    Observed-occupied cells are clustered with 8-connectivity and
    associated frame to frame by nearest centroid within a gating radius;
    per-cluster velocities are exponentially smoothed.  At the end of the
    input sequence each cluster's cells are shifted rigidly by n*v per
    horizon step (unassociated clusters persist in place), on top of a
    static map of cells occupied in at least 90% of the history.
    """
    if len(observations) < 2:
        raise ValueError("baseline needs at least two frames of history")
    m = observations[0].visibility.shape[0]
    occupancy_count = np.zeros((m, m), dtype=np.int64)
    tracks = []
    for obs in observations:
        occ = obs.occupancy.astype(bool)
        occupancy_count += occ
        clusters = _clusters(occ)
        pairs = []
        for ci, cluster in enumerate(clusters):
            for ti, track in enumerate(tracks):
                d = float(np.linalg.norm(cluster.centroid - track.centroid))
                if d <= gate_cells:
                    pairs.append((d, ci, ti))
        pairs.sort(key=lambda p: p[0])
        used_c, used_t = set(), set()
        for d, ci, ti in pairs:
            if ci in used_c or ti in used_t:
                continue
            used_c.add(ci)
            used_t.add(ti)
            prev = tracks[ti]
            measured = clusters[ci].centroid - prev.centroid
            if prev.velocity is None:
                clusters[ci].velocity = measured
            else:
                clusters[ci].velocity = smoothing * measured + (1 - smoothing) * prev.velocity
        tracks = clusters
    static = occupancy_count >= math.ceil(static_fraction * len(observations))

    grids = np.zeros((horizon, m, m), dtype=np.float64)
    for n in range(1, horizon + 1):
        grid = static.copy()
        for track in tracks:
            v = track.velocity if track.velocity is not None else np.zeros(2)
            shift = np.rint(n * v).astype(int)
            moved = track.cells + shift
            inside = (moved[:, 0] >= 0) & (moved[:, 0] < m) & \
                     (moved[:, 1] >= 0) & (moved[:, 1] < m)
            grid[moved[inside, 0], moved[inside, 1]] = True
        grids[n - 1] = grid.astype(np.float64)
    return grids


def baseline_predictor(**kwargs):
    def predict(episode: Episode, anchor: int, horizon: int) -> np.ndarray:
        observations = [f.observation for f in episode.frames[:anchor]]
        return baseline_predict(observations, horizon, **kwargs)

    return predict


# ---------------------------------------------------------------------------
# CSV outputs


def write_f1_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon", "precision", "recall", "f1", "support"])
        for p in curve:
            w.writerow([p.horizon, f"{p.precision:.6f}", f"{p.recall:.6f}",
                        f"{p.f1:.6f}", p.support])


def write_confusion_csv(path, counts):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in counts:
            w.writerow([int(v) for v in row])


def write_nll_csv(path, comparison):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "nll_recurrent", "nll_oneshot", "cells"])
        for variant, data in comparison.items():
            w.writerow([variant, f"{data['nll_h']:.6f}", f"{data['nll_x']:.6f}",
                        data["cells"]])


def write_probe_csv(path, stats):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pearson_r", "static_mean", "open_mean", "margin"])
        w.writerow([f"{stats['pearson_r']:.6f}", f"{stats['static_mean']:.6f}",
                    f"{stats['open_mean']:.6f}", f"{stats['margin']:.6f}"])
