"""Frozen-backbone probing over the five downstream tasks.

A probe is a 512-hidden-unit MLP on encoder states: features are aligned
from the token rate onto each task's frame grid through an averaging matrix
(so alignment stays differentiable for fine-tuning), labels are rasterized
onto the same grid, and decoding turns frame probabilities back into event
times or intervals. The backbone stays frozen unless fine_tune is set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from melfm import tensor as tt
from melfm.annotations import (
    CHORD_LABELS,
    NONE_LABEL,
    STRUCTURE_LABELS,
    BeatAnnotation,
    IntervalAnnotation,
    canonical_label,
)
from melfm.audio import AudioBuffer, resample
from melfm.checkpoint import Checkpoint, load_container, save_container
from melfm.dsp import MelFrameSequence, compute_mel
from melfm.encoder import encode
from melfm.tensor import Tensor

log = logging.getLogger(__name__)

PROBE_HIDDEN = 512

BEAT_CLASSES = ["non-beat", "beat", "downbeat"]

# decode constants: thresholds and minimum peak spacing
PEAK_THRESHOLD = 0.5
BEAT_MIN_DISTANCE_MS = 120.0
DOWNBEAT_MIN_DISTANCE_MS = 500.0


@dataclass(frozen=True)
class TaskSpec:
    name: str
    level: str  # "token" | "sequence"
    classes: list[str] | None
    frame_ms: float | None
    boundary_head: bool = False


TASK_SPECS: dict[str, TaskSpec] = {
    "beat": TaskSpec("beat", "token", BEAT_CLASSES, 50.0),
    "chord": TaskSpec("chord", "token", CHORD_LABELS, 125.0),
    "structure": TaskSpec("structure", "token", STRUCTURE_LABELS, 200.0, boundary_head=True),
    "key": TaskSpec("key", "token", CHORD_LABELS, 2000.0),
    "tagging": TaskSpec("tagging", "sequence", None, None),
}


def mel_for_audio(ckpt: Checkpoint, audio: AudioBuffer) -> MelFrameSequence:
    if audio.sample_rate != 24_000:
        audio = resample(audio, 24_000)
    cfg = ckpt.config
    return compute_mel(
        audio,
        token_rate=cfg.encoder.token_rate,
        n_fft=cfg.features.n_fft,
        num_bands=cfg.features.mel_bands,
        fmin=cfg.features.fmin,
        fmax=cfg.features.fmax,
    )


def encode_states(ckpt: Checkpoint, mel: MelFrameSequence) -> list[Tensor]:
    normalized = ckpt.normalizer.apply(mel)
    frames = normalized.frames.astype(np.float32)
    max_frames = ckpt.config.encoder.max_frames
    if frames.shape[0] > max_frames:
        frames = frames[:max_frames]
    return encode(ckpt.config.encoder, ckpt.encoder_weights, frames).states


def extract_features(ckpt: Checkpoint, audio: AudioBuffer, layer: int = -1) -> np.ndarray:
    """Frozen features from one hidden layer, (T, d_model) at the token rate."""
    states = encode_states(ckpt, mel_for_audio(ckpt, audio))
    return states[layer].data.copy()


def extract_all_features(ckpt: Checkpoint, audio: AudioBuffer) -> np.ndarray:
    """All layer states stacked, (num_layers+1, T, d_model)."""
    states = encode_states(ckpt, mel_for_audio(ckpt, audio))
    return np.stack([s.data for s in states])


def alignment_matrix(num_frames: int, token_rate: float, frame_ms: float) -> np.ndarray:
    """(T', T) row-stochastic matrix mapping token frames onto the task grid.

    Task frame k spans [k, k+1) * frame_ms; token frames whose centers fall
    inside are averaged; an empty task frame takes the nearest token center.
    """
    if token_rate <= 0 or frame_ms <= 0:
        raise ValueError("rates must be positive")
    duration_ms = num_frames / token_rate * 1000.0
    num_task = max(1, int(np.ceil(duration_ms / frame_ms - 1e-9)))
    centers_ms = (np.arange(num_frames) + 0.5) / token_rate * 1000.0
    assignment = np.floor(centers_ms / frame_ms).astype(np.int64)
    matrix = np.zeros((num_task, num_frames))
    for k in range(num_task):
        inside = assignment == k
        if inside.any():
            matrix[k, inside] = 1.0 / inside.sum()
        else:
            task_center = (k + 0.5) * frame_ms
            matrix[k, np.argmin(np.abs(centers_ms - task_center))] = 1.0
    return matrix


def align_to_task(features: np.ndarray, token_rate: float, frame_ms: float) -> np.ndarray:
    return alignment_matrix(features.shape[0], token_rate, frame_ms) @ features


def pool_sequence(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features)
    if features.shape[0] < 1:
        raise ValueError("cannot pool an empty sequence")
    return features.mean(axis=0)


def pick_peaks(activations: np.ndarray, threshold: float, min_distance: int) -> list[int]:
    """Greedy peak picking: strongest first, suppressing within min_distance."""
    candidates = [i for i in np.argsort(-activations, kind="stable") if activations[i] >= threshold]
    accepted: list[int] = []
    for i in candidates:
        if all(abs(i - j) >= min_distance for j in accepted):
            accepted.append(int(i))
    return sorted(accepted)


# ---------------------------------------------------------------------------
# label rasterization
# ---------------------------------------------------------------------------

def rasterize_events(times: list[float], num_task: int, frame_ms: float) -> np.ndarray:
    """Mark frames within +-1 task frame of each timestamp."""
    out = np.zeros(num_task, dtype=bool)
    for t in times:
        idx = int(np.floor(t * 1000.0 / frame_ms))
        for k in (idx - 1, idx, idx + 1):
            if 0 <= k < num_task:
                out[k] = True
    return out


def rasterize_beat(ann: BeatAnnotation, num_task: int, frame_ms: float) -> np.ndarray:
    beat = rasterize_events(ann.beat_times, num_task, frame_ms)
    down = rasterize_events(ann.downbeat_times, num_task, frame_ms)
    labels = np.zeros(num_task, dtype=np.int64)
    labels[beat] = 1
    labels[down] = 2  # downbeat wins where both apply
    return labels


def rasterize_intervals(
    ann: IntervalAnnotation, num_task: int, frame_ms: float, classes: list[str], fill: str
) -> np.ndarray:
    index = {label: i for i, label in enumerate(classes)}
    labels = np.full(num_task, index[fill], dtype=np.int64)
    for k in range(num_task):
        center = (k + 0.5) * frame_ms / 1000.0
        label = ann.label_at(center)
        if label is not None:
            label = canonical_label(label) if ":" in label or label == NONE_LABEL else label
            if label not in index:
                raise ValueError(f"label {label!r} outside the task vocabulary")
            labels[k] = index[label]
    return labels


def structure_boundaries(ann: IntervalAnnotation) -> list[float]:
    """Internal section boundaries (starts of every section after the first)."""
    return [s for s, _, _ in ann.intervals[1:]]


def rasterize_boundaries(ann: IntervalAnnotation, num_task: int, frame_ms: float) -> np.ndarray:
    return rasterize_events(structure_boundaries(ann), num_task, frame_ms).astype(np.float64)


# ---------------------------------------------------------------------------
# the probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeOptions:
    lr: float = 1e-3
    epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.1
    layer: int | str = -1  # layer index or "weighted"
    fine_tune: bool = False
    seed: int = 0


@dataclass
class Probe:
    task: str
    layer: int | str
    classes: list[str]
    weights: dict[str, Tensor]

    @property
    def uses_weighted_layers(self) -> bool:
        return self.layer == "weighted"


def init_probe(task: str, classes: list[str], feature_dim: int, num_layers: int, opts: ProbeOptions) -> Probe:
    rng = np.random.default_rng(opts.seed)

    def xavier(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)

    weights = {
        "w1": xavier(feature_dim, PROBE_HIDDEN),
        "b1": Tensor(np.zeros(PROBE_HIDDEN), requires_grad=True),
        "w2": xavier(PROBE_HIDDEN, len(classes)),
        "b2": Tensor(np.zeros(len(classes)), requires_grad=True),
    }
    spec = TASK_SPECS[task]
    if spec.boundary_head:
        weights["wb"] = xavier(PROBE_HIDDEN, 1)
        weights["bb"] = Tensor(np.zeros(1), requires_grad=True)
    if opts.layer == "weighted":
        weights["layer_logits"] = Tensor(np.zeros(num_layers), requires_grad=True)
    return Probe(task=task, layer=opts.layer, classes=list(classes), weights=weights)


def probe_forward(probe: Probe, features: Tensor | np.ndarray) -> tuple[Tensor, Tensor | None]:
    """Hidden ReLU layer then per-task output layer(s).

    For weighted-layer probes, features are (L, N, d) and combined by a
    learned softmax over layers first.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    if probe.uses_weighted_layers:
        w = tt.softmax(probe.weights["layer_logits"], axis=0)
        num_layers = x.shape[0]
        mixed = tt.reshape(
            tt.matmul(tt.reshape(w, (1, num_layers)), tt.reshape(x, (num_layers, -1))),
            x.shape[1:],
        )
        x = mixed
    hidden = tt.relu(tt.add(tt.matmul(x, probe.weights["w1"]), probe.weights["b1"]))
    logits = tt.add(tt.matmul(hidden, probe.weights["w2"]), probe.weights["b2"])
    boundary = None
    if "wb" in probe.weights:
        boundary = tt.add(tt.matmul(hidden, probe.weights["wb"]), probe.weights["bb"])
    return logits, boundary


@dataclass
class _Example:
    features: np.ndarray  # (T', d) or (L, T', d) or pooled (d,)
    labels: np.ndarray  # int frame labels, multi-hot vector, or scalar
    boundary: np.ndarray | None = None
    mel: MelFrameSequence | None = None  # retained for fine-tuning


def _clip_features(ckpt: Checkpoint, mel: MelFrameSequence, layer: int | str) -> np.ndarray:
    states = encode_states(ckpt, mel)
    if layer == "weighted":
        return np.stack([s.data for s in states])
    return states[layer].data


def build_examples(
    ckpt: Checkpoint,
    dataset: list[tuple[AudioBuffer, object]],
    task: str,
    tag_vocab: list[str] | None = None,
    layer: int | str = -1,
) -> tuple[list[_Example], list[str]]:
    """Extract aligned features and rasterized labels for every clip."""
    spec = TASK_SPECS[task]
    if not dataset:
        raise ValueError("empty dataset")
    if task == "tagging":
        if tag_vocab is None:
            tag_vocab = sorted({t for _, ann in dataset for t in ann.tags})
        classes = list(tag_vocab)
    else:
        classes = list(spec.classes)

    examples = []
    for audio, ann in dataset:
        mel = mel_for_audio(ckpt, audio)
        feats = _clip_features(ckpt, mel, layer)
        num_tokens = feats.shape[-2]
        rate = ckpt.config.encoder.token_rate
        if spec.level == "sequence":
            pooled = feats.mean(axis=-2)
            labels = np.array([1.0 if t in ann.tags else 0.0 for t in classes])
            examples.append(_Example(pooled, labels, mel=mel))
            continue
        align = alignment_matrix(num_tokens, rate, spec.frame_ms)
        aligned = align @ feats if feats.ndim == 2 else np.einsum("kt,ltd->lkd", align, feats)
        num_task = align.shape[0]
        if task == "beat":
            labels = rasterize_beat(ann, num_task, spec.frame_ms)
            boundary = None
        elif task == "structure":
            labels = rasterize_intervals(ann, num_task, spec.frame_ms, classes, fill="silence")
            boundary = rasterize_boundaries(ann, num_task, spec.frame_ms)
        else:
            labels = rasterize_intervals(ann, num_task, spec.frame_ms, classes, fill=NONE_LABEL)
            boundary = None
        examples.append(_Example(aligned, labels, boundary, mel=mel))
    return examples, classes


def _stack_token_examples(examples: list[_Example]) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    axis = -2
    feats = np.concatenate([ex.features for ex in examples], axis=axis)
    labels = np.concatenate([ex.labels for ex in examples])
    boundary = None
    if examples[0].boundary is not None:
        boundary = np.concatenate([ex.boundary for ex in examples])
    return feats, labels, boundary


def _probe_loss(probe: Probe, task: str, feats, labels, boundary) -> Tensor:
    logits, blogits = probe_forward(probe, feats)
    if task == "tagging":
        loss = tt.sigmoid_bce(logits, labels)
    else:
        loss = tt.cross_entropy(logits, labels)
    if blogits is not None and boundary is not None:
        loss = tt.add(loss, tt.sigmoid_bce(tt.reshape(blogits, (-1,)), boundary))
    return loss


def train_probe(
    ckpt: Checkpoint,
    dataset: list[tuple[AudioBuffer, object]],
    task: str,
    opts: ProbeOptions | None = None,
) -> Probe:
    """Train the shallow probe; the backbone is touched only when fine_tune is set."""
    opts = opts or ProbeOptions()
    if task not in TASK_SPECS:
        raise ValueError(f"unknown task {task!r}")
    examples, classes = build_examples(ckpt, dataset, task, layer=opts.layer)
    spec = TASK_SPECS[task]
    feature_dim = ckpt.config.encoder.d_model
    num_layers = ckpt.config.encoder.layers + 1
    probe = init_probe(task, classes, feature_dim, num_layers, opts)

    if spec.level == "sequence":
        feats = np.stack([ex.features for ex in examples])
        labels = np.stack([ex.labels for ex in examples])
        boundary = None
        if opts.layer == "weighted":
            feats = np.swapaxes(feats, 0, 1)  # (L, N, d)
    else:
        feats, labels, boundary = _stack_token_examples(examples)

    if opts.fine_tune:
        return _fine_tune(ckpt, probe, examples, task, opts)

    num_rows = labels.shape[0]
    rng = np.random.default_rng(opts.seed)
    order = rng.permutation(num_rows)
    val_count = int(num_rows * opts.val_fraction)
    val_idx, train_idx = order[:val_count], order[val_count:]
    if len(train_idx) == 0:
        train_idx = order
    take = (lambda arr, idx: arr[:, idx] if arr.ndim == 3 else arr[idx])

    params = dict(probe.weights)
    state: dict = {}
    best_val = np.inf
    best_snapshot = {k: v.data.copy() for k, v in params.items()}
    stale = 0
    for epoch in range(1, opts.epochs + 1):
        for p in params.values():
            p.grad = None
        loss = _probe_loss(
            probe,
            task,
            take(feats, train_idx),
            labels[train_idx],
            None if boundary is None else boundary[train_idx],
        )
        loss.backward()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        tt.adam_step(params, grads, state, lr=opts.lr, step=epoch)

        if len(val_idx) > 0:
            val_loss = float(
                _probe_loss(
                    probe,
                    task,
                    take(feats, val_idx),
                    labels[val_idx],
                    None if boundary is None else boundary[val_idx],
                ).data
            )
        else:
            val_loss = float(loss.data)
        if val_loss < best_val - 1e-6:
            best_val = val_loss
            best_snapshot = {k: v.data.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if stale > opts.patience:
                log.info("probe early stop at epoch %d (val %.4f)", epoch, best_val)
                break
    for k, p in params.items():
        p.data = best_snapshot[k]
    return probe


def _fine_tune(ckpt: Checkpoint, probe: Probe, examples: list[_Example], task: str, opts: ProbeOptions) -> Probe:
    """Joint updates of probe and backbone, one clip per step on the task grid."""
    spec = TASK_SPECS[task]
    params = dict(probe.weights)
    params.update({f"backbone.{k}": v for k, v in ckpt.encoder_weights.items()})
    state: dict = {}
    step = 0
    for epoch in range(1, opts.epochs + 1):
        for ex in examples:
            step += 1
            for p in params.values():
                p.grad = None
            states = encode_states(ckpt, ex.mel)
            if probe.uses_weighted_layers:
                raise ValueError("weighted-layer probing is frozen-mode only")
            feats = states[probe.layer if isinstance(probe.layer, int) else -1]
            if spec.level == "sequence":
                feats = tt.mean(feats, axis=0)
                feats = tt.reshape(feats, (1, feats.shape[0]))
                labels = ex.labels[None, :]
                boundary = None
            else:
                align = alignment_matrix(
                    feats.shape[0], ckpt.config.encoder.token_rate, spec.frame_ms
                ).astype(np.float32)
                feats = tt.matmul(Tensor(align), feats)
                labels = ex.labels
                boundary = ex.boundary
            loss = _probe_loss(probe, task, feats, labels, boundary)
            loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            tt.adam_step(params, grads, state, lr=opts.lr, step=step)
    return probe


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class StructureDecode:
    intervals: IntervalAnnotation
    boundaries: list[float]


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _merge_frames_to_intervals(labels: list[str], frame_ms: float) -> IntervalAnnotation:
    intervals = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            intervals.append((start * frame_ms / 1000.0, i * frame_ms / 1000.0, labels[start]))
            start = i
    return IntervalAnnotation(intervals)


def predict_and_decode(probe: Probe, ckpt: Checkpoint, audio: AudioBuffer, task: str):
    """Run the probe on one clip and decode the task-specific prediction."""
    spec = TASK_SPECS[task]
    mel = mel_for_audio(ckpt, audio)
    feats = _clip_features(ckpt, mel, probe.layer)
    rate = ckpt.config.encoder.token_rate
    if spec.level == "sequence":
        pooled = feats.mean(axis=-2)
        logits, _ = probe_forward(probe, pooled[None] if pooled.ndim == 1 else pooled)
        scores = 1.0 / (1.0 + np.exp(-logits.data[0]))
        return dict(zip(probe.classes, scores.tolist()))

    align = alignment_matrix(feats.shape[-2], rate, spec.frame_ms)
    aligned = align @ feats if feats.ndim == 2 else np.einsum("kt,ltd->lkd", align, feats)
    logits, blogits = probe_forward(probe, aligned)
    probs = _softmax_np(logits.data)
    frame_s = spec.frame_ms / 1000.0

    if task == "beat":
        beat_prob = probs[:, 1] + probs[:, 2]
        down_prob = probs[:, 2]
        beat_idx = pick_peaks(beat_prob, PEAK_THRESHOLD, max(1, round(BEAT_MIN_DISTANCE_MS / spec.frame_ms)))
        down_idx = pick_peaks(down_prob, PEAK_THRESHOLD, max(1, round(DOWNBEAT_MIN_DISTANCE_MS / spec.frame_ms)))
        beats = [i * frame_s for i in beat_idx]
        downs = [i * frame_s for i in down_idx if any(abs(i * frame_s - b) < 1e-9 for b in beats)]
        return BeatAnnotation(beats, downs)
    if task == "key":
        label = probe.classes[int(np.argmax(probs.mean(axis=0)))]
        duration = len(probs) * frame_s
        return IntervalAnnotation([(0.0, duration, label)])
    labels = [probe.classes[i] for i in probs.argmax(axis=1)]
    intervals = _merge_frames_to_intervals(labels, frame_ms=spec.frame_ms)
    if task == "structure":
        boundary_prob = 1.0 / (1.0 + np.exp(-blogits.data[:, 0]))
        idx = pick_peaks(boundary_prob, PEAK_THRESHOLD, 1)
        return StructureDecode(intervals, [i * frame_s for i in idx])
    return intervals


# ---------------------------------------------------------------------------
# probe persistence
# ---------------------------------------------------------------------------

def save_probe(path: str | Path, probe: Probe) -> None:
    tensors = {name: t.data for name, t in probe.weights.items()}
    meta = {
        "kind": "probe",
        "task": probe.task,
        "layer": probe.layer,
        "classes": probe.classes,
    }
    save_container(path, tensors, meta)


def load_probe(path: str | Path) -> Probe:
    tensors, meta = load_container(path)
    if meta.get("kind") != "probe":
        raise ValueError(f"{path}: container is not a probe")
    weights = {name: Tensor(arr, requires_grad=True) for name, arr in tensors.items()}
    return Probe(task=meta["task"], layer=meta["layer"], classes=meta["classes"], weights=weights)
