"""Masked token modeling: mask mel spans, encode, predict the frozen
quantizer's tokens at masked positions.

All randomness is derived from (seed, step, purpose) tuples, never from a
sequential stream, so a resumed run replays the exact trajectory of an
uninterrupted one and worker count can never change results.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from melfm import tensor as tt
from melfm.audio import load_wav, resample
from melfm.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from melfm.config import RunConfig, fingerprint
from melfm.dsp import MelFrameSequence, Normalizer, compute_mel, fit_normalizer
from melfm.encoder import encode, init_weights
from melfm.quantizer import Quantizer, build_quantizer, tokenize, utilization
from melfm.tensor import Tensor

log = logging.getLogger(__name__)

# rng purpose tags
_RNG_PICK = 1
_RNG_OFFSET = 2
_RNG_MASK = 3
_RNG_NOISE = 4

_trace_hook: Callable[[str, int], None] | None = None


def set_trace_hook(hook: Callable[[str, int], None] | None) -> None:
    """Instrumentation hook receiving (event, item_index); used by ordering tests."""
    global _trace_hook
    _trace_hook = hook


@dataclass
class MaskPlan:
    spans: list[tuple[int, int]]
    masked: np.ndarray  # (T,) bool

    @property
    def masked_fraction(self) -> float:
        return float(self.masked.mean()) if self.masked.size else 0.0


def plan_masks(
    num_frames: int,
    token_rate: float,
    span_ms: float = 400.0,
    prob: float = 0.6,
    seed: int | tuple = 0,
) -> MaskPlan:
    """Partition [0, T) into spans of round(span_ms/1000 * rate) frames and
    mask each independently with the given probability."""
    if num_frames < 1:
        raise ValueError("need at least one frame")
    span_len = max(1, int(round(span_ms / 1000.0 * token_rate)))
    rng = np.random.default_rng(seed)
    masked = np.zeros(num_frames, dtype=bool)
    spans = []
    for start in range(0, num_frames, span_len):
        end = min(start + span_len, num_frames)
        if rng.random() < prob:
            spans.append((start, end))
            masked[start:end] = True
    return MaskPlan(spans, masked)


def apply_mask(
    frames: np.ndarray,
    plan: MaskPlan,
    noise_seed: int | tuple = 0,
    noise_std: float = 0.1,
) -> np.ndarray:
    """Replace masked rows with gaussian noise; unmasked rows stay bit-identical."""
    if len(plan.masked) != frames.shape[0]:
        raise ValueError("mask plan length does not match frame count")
    out = frames.copy()
    count = int(plan.masked.sum())
    if count:
        rng = np.random.default_rng(noise_seed)
        out[plan.masked] = rng.normal(0.0, noise_std, size=(count, frames.shape[1]))
    return out


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


def init_head(d_model: int, codebook_size: int, dtype=np.float32) -> dict[str, Tensor]:
    # zero init: the first masked loss is exactly ln(codebook_size)
    return {
        "w": Tensor(np.zeros((d_model, codebook_size), dtype=dtype), requires_grad=True),
        "b": Tensor(np.zeros(codebook_size, dtype=dtype), requires_grad=True),
    }


def compute_masked_loss(
    cfg: RunConfig,
    weights: dict[str, Tensor],
    head: dict[str, Tensor],
    masked_frames: np.ndarray,
    tokens: np.ndarray,
    mask: np.ndarray,
) -> tuple[Tensor, np.ndarray]:
    """Cross-entropy over masked positions only. Returns (loss, flat logits data).

    masked_frames: (B, T, d); tokens: (B, T); mask: (B, T) bool.
    """
    states = encode(cfg.encoder, weights, masked_frames)
    batch, num_frames, d_model = states.last.shape
    flat = tt.reshape(states.last, (batch * num_frames, d_model))
    logits = tt.add(tt.matmul(flat, head["w"]), head["b"])
    loss = tt.cross_entropy(logits, tokens.reshape(-1), mask.reshape(-1))
    return loss, logits.data


@dataclass
class StepResult:
    loss: float
    lr: float
    masked_fraction: float
    top1: float
    skipped: bool = False


def train_step(
    batch: Sequence[tuple[np.ndarray, np.ndarray, MaskPlan]],
    cfg: RunConfig,
    weights: dict[str, Tensor],
    head: dict[str, Tensor],
    opt_state: dict,
    step: int,
) -> StepResult:
    """One optimization step over (masked frames, tokens, plan) examples."""
    masked_frames = np.stack([item[0] for item in batch])
    tokens = np.stack([item[1] for item in batch])
    mask = np.stack([item[2].masked for item in batch])
    lr = warmup_lr(cfg.optimizer.lr, step, cfg.optimizer.warmup_steps)
    if not mask.any():
        log.info("step %d: no masked frames in batch, skipping", step)
        return StepResult(loss=float("nan"), lr=lr, masked_fraction=0.0, top1=0.0, skipped=True)

    params = {f"encoder.{k}": v for k, v in weights.items()}
    params.update({f"head.{k}": v for k, v in head.items()})
    for p in params.values():
        p.grad = None

    loss, logits = compute_masked_loss(cfg, weights, head, masked_frames, tokens, mask)
    loss.backward()
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    tt.adam_step(params, grads, opt_state, lr=lr, step=step)

    flat_mask = mask.reshape(-1)
    predicted = logits[flat_mask].argmax(axis=1)
    top1 = float((predicted == tokens.reshape(-1)[flat_mask]).mean())
    return StepResult(
        loss=float(loss.data),
        lr=lr,
        masked_fraction=float(mask.mean()),
        top1=top1,
        skipped=False,
    )


def prepare_example(
    mel: MelFrameSequence,
    normalizer: Normalizer,
    quantizer: Quantizer,
    cfg: RunConfig,
    step: int,
    slot: int,
    item_index: int,
) -> tuple[np.ndarray, np.ndarray, MaskPlan]:
    """Crop, normalize, tokenize (pre-mask), then mask one training example."""
    max_frames = cfg.encoder.max_frames
    frames = mel.frames
    if frames.shape[0] < max_frames:
        reps = -(-max_frames // frames.shape[0])  # cyclic tile for short clips
        frames = np.tile(frames, (reps, 1))
    offset_rng = np.random.default_rng((cfg.seed, step, _RNG_OFFSET, slot))
    offset = int(offset_rng.integers(0, frames.shape[0] - max_frames + 1))
    crop = frames[offset : offset + max_frames]
    normalized = normalizer.apply(MelFrameSequence(crop, mel.frame_rate))
    if _trace_hook:
        _trace_hook("tokenize", item_index)
    tokens = tokenize(quantizer, normalized).tokens
    plan = plan_masks(
        max_frames,
        cfg.encoder.token_rate,
        span_ms=cfg.masking.span_ms,
        prob=cfg.masking.prob,
        seed=(cfg.seed, step, _RNG_MASK, slot),
    )
    if _trace_hook:
        _trace_hook("apply_mask", item_index)
    masked = apply_mask(
        normalized.frames,
        plan,
        noise_seed=(cfg.seed, step, _RNG_NOISE, slot),
        noise_std=cfg.masking.noise_std,
    )
    return masked.astype(np.float32), tokens, plan


def load_corpus_mels(cfg: RunConfig, corpus_dir: str | Path) -> list[MelFrameSequence]:
    paths = sorted(Path(corpus_dir).glob("*.wav"))
    if not paths:
        raise FileNotFoundError(f"no .wav files under {corpus_dir}")
    mels = []
    for p in paths:
        buf = load_wav(p)
        if buf.sample_rate != 24_000:
            buf = resample(buf, 24_000)
        if len(buf.samples) == 0:
            continue
        mel = compute_mel(
            buf,
            token_rate=cfg.encoder.token_rate,
            n_fft=cfg.features.n_fft,
            num_bands=cfg.features.mel_bands,
            fmin=cfg.features.fmin,
            fmax=cfg.features.fmax,
        )
        if mel.num_frames > 0:
            mels.append(mel)
    if not mels:
        raise ValueError(f"corpus under {corpus_dir} produced no usable clips")
    return mels


def pretrain(
    cfg: RunConfig,
    corpus_dir: str | Path,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> Checkpoint:
    """Run the full loop (load -> mel -> normalize -> tokenize -> mask -> step),
    checkpointing periodically and logging JSON lines."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mels = load_corpus_mels(cfg, corpus_dir)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.fingerprint != fingerprint(cfg):
            raise ValueError(
                f"cannot resume: checkpoint fingerprint {ckpt.fingerprint} "
                f"does not match config {fingerprint(cfg)}"
            )
        weights, head = ckpt.encoder_weights, ckpt.head_weights
        normalizer, quantizer = ckpt.normalizer, ckpt.quantizer
        opt_state, start_step = ckpt.opt_state, ckpt.step
    else:
        normalizer = fit_normalizer(mels)
        quantizer = build_quantizer(
            cfg.quantizer.seed,
            input_dim=cfg.features.mel_bands,
            code_dim=cfg.quantizer.code_dim,
            codebook_size=cfg.quantizer.codebook_size,
            mode=cfg.quantizer.mode,
        )
        weights = init_weights(cfg.encoder, seed=cfg.seed)
        head = init_head(cfg.encoder.d_model, cfg.quantizer.codebook_size)
        opt_state = {}
        start_step = 0

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            config=cfg,
            step=step,
            encoder_weights=weights,
            head_weights=head,
            quantizer=quantizer,
            normalizer=normalizer,
            opt_state=opt_state,
        )

    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "a", encoding="utf-8") as log_fp:
        for step in range(start_step + 1, cfg.optimizer.steps + 1):
            pick_rng = np.random.default_rng((cfg.seed, step, _RNG_PICK))
            indices = pick_rng.integers(0, len(mels), size=cfg.optimizer.batch_size)
            batch = [
                prepare_example(mels[idx], normalizer, quantizer, cfg, step, slot, int(idx))
                for slot, idx in enumerate(indices)
            ]
            result = train_step(batch, cfg, weights, head, opt_state, step)
            if result.skipped:
                continue
            if step % cfg.optimizer.log_every == 0 or step == cfg.optimizer.steps or step == 1:
                batch_tokens = np.concatenate([item[1] for item in batch])
                used, _ = utilization(batch_tokens, cfg.quantizer.codebook_size)
                record = {
                    "step": step,
                    "loss": result.loss,
                    "lr": result.lr,
                    "masked_frac": result.masked_fraction,
                    "top1": result.top1,
                    "utilization": used,
                }
                log_fp.write(json.dumps(record, sort_keys=True) + "\n")
                log_fp.flush()
            if cfg.optimizer.checkpoint_every > 0 and step % cfg.optimizer.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_step{step:06d}.melc", snapshot(step))
    final = snapshot(cfg.optimizer.steps)
    save_checkpoint(out_dir / "checkpoint.melc", final)
    return final


def masked_top1(
    ckpt: Checkpoint, mels: Sequence[MelFrameSequence], seed: int = 999
) -> float:
    """Masked-token top-1 accuracy of a checkpoint on held-out clips."""
    cfg = ckpt.config
    correct = 0
    total = 0
    for i, mel in enumerate(mels):
        masked, tokens, plan = prepare_example(
            mel, ckpt.normalizer, ckpt.quantizer, cfg, step=seed, slot=i, item_index=i
        )
        if not plan.masked.any():
            continue
        _, logits = compute_masked_loss(
            cfg,
            ckpt.encoder_weights,
            ckpt.head_weights,
            masked[None],
            tokens[None],
            plan.masked[None],
        )
        predicted = logits[plan.masked].argmax(axis=1)
        correct += int((predicted == tokens[plan.masked]).sum())
        total += int(plan.masked.sum())
    return correct / total if total else 0.0
