"""Negative-log-likelihood training of the subband source model.

Items are fixed-length (default 8 s) waveforms consumed as runs of
consecutive segments: one noise level is drawn per item and held for the
whole run, the recurrent state is carried across the segments of a run,
and gradients are truncated at segment boundaries.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import datasynth, srcmodel
from .audioio import read_wav
from .subband import DEFAULT_SAMPLE_RATE, FilterBank, SubbandFrames, Waveform

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the iteration for diagnosis."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe; defaults are the full-scale settings."""

    iterations: int = 1_000_000
    batch_size: int = 64
    seq_seconds: float = 1.0
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    noise_low_db: float = -90.0
    noise_high_db: float = 0.0
    segments_per_file: int = 8
    seed: int = 0
    val_interval: int = 1000
    item_seconds: float = 8.0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.noise_low_db >= self.noise_high_db:
            raise ValueError("noise_low_db must be below noise_high_db")
        if self.segments_per_file * self.seq_seconds > self.item_seconds + 1e-9:
            raise ValueError("segments_per_file * seq_seconds exceeds the item length")


@dataclass(frozen=True)
class DatasetSpec:
    """Where training items come from: a WAV directory or a synth spec."""

    wav_dir: str | None = None
    synth: datasynth.SynthSpec | None = None
    split_fractions: tuple = (0.8, 0.1, 0.1)
    item_seconds: float = 8.0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    seed: int = 0

    def __post_init__(self):
        if (self.wav_dir is None) == (self.synth is None):
            raise ValueError("specify exactly one of wav_dir or synth")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


@dataclass
class TrainResult:
    params: srcmodel.ModelParams        # best-validation snapshot
    final_params: srcmodel.ModelParams
    history: list
    best_val_nll: float


def corrupt(frames, sigma_db: float, seed: int):
    """Add white Gaussian noise of the given power to subband coefficients."""
    srcmodel.check_noise_db(sigma_db)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    amp = 10.0 ** (sigma_db / 20.0)
    if isinstance(frames, SubbandFrames):
        noisy = frames.coeffs + amp * rng.standard_normal(frames.coeffs.shape)
        return replace(frames, coeffs=noisy)
    arr = np.asarray(frames)
    return arr + amp * rng.standard_normal(arr.shape).astype(arr.dtype, copy=False)


def cosine_lr(iteration: int, cfg: TrainConfig) -> float:
    """Cosine decay from lr_start at 0 to lr_end at cfg.iterations."""
    if not 0 <= iteration <= cfg.iterations:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.iterations}]")
    if cfg.iterations == 0:
        return cfg.lr_start
    frac = iteration / cfg.iterations
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + np.cos(np.pi * frac))


class Adam:
    """Standard Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, tensors: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, tensors: dict, grads: dict, lr: float) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            tensors[name] -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _adjust_length(samples: np.ndarray, target: int, rng: np.random.Generator) -> np.ndarray:
    if samples.size == target:
        return samples
    if samples.size < target:
        reps = int(np.ceil(target / samples.size))
        return np.tile(samples, reps)[:target]
    offset = int(rng.integers(0, samples.size - target + 1))
    return samples[offset:offset + target]


def load_items(spec: DatasetSpec) -> dict[str, list[np.ndarray]]:
    """Deterministic item list per split, each adjusted to item_seconds."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(29,)))
    target = int(round(spec.item_seconds * spec.sample_rate))
    if spec.wav_dir is not None:
        paths = sorted(Path(spec.wav_dir).glob("*.wav"))
        if not paths:
            raise ValueError(f"no WAV files in {spec.wav_dir}")
        raw = []
        for p in paths:
            w = read_wav(p)
            if w.sample_rate != spec.sample_rate:
                raise ValueError(
                    f"{p}: sample rate {w.sample_rate} != dataset rate {spec.sample_rate}"
                )
            raw.append(w.samples)
    else:
        raw = [datasynth.render_item(spec.synth, i) for i in range(spec.synth.count)]
    items = [_adjust_length(x, target, rng) for x in raw]
    labels = datasynth.assign_splits(len(items), spec.seed, spec.split_fractions)
    out: dict[str, list[np.ndarray]] = {"train": [], "val": [], "test": []}
    for item, label in zip(items, labels):
        out[label].append(item)
    return out


def _analyze_items(items, bank: FilterBank, dtype) -> list[np.ndarray]:
    return [bank.analyze(Waveform(x, DEFAULT_SAMPLE_RATE)).coeffs.astype(dtype) for x in items]


def _mean_nll(frames_list, sigmas, params, seg_frames, segments) -> float:
    """Forward-only validation NLL per coefficient, state carried across segments."""
    total, count = 0.0, 0
    batch = np.stack(frames_list)
    h = None
    for seg in range(segments):
        x = batch[:, seg * seg_frames:(seg + 1) * seg_frames]
        loglik, h = srcmodel.sequence_loglik(x, sigmas, params, h0=h)
        total -= loglik
        count += x.size
    return total / count


def train(dataset: DatasetSpec, model_cfg: srcmodel.ModelConfig, cfg: TrainConfig,
          dtype=np.float32, bank: FilterBank | None = None,
          log_path=None) -> TrainResult:
    """Run the NLL recipe and return the best-validation parameters.

    The recurrent state is carried (without gradient) across the
    ``segments_per_file`` consecutive segments of each item run, and the
    noise level is frozen per run. History records carry
    (iteration, lr, train_nll, val_nll).
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_data, rng_noise, rng_val = (np.random.default_rng(s) for s in seeds[:3])
    init_seed = int(seeds[3].generate_state(1)[0])

    params = srcmodel.init_params(model_cfg, seed=init_seed, dtype=dtype)
    if cfg.iterations == 0:
        return TrainResult(params.copy(), params, [], float("inf"))

    if bank is None:
        bank = FilterBank(channels=model_cfg.channels)
    splits = load_items(dataset)
    if not splits["train"]:
        raise ValueError("training split is empty")
    train_frames = _analyze_items(splits["train"], bank, dtype)
    val_frames = _analyze_items(splits["val"], bank, dtype) if splits["val"] else []
    val_sigmas = rng_val.uniform(cfg.noise_low_db, cfg.noise_high_db, size=len(val_frames))
    val_noisy = [
        corrupt(f, s, seed=int(rng_val.integers(2**31)))
        for f, s in zip(val_frames, val_sigmas)
    ]

    c = model_cfg.channels
    seg_frames = int(round(cfg.seq_seconds * dataset.sample_rate)) // c
    # analysis adds boundary frames; segments index from the signal start
    edge = bank.boundary_pad // c

    opt = Adam(params.tensors)
    wrt = params.trainable_names()
    history: list[dict] = []
    best_val = float("inf")
    best_params = params.copy()
    log_fh = open(log_path, "w") if log_path else None

    def validate() -> float:
        if not val_noisy:
            return float("nan")
        segs = min(cfg.segments_per_file,
                   (val_noisy[0].shape[0] - 2 * edge) // seg_frames)
        return _mean_nll([f[edge:] for f in val_noisy], val_sigmas, params,
                         seg_frames, segs)

    iteration = 0
    try:
        while iteration < cfg.iterations:
            idx = rng_data.integers(0, len(train_frames), size=cfg.batch_size)
            sigmas = rng_noise.uniform(cfg.noise_low_db, cfg.noise_high_db,
                                       size=cfg.batch_size)
            batch = np.stack([train_frames[i] for i in idx])
            noise = rng_noise.standard_normal(batch.shape).astype(dtype)
            noisy = batch + (10.0 ** (sigmas[:, None, None] / 20.0)).astype(dtype) * noise
            h = None
            for seg in range(cfg.segments_per_file):
                if iteration >= cfg.iterations:
                    break
                lr = cosine_lr(iteration, cfg)
                start = edge + seg * seg_frames
                x = noisy[:, start:start + seg_frames]
                try:
                    outs, grads = srcmodel.loglik_with_grads(x, sigmas, params,
                                                             wrt=wrt, h0=h)
                except ArithmeticError as exc:
                    raise TrainingDiverged(
                        f"non-finite loss at iteration {iteration} (lr={lr:.3e}, "
                        f"sigmas={np.array2string(sigmas, precision=1)})"
                    ) from exc
                h = outs["h_last"]
                nll = -float(outs["loglik"]) / x.size
                scale = -1.0 / x.size
                opt.step(params.tensors, {k: scale * g for k, g in grads.items()}, lr)
                iteration += 1
                record = {"iter": iteration, "lr": lr, "train_nll": nll, "val_nll": None}
                if iteration % cfg.val_interval == 0 or iteration == cfg.iterations:
                    val_nll = validate()
                    record["val_nll"] = val_nll
                    logger.info("iter %d lr %.3e train %.4f val %.4f",
                                iteration, lr, nll, val_nll)
                    if np.isfinite(val_nll) and val_nll < best_val:
                        best_val = val_nll
                        best_params = params.copy()
                history.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh:
            log_fh.close()

    if not np.isfinite(best_val):
        best_params = params.copy()
    return TrainResult(params=best_params, final_params=params,
                       history=history, best_val_nll=best_val)
