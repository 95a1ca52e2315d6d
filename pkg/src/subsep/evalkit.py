"""Objective evaluation: SI-SDR, mix consistency, and the ideal-ratio-mask
oracle baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window, istft, stft

from .subband import Waveform

SI_SDR_CAP_DB = 300.0

IRM_WINDOW = 2048
IRM_STRIDE = 1024
IRM_EPS = 1e-12


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def si_sdr(ref, est) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    The estimate is projected onto the reference before the error ratio, so
    the measure ignores gain. A zero-error estimate returns the 300 dB cap;
    an estimate orthogonal to the reference returns -inf.
    """
    ref = _samples(ref)
    est = _samples(est)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {est.shape}")
    ref_power = float(np.dot(ref, ref))
    if ref_power == 0.0:
        raise ValueError("reference signal is all zero")
    alpha = float(np.dot(est, ref)) / ref_power
    if alpha == 0.0:
        return float("-inf")
    err = alpha * ref - est
    err_power = float(np.dot(err, err))
    if err_power == 0.0:
        return SI_SDR_CAP_DB
    value = 10.0 * np.log10(alpha * alpha * ref_power / err_power)
    return min(value, SI_SDR_CAP_DB)


def mix_consistency(estimates, y, a=None) -> float:
    """SI-SDR between the observed mix and the re-mixed estimates."""
    parts = [_samples(e) for e in estimates]
    if a is None:
        a = np.ones(len(parts))
    remix = sum(w * p for w, p in zip(np.asarray(a, dtype=np.float64), parts))
    return si_sdr(y, remix)


def _stft(x, n_fft, stride):
    win = get_window("cosine", n_fft)
    return stft(x, window=win, nperseg=n_fft, noverlap=n_fft - stride,
                boundary="zeros", padded=True)[2]


def _istft(spec, n_fft, stride, length):
    win = get_window("cosine", n_fft)
    out = istft(spec, window=win, nperseg=n_fft, noverlap=n_fft - stride)[1]
    return out[:length]


def irm_separate(y, refs, stride: int = IRM_STRIDE, n_fft: int = IRM_WINDOW,
                 power_mask: bool = False, eps: float = IRM_EPS,
                 return_masks: bool = False):
    """Oracle separation by per-bin ratio masks of the reference magnitudes.

    Masks are magnitude ratios by default (``power_mask`` switches to squared
    magnitudes); each masked mix spectrum is resynthesized by overlap-add.
    """
    y_arr = _samples(y)
    ref_arrs = [_samples(r) for r in refs]
    for r in ref_arrs:
        if r.shape != y_arr.shape:
            raise ValueError("references must match the mix length")
    spec_y = _stft(y_arr, n_fft, stride)
    mags = []
    for r in ref_arrs:
        m = np.abs(_stft(r, n_fft, stride))
        mags.append(m**2 if power_mask else m)
    total = sum(mags) + eps
    masks = [m / total for m in mags]
    rate = y.sample_rate if isinstance(y, Waveform) else 0
    estimates = []
    for mask in masks:
        rec = _istft(mask * spec_y, n_fft, stride, y_arr.size)
        estimates.append(Waveform(rec, rate) if rate else rec)
    if return_masks:
        return estimates, masks
    return estimates


@dataclass
class EvalReport:
    """Per-item and aggregate separation metrics for one method."""

    method: str
    source_labels: list
    items: list  # dicts: {"item": id, "si_sdr": [...], "mix_consistency": x}

    def aggregate(self) -> dict:
        per_source = {
            label: float(np.mean([it["si_sdr"][i] for it in self.items]))
            for i, label in enumerate(self.source_labels)
        }
        per_source["mix"] = float(np.mean([it["mix_consistency"] for it in self.items]))
        return per_source

    def to_records(self) -> list:
        records = []
        for item in self.items:
            for label, value in zip(self.source_labels, item["si_sdr"]):
                records.append({"item": item["item"], "source": label,
                                "metric": "si_sdr", "value": value})
            records.append({"item": item["item"], "source": "mix",
                            "metric": "si_sdr", "value": item["mix_consistency"]})
        return records

    def format_table(self) -> str:
        agg = self.aggregate()
        width = max(len(label) for label in agg)
        lines = [f"method: {self.method} ({len(self.items)} items)"]
        for label in list(self.source_labels) + ["mix"]:
            lines.append(f"  {label:<{width}}  {agg[label]:8.2f} dB")
        return "\n".join(lines)

    def write(self, directory, stem: str | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or self.method
        records_path = directory / f"{stem}_records.jsonl"
        with open(records_path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (directory / f"{stem}_summary.txt").write_text(self.format_table() + "\n")
        return records_path


def evaluate(method_outputs, refs, mixes, a=None, method: str = "estimates",
             source_labels=None, item_ids=None) -> EvalReport:
    """Score separated outputs against references item by item."""
    n_items = len(refs)
    if len(method_outputs) != n_items or len(mixes) != n_items:
        raise ValueError(
            f"item count mismatch: {len(method_outputs)} outputs, "
            f"{n_items} refs, {len(mixes)} mixes"
        )
    if n_items == 0:
        raise ValueError("no items to evaluate")
    n_sources = len(refs[0])
    if source_labels is None:
        source_labels = [f"source{i}" for i in range(n_sources)]
    if item_ids is None:
        item_ids = list(range(n_items))
    items = []
    for idx in range(n_items):
        ests, sources, mix = method_outputs[idx], refs[idx], mixes[idx]
        if len(ests) != n_sources or len(sources) != n_sources:
            raise ValueError(f"item {item_ids[idx]}: missing sources")
        values = [si_sdr(sources[i], ests[i]) for i in range(n_sources)]
        items.append({
            "item": item_ids[idx],
            "si_sdr": values,
            "mix_consistency": mix_consistency(ests, mix, a),
        })
    return EvalReport(method=method, source_labels=list(source_labels), items=items)
