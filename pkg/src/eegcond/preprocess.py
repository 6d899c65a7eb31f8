"""Signal chain: mastoid re-reference, 1-30 Hz zero-phase band-pass,
decimation to 64 Hz, 1.2 s epoching and per-epoch normalisation."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy import signal

from .dataset import Dataset, DatasetError, Event, RawRecording, TrialEpoch


@dataclass(frozen=True)
class PreprocessConfig:
    band_low: float = 1.0
    band_high: float = 30.0
    target_fs: float = 64.0
    epoch_seconds: float = 1.2
    filter_order: int = 4
    eps: float = 1e-12
    normalize_axis: str = "channel"  # or "epoch": one mean/variance per C x T block

    def __post_init__(self):
        if not 0 < self.band_low < self.band_high < self.target_fs / 2:
            raise ValueError("need 0 < band_low < band_high < target_fs / 2, got "
                             f"{self.band_low}, {self.band_high}, {self.target_fs}")
        if not self.epoch_seconds > 0:
            raise ValueError("epoch_seconds must be positive")
        if self.filter_order < 1:
            raise ValueError("filter_order must be >= 1")
        if self.normalize_axis not in ("channel", "epoch"):
            raise ValueError(f"normalize_axis must be 'channel' or 'epoch', "
                             f"got {self.normalize_axis!r}")

    @property
    def epoch_samples(self) -> int:
        # 1.2 s at 64 Hz is 76.8 samples; round half up
        return int(math.floor(self.epoch_seconds * self.target_fs + 0.5))


def rereference(rec: RawRecording) -> RawRecording:
    """Subtract the mean of the mastoid channels from every channel."""
    if not rec.mastoid_indices:
        raise DatasetError(f"{rec.subject_id}: empty mastoid set")
    ref = rec.samples[list(rec.mastoid_indices)].mean(axis=0)
    return replace(rec, samples=rec.samples - ref[None, :])


def design_bandpass(fs: float, cfg: PreprocessConfig) -> np.ndarray:
    if not fs > 2 * cfg.band_high:
        raise DatasetError(f"fs={fs} Hz too low for a {cfg.band_high} Hz band edge")
    return signal.butter(cfg.filter_order, [cfg.band_low, cfg.band_high],
                         btype="bandpass", fs=fs, output="sos")


def settle_length(sos: np.ndarray, decay: float = 0.01) -> int:
    """Samples for the slowest pole's envelope to fall to ``decay``."""
    _, poles, _ = signal.sos2zpk(sos)
    r = float(np.max(np.abs(poles)))
    return int(math.ceil(math.log(decay) / math.log(r)))


def bandpass(rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig()) -> RawRecording:
    """Butterworth band-pass run forward and backward (zero phase).

    Edges are padded by odd reflection over three settle lengths (capped at
    the record length). Each channel is filtered independently.
    """
    sos = design_bandpass(rec.fs, cfg)
    n = rec.n_samples
    padlen = min(3 * settle_length(sos), n - 1)
    out = signal.sosfiltfilt(sos, rec.samples, axis=-1, padtype="odd", padlen=padlen)
    return replace(rec, samples=out)


def downsample(rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig()) -> RawRecording:
    """Bring ``rec`` to ``cfg.target_fs``.

    Integer ratios keep every k-th sample from index 0 (the band-pass has
    already removed content above the new Nyquist); other ratios go through
    polyphase resampling. Event indices become floor(index * target_fs / fs).
    """
    ratio = rec.fs / cfg.target_fs
    if ratio < 1:
        raise DatasetError(f"{rec.subject_id}: cannot downsample {rec.fs} Hz to "
                           f"{cfg.target_fs} Hz")
    if float(ratio).is_integer():
        step = int(ratio)
        samples = rec.samples[:, ::step].copy()
        events = [replace(e, sample_index=e.sample_index // step) for e in rec.events]
    else:
        frac = (Fraction(cfg.target_fs).limit_denominator(10_000)
                / Fraction(rec.fs).limit_denominator(10_000))
        samples = signal.resample_poly(rec.samples, frac.numerator, frac.denominator, axis=-1)
        events = [replace(e, sample_index=int(math.floor(e.sample_index * cfg.target_fs / rec.fs)))
                  for e in rec.events]
    return replace(rec, samples=samples, fs=cfg.target_fs, events=events)


def epoch(rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig()) -> list[TrialEpoch]:
    """Cut one window [index, index + T) per event, in event order."""
    if rec.fs != cfg.target_fs:
        raise DatasetError(f"{rec.subject_id}: epoching expects {cfg.target_fs} Hz, "
                           f"got {rec.fs}")
    T = cfg.epoch_samples
    out = []
    for k, ev in enumerate(rec.events):
        if ev.sample_index < 0 or ev.sample_index + T > rec.n_samples:
            raise DatasetError(f"{rec.subject_id}: event {k} at {ev.sample_index} "
                               f"runs past the recording end ({rec.n_samples})")
        data = rec.samples[:, ev.sample_index:ev.sample_index + T].copy()
        out.append(TrialEpoch(rec.subject_id, data, ev.label, ev.condition))
    return out


def normalize(ep: TrialEpoch, cfg: PreprocessConfig = PreprocessConfig()) -> TrialEpoch:
    """Zero mean, unit variance per channel row (or per block).

    Rows whose variance is below ``cfg.eps`` are zeroed and the epoch is
    flagged degenerate.
    """
    x = ep.data
    axis = 1 if cfg.normalize_axis == "channel" else None
    mean = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    flat = var < cfg.eps
    safe = np.where(flat, 1.0, var)
    out = np.where(flat, 0.0, (x - mean) / np.sqrt(safe))
    return replace(ep, data=out, degenerate=bool(ep.degenerate or np.any(flat)))


def preprocess_recording(rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig()
                         ) -> tuple[list[TrialEpoch], int]:
    """Run the chain on one recording; returns (epochs, n_boundary_excluded).

    Events whose window no longer fits after rescaling to the target rate
    are dropped and counted.
    """
    down = downsample(bandpass(rereference(rec), cfg), cfg)
    T = cfg.epoch_samples
    keep = [e for e in down.events if 0 <= e.sample_index and e.sample_index + T <= down.n_samples]
    excluded = len(down.events) - len(keep)
    epochs = [normalize(e, cfg) for e in epoch(replace(down, events=keep), cfg)]
    return epochs, excluded


def preprocess_pipeline(dataset: Dataset, cfg: PreprocessConfig = PreprocessConfig()) -> Dataset:
    """Raw dataset -> preprocessed dataset; subjects are emitted in sorted id order."""
    if dataset.stage != "raw":
        raise DatasetError("stage mismatch: preprocess expects a raw dataset, "
                           f"got {dataset.stage!r}")
    epochs: list[TrialEpoch] = []
    for sid in sorted(dataset.recordings):
        eps, _ = preprocess_recording(dataset.recordings[sid], cfg)
        epochs.extend(eps)
    return Dataset("preprocessed", dict(dataset.profiles), cfg.target_fs,
                   list(dataset.channel_names), list(dataset.mastoid_indices),
                   epochs=epochs, subjects=sorted(dataset.subjects))

