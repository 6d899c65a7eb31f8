"""Dataset types, the canonical on-disk format, subject splits and the
synthetic generator used for desk-scale verification.

On-disk layout (one directory per dataset)::

    manifest.json          stage, fs, channel names, mastoid indices, subjects
    profiles.csv           subject_id,dominance,sex,music_education,active_musician
    eeg_<id>.f64           raw stage: row-major C x N little-endian float64
    events_<id>.csv        raw stage: sample_index,label,condition
    epochs_<id>.f64        preprocessed stage: n x C x T little-endian float64
    epochs_<id>.csv        preprocessed stage: label,condition,degenerate
"""
from __future__ import annotations

import csv
import io
import json
import math
import re
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LABELS = ("target", "distractor")
CONDITIONS = ("visual", "rhythmic", "beep", "rhythmic+beep")
DOMINANCE = ("auditory", "visual")
EPOCH_SECONDS = 1.2
FORMAT_VERSION = 1

_ID_RE = re.compile(r"^[A-Za-z0-9_\-]+$")


class DatasetError(ValueError):
    """Validation failure; ``problems`` lists every offending subject/event."""

    def __init__(self, message: str, problems: Sequence[str] = ()):
        self.problems = list(problems)
        if self.problems:
            message = message + ":\n  " + "\n  ".join(self.problems)
        super().__init__(message)


@dataclass(frozen=True)
class Event:
    sample_index: int
    label: str
    condition: str


@dataclass(eq=False)
class RawRecording:
    subject_id: str
    samples: np.ndarray  # C x N, microvolts
    fs: float
    channel_names: list[str]
    mastoid_indices: list[int]
    events: list[Event] = field(default_factory=list)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def problems(self, epoch_seconds: float = EPOCH_SECONDS) -> list[str]:
        out = []
        sid = self.subject_id
        if self.samples.ndim != 2:
            return [f"{sid}: samples must be 2-D, got shape {self.samples.shape}"]
        if not self.fs > 0:
            out.append(f"{sid}: fs must be positive, got {self.fs}")
        if len(self.channel_names) != self.n_channels:
            out.append(f"{sid}: {len(self.channel_names)} channel names for "
                       f"{self.n_channels} channels")
        if not self.mastoid_indices:
            out.append(f"{sid}: no mastoid channels")
        if len(set(self.mastoid_indices)) != len(self.mastoid_indices):
            out.append(f"{sid}: duplicate mastoid indices {self.mastoid_indices}")
        for m in self.mastoid_indices:
            if not 0 <= m < self.n_channels:
                out.append(f"{sid}: mastoid index {m} out of range "
                           f"[0, {self.n_channels})")
        span = math.ceil(epoch_seconds * self.fs) if self.fs > 0 else 0
        for k, ev in enumerate(self.events):
            if ev.label not in LABELS:
                out.append(f"{sid}: event {k} has unknown label {ev.label!r}")
            if ev.condition not in CONDITIONS:
                out.append(f"{sid}: event {k} has unknown condition {ev.condition!r}")
            if not 0 <= ev.sample_index or ev.sample_index + span > self.n_samples:
                out.append(f"{sid}: event {k} at sample {ev.sample_index} exceeds "
                           f"recording bounds (N={self.n_samples}, epoch={span})")
        return out

    def __eq__(self, other):
        if not isinstance(other, RawRecording):
            return NotImplemented
        return (self.subject_id == other.subject_id
                and self.fs == other.fs
                and list(self.channel_names) == list(other.channel_names)
                and list(self.mastoid_indices) == list(other.mastoid_indices)
                and list(self.events) == list(other.events)
                and self.samples.dtype == other.samples.dtype
                and np.array_equal(self.samples, other.samples))


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    dominance: str
    sex: int
    music_education: int
    active_musician: int

    def __post_init__(self):
        if self.dominance not in DOMINANCE:
            raise DatasetError(f"{self.subject_id}: dominance must be one of "
                               f"{DOMINANCE}, got {self.dominance!r}")
        for name in ("sex", "music_education", "active_musician"):
            if getattr(self, name) not in (0, 1):
                raise DatasetError(f"{self.subject_id}: {name} must be 0 or 1")


@dataclass(eq=False)
class TrialEpoch:
    subject_id: str
    data: np.ndarray  # C x T
    label: str
    condition: str
    degenerate: bool = False

    def __eq__(self, other):
        if not isinstance(other, TrialEpoch):
            return NotImplemented
        return (self.subject_id == other.subject_id
                and self.label == other.label
                and self.condition == other.condition
                and self.degenerate == other.degenerate
                and self.data.dtype == other.data.dtype
                and np.array_equal(self.data, other.data))


@dataclass(eq=False)
class Dataset:
    """Either a set of raw recordings or a flat list of preprocessed epochs."""

    stage: str
    profiles: dict[str, SubjectProfile]
    fs: float
    channel_names: list[str]
    mastoid_indices: list[int]
    recordings: dict[str, RawRecording] = field(default_factory=dict)
    epochs: list[TrialEpoch] = field(default_factory=list)
    subjects: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in ("raw", "preprocessed"):
            raise DatasetError(f"unknown stage {self.stage!r}")
        if not self.subjects:
            ids = set(self.recordings) | {e.subject_id for e in self.epochs}
            self.subjects = sorted(ids)

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    def epochs_of(self, subject_id: str) -> list[TrialEpoch]:
        return [e for e in self.epochs if e.subject_id == subject_id]

    def problems(self) -> list[str]:
        out = []
        for sid in self.subjects:
            if not _ID_RE.match(sid):
                out.append(f"{sid!r}: subject ids must match {_ID_RE.pattern}")
            if sid not in self.profiles:
                out.append(f"{sid}: profile missing")
        if self.stage == "raw":
            for sid, rec in self.recordings.items():
                out.extend(rec.problems())
        else:
            for k, ep in enumerate(self.epochs):
                if ep.subject_id not in self.subjects:
                    out.append(f"epoch {k}: subject {ep.subject_id} not listed")
                if ep.data.shape[0] != self.n_channels:
                    out.append(f"{ep.subject_id}: epoch {k} has {ep.data.shape[0]} "
                               f"rows, expected {self.n_channels}")
        return out

    def validate(self) -> "Dataset":
        problems = self.problems()
        if problems:
            raise DatasetError("invalid dataset", problems)
        return self

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.stage == other.stage
                and self.profiles == other.profiles
                and self.fs == other.fs
                and list(self.channel_names) == list(other.channel_names)
                and list(self.mastoid_indices) == list(other.mastoid_indices)
                and self.subjects == other.subjects
                and self.recordings == other.recordings
                and self.epochs == other.epochs)


# ---------------------------------------------------------------------------
# canonical format

_PROFILE_FIELDS = ("subject_id", "dominance", "sex", "music_education", "active_musician")


def _write_f64(path: Path, array: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_f64(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    flat = np.frombuffer(path.read_bytes(), dtype="<f8")
    if flat.size != int(np.prod(shape)):
        raise DatasetError(f"{path.name}: expected {int(np.prod(shape))} values, "
                           f"found {flat.size}")
    return flat.reshape(shape).astype(np.float64)


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def save_dataset(dataset: Dataset, path) -> None:
    """Write ``dataset`` in the canonical layout under directory ``path``."""
    dataset.validate()
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc

    subjects = []
    for sid in dataset.subjects:
        entry = {"id": sid}
        if dataset.stage == "raw":
            rec = dataset.recordings[sid]
            entry["n_samples"] = rec.n_samples
            _write_f64(root / f"eeg_{sid}.f64", rec.samples)
            (root / f"events_{sid}.csv").write_text(_csv_text(
                ("sample_index", "label", "condition"),
                ((e.sample_index, e.label, e.condition) for e in rec.events)))
        else:
            eps = dataset.epochs_of(sid)
            entry["n_epochs"] = len(eps)
            if eps:
                entry["n_times"] = eps[0].data.shape[1]
                _write_f64(root / f"epochs_{sid}.f64", np.stack([e.data for e in eps]))
                (root / f"epochs_{sid}.csv").write_text(_csv_text(
                    ("label", "condition", "degenerate"),
                    ((e.label, e.condition, int(e.degenerate)) for e in eps)))
        subjects.append(entry)

    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": dataset.stage,
        "fs": dataset.fs,
        "channel_names": list(dataset.channel_names),
        "mastoid_indices": list(dataset.mastoid_indices),
        "subjects": subjects,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    profiles = [dataset.profiles[sid] for sid in sorted(dataset.profiles)]
    (root / "profiles.csv").write_text(_csv_text(
        _PROFILE_FIELDS,
        ((p.subject_id, p.dominance, p.sex, p.music_education, p.active_musician)
         for p in profiles)))


def _read_profiles(path: Path) -> dict[str, SubjectProfile]:
    if not path.exists():
        raise DatasetError(f"missing profiles table {path}")
    out = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["subject_id"]] = SubjectProfile(
                row["subject_id"], row["dominance"], int(row["sex"]),
                int(row["music_education"]), int(row["active_musician"]))
    return out


def load_dataset(path) -> Dataset:
    """Read a canonical dataset directory and validate every invariant."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if not manifest.get("subjects"):
        raise DatasetError("empty dataset")
    profiles = _read_profiles(root / "profiles.csv")
    stage = manifest.get("stage", "raw")
    channel_names = list(manifest["channel_names"])
    mastoids = [int(m) for m in manifest["mastoid_indices"]]
    fs = manifest["fs"]
    C = len(channel_names)

    problems = []
    recordings: dict[str, RawRecording] = {}
    epochs: list[TrialEpoch] = []
    subject_ids = [s["id"] for s in manifest["subjects"]]
    for entry in manifest["subjects"]:
        sid = entry["id"]
        if sid not in profiles:
            problems.append(f"{sid}: profile missing")
        if stage == "raw":
            samples = _read_f64(root / f"eeg_{sid}.f64", (C, int(entry["n_samples"])))
            events = []
            with (root / f"events_{sid}.csv").open(newline="") as fh:
                for row in csv.DictReader(fh):
                    events.append(Event(int(row["sample_index"]), row["label"],
                                        row["condition"]))
            recordings[sid] = RawRecording(sid, samples, fs, channel_names, mastoids, events)
        else:
            n = int(entry["n_epochs"])
            if n == 0:
                continue
            data = _read_f64(root / f"epochs_{sid}.f64", (n, C, int(entry["n_times"])))
            with (root / f"epochs_{sid}.csv").open(newline="") as fh:
                rows = list(csv.DictReader(fh))
            if len(rows) != n:
                problems.append(f"{sid}: {len(rows)} epoch rows for {n} epochs")
                continue
            for k, row in enumerate(rows):
                epochs.append(TrialEpoch(sid, data[k].copy(), row["label"],
                                         row["condition"], bool(int(row["degenerate"]))))
    if problems:
        raise DatasetError("invalid dataset", problems)
    ds = Dataset(stage, profiles, fs, channel_names, mastoids,
                 recordings=recordings, epochs=epochs, subjects=subject_ids)
    return ds.validate()


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple[str, ...]
    unseen_ids: tuple[str, ...]
    within_test_fraction: float = 0.2
    seed: int = 0

    def to_dict(self) -> dict:
        return {"train_ids": list(self.train_ids), "unseen_ids": list(self.unseen_ids),
                "within_test_fraction": self.within_test_fraction, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(tuple(d["train_ids"]), tuple(d["unseen_ids"]),
                   float(d["within_test_fraction"]), int(d["seed"]))


@dataclass
class Partition:
    train: list[TrialEpoch]
    within_test: list[TrialEpoch]
    unseen: list[TrialEpoch]


def _key_seed(seed: int, *parts: str) -> np.random.Generator:
    words = [seed] + [zlib.crc32(p.encode()) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(words))


def split_subjects(dataset: Dataset, n_unseen: int, seed: int,
                   within_test_fraction: float = 0.2) -> SplitSpec:
    """Hold out ``n_unseen`` randomly chosen subjects."""
    ids = sorted(dataset.subjects)
    if not 0 <= n_unseen < len(ids):
        raise DatasetError(f"n_unseen={n_unseen} must be in [0, {len(ids)})")
    if not 0 <= within_test_fraction < 1:
        raise DatasetError("within_test_fraction must lie in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(ids))
    unseen = sorted(ids[i] for i in order[:n_unseen])
    train = [s for s in ids if s not in unseen]
    return SplitSpec(tuple(train), tuple(unseen), within_test_fraction, seed)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def partition_epochs(dataset: Dataset, split: SplitSpec) -> Partition:
    """Apply ``split`` to a preprocessed dataset.

    Within-subject epochs are split into train/test by a stratified draw per
    (subject, condition); each stratum contributes round(fraction * n) test
    epochs. Only the order of epochs within a subject matters; interleaving
    subjects differently gives the same partition.
    """
    if dataset.stage != "preprocessed":
        raise DatasetError("partition_epochs needs a preprocessed dataset")
    train_set, unseen_set = set(split.train_ids), set(split.unseen_ids)
    if train_set & unseen_set:
        raise DatasetError("train and unseen subjects overlap",
                           sorted(train_set & unseen_set))
    strata: dict[tuple[str, str], list[TrialEpoch]] = {}
    unseen = []
    for ep in dataset.epochs:
        if ep.subject_id in unseen_set:
            unseen.append(ep)
        elif ep.subject_id in train_set:
            strata.setdefault((ep.subject_id, ep.condition), []).append(ep)
    train, test = [], []
    for key in sorted(strata):
        members = strata[key]
        n_test = _round_half_up(split.within_test_fraction * len(members))
        perm = _key_seed(split.seed, *key).permutation(len(members))
        test_idx = set(perm[:n_test].tolist())
        for i, ep in enumerate(members):
            (test if i in test_idx else train).append(ep)
    part = Partition(train, test, unseen)
    audit_partition(part, split)
    return part


def audit_partition(part: Partition, split: SplitSpec) -> None:
    """Hard failure if any unseen-subject epoch is reachable from training."""
    unseen = set(split.unseen_ids)
    leaked = sorted({e.subject_id for e in part.train + part.within_test
                     if e.subject_id in unseen})
    if leaked:
        raise DatasetError("unseen subjects leaked into the within split", leaked)
    stray = sorted({e.subject_id for e in part.unseen if e.subject_id not in unseen})
    if stray:
        raise DatasetError("training subjects present in the unseen split", stray)


# ---------------------------------------------------------------------------
# synthetic generator

_CHANNEL_POOL = ["Fz", "Cz", "Pz", "Oz", "F3", "F4", "C3", "C4", "P3", "P4",
                 "O1", "O2", "T7", "T8", "Fp1", "Fp2", "F7", "F8", "P7", "P8"]


@dataclass(frozen=True)
class EffectRule:
    """How profile bits shape the evoked response.

    ``latency_shift`` (s) is added for visually dominant subjects,
    ``sex_flips_pattern`` negates the spatial pattern when sex == 1 and each
    music bit scales the amplitude by (1 + music_gain) when set and
    (1 - music_gain) when clear.
    """

    latency_shift: float = 0.15
    sex_flips_pattern: bool = True
    music_gain: float = 0.10

    @classmethod
    def null(cls) -> "EffectRule":
        return cls(0.0, False, 0.0)


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 14
    epochs_per_subject: int = 300
    n_channels: int = 8
    fs: float = 256.0
    snr: float = 1.0
    effect: EffectRule = EffectRule()
    seed: int = 0
    base_latency: float = 0.30
    bump_width: float = 0.10
    isi: float = 1.6
    jitter: float = 0.2
    lead: float = 0.5
    n_mastoids: int = 2
    reference_noise: float = 1.0

    def problems(self) -> list[str]:
        out = []
        if not self.snr >= 0:
            out.append(f"snr must be >= 0, got {self.snr}")
        if self.epochs_per_subject < 2:
            out.append(f"epochs_per_subject must be >= 2, got {self.epochs_per_subject}")
        if self.n_subjects < 1:
            out.append("n_subjects must be >= 1")
        if self.n_channels <= self.n_mastoids or self.n_mastoids < 1:
            out.append("need at least one mastoid and one scalp channel")
        if not self.fs > 0:
            out.append("fs must be positive")
        if self.isi < EPOCH_SECONDS + self.jitter:
            out.append("isi must leave room for a full epoch after jitter")
        return out

    @property
    def n_samples(self) -> int:
        slot = int(round(self.isi * self.fs))
        return int(round(self.lead * self.fs)) + self.epochs_per_subject * slot

    @property
    def channel_names(self) -> list[str]:
        n_scalp = self.n_channels - self.n_mastoids
        scalp = (_CHANNEL_POOL[:n_scalp] if n_scalp <= len(_CHANNEL_POOL)
                 else [f"E{i}" for i in range(n_scalp)])
        return scalp + [f"M{i + 1}" for i in range(self.n_mastoids)]

    @property
    def mastoid_indices(self) -> list[int]:
        return list(range(self.n_channels - self.n_mastoids, self.n_channels))


def pink_filter(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Spectral shaping for unit-power 1/f noise of length ``n``.

    Returns the rfft-domain gain and the exact (circular) autocovariance of
    the resulting process, normalised so that lag 0 equals 1.
    """
    f = np.fft.rfftfreq(n)
    gain = np.zeros_like(f)
    gain[1:] = 1.0 / np.sqrt(f[1:])
    acov = np.fft.irfft(gain ** 2, n=n)
    gain = gain / math.sqrt(acov[0])
    return gain, acov / acov[0]


def pink_noise(rng: np.random.Generator, shape: tuple[int, int],
               gain: np.ndarray | None = None) -> np.ndarray:
    n = shape[-1]
    if gain is None:
        gain, _ = pink_filter(n)
    white = rng.standard_normal(shape)
    return np.fft.irfft(np.fft.rfft(white, axis=-1) * gain, n=n, axis=-1)


def _draw_profiles(rng: np.random.Generator, n: int) -> np.ndarray:
    need = min(4, n)
    for _ in range(10_000):
        bits = rng.integers(0, 2, size=(n, 4))
        distinct = len({tuple(b) for b in bits})
        varied = n < 2 or all(0 < bits[:, j].sum() < n for j in range(4))
        if distinct >= need and varied:
            return bits
    raise RuntimeError("could not draw a covering set of profiles")


def spatial_pattern(spec: SyntheticSpec) -> np.ndarray:
    """Fixed random topography, zero on mastoids, unit RMS over scalp channels."""
    rng = _key_seed(spec.seed, "pattern")
    n_scalp = spec.n_channels - spec.n_mastoids
    w = rng.standard_normal(n_scalp)
    w /= np.sqrt(np.mean(w ** 2))
    return np.concatenate([w, np.zeros(spec.n_mastoids)])


def profile_response(spec: SyntheticSpec, profile: SubjectProfile) -> tuple[float, float]:
    """(latency in s, signed amplitude multiplier) of a subject's evoked bump."""
    eff = spec.effect
    latency = spec.base_latency + (eff.latency_shift if profile.dominance == "visual" else 0.0)
    amp = 1.0
    if eff.sex_flips_pattern and profile.sex == 1:
        amp = -amp
    for bit in (profile.music_education, profile.active_musician):
        amp *= 1.0 + eff.music_gain * (1 if bit else -1)
    return latency, amp


def bump(t: np.ndarray, latency: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((t - latency) / width) ** 2)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Raw-stage dataset whose epochs follow y * a * g(t - L(profile)) + noise."""
    problems = spec.problems()
    if problems:
        raise DatasetError("invalid synthetic spec", problems)
    noiseless = math.isinf(spec.snr)
    amplitude = 1.0 if noiseless else spec.snr

    bits = _draw_profiles(_key_seed(spec.seed, "profiles"), spec.n_subjects)
    ids = [f"S{i:02d}" for i in range(spec.n_subjects)]
    profiles = {
        sid: SubjectProfile(sid, DOMINANCE[0] if b[0] else DOMINANCE[1],
                            int(b[1]), int(b[2]), int(b[3]))
        for sid, b in zip(ids, bits)
    }
    pattern = spatial_pattern(spec)
    N = spec.n_samples
    gain, _ = pink_filter(N)
    slot = int(round(spec.isi * spec.fs))
    lead = int(round(spec.lead * spec.fs))
    max_jitter = int(round(spec.jitter * spec.fs))
    span = slot  # bump is evaluated over the whole slot
    t_slot = np.arange(span) / spec.fs

    recordings = {}
    for sid in ids:
        rng = _key_seed(spec.seed, "subject", sid)
        n_ev = spec.epochs_per_subject
        labels = np.array([0] * (n_ev // 2) + [1] * (n_ev - n_ev // 2))
        labels = labels[rng.permutation(n_ev)]
        jitter = rng.integers(0, max_jitter + 1, size=n_ev)
        onsets = lead + np.arange(n_ev) * slot + jitter
        if noiseless:
            samples = np.zeros((spec.n_channels, N))
        else:
            samples = pink_noise(rng, (spec.n_channels, N), gain)
            common = pink_noise(rng, (1, N), gain)
            samples += spec.reference_noise * common
        latency, amp = profile_response(spec, profiles[sid])
        wave = amplitude * amp * bump(t_slot, latency, spec.bump_width)
        events = []
        for k in range(n_ev):
            y = 1.0 if labels[k] == 0 else -1.0
            stop = min(onsets[k] + span, N)
            samples[:, onsets[k]:stop] += y * np.outer(pattern, wave[:stop - onsets[k]])
            events.append(Event(int(onsets[k]), LABELS[labels[k]],
                                CONDITIONS[min(4 * k // n_ev, 3)]))
        recordings[sid] = RawRecording(sid, samples, spec.fs, spec.channel_names,
                                       spec.mastoid_indices, events)
    return Dataset("raw", profiles, spec.fs, spec.channel_names, spec.mastoid_indices,
                   recordings=recordings, subjects=ids).validate()


# ---------------------------------------------------------------------------
# Bayes oracle


@dataclass(frozen=True)
class OracleResult:
    accuracy: float           # Monte-Carlo estimate
    analytic: float           # closed form Phi(d'/2) averaged over subjects
    n_draws: int
    whitened: bool


def _window_covariance(spec: SyntheticSpec, context: float):
    fs = spec.fs
    pre = int(round(context * fs))
    W = pre + math.ceil(EPOCH_SECONDS * fs) + pre
    t = (np.arange(W) - pre) / fs
    _, acov = pink_filter(spec.n_samples)
    lags = np.abs(np.arange(W)[:, None] - np.arange(W)[None, :])
    return t, acov[lags]


def oracle_accuracy(spec: SyntheticSpec, profiles: Sequence[SubjectProfile],
                    n_draws: int = 100_000, seed: int = 0, context: float = 1.0,
                    whiten: bool = True) -> OracleResult:
    """Monte-Carlo accuracy of the profile-aware template classifier.

    Each draw picks a subject (uniformly) and a label, synthesises the raw
    epoch ``y * template + noise`` on a window extended by ``context``
    seconds on both sides (noise drawn from the exact pink covariance, one
    independent process per channel) and classifies by the sign of the
    correlation with the subject's template. With ``whiten`` the
    correlation is taken after noise whitening, which is the Bayes rule for
    Gaussian noise; without it this is the plain matched filter.
    """
    from scipy.stats import norm

    if not profiles:
        raise ValueError("oracle needs at least one profile")
    t, R = _window_covariance(spec, context)
    L = np.linalg.cholesky(R)
    pattern = spatial_pattern(spec)
    noiseless = math.isinf(spec.snr)
    amplitude = 1.0 if noiseless else spec.snr

    clean, projected, dprimes = [], [], []
    for p in profiles:
        latency, amp = profile_response(spec, p)
        tmpl = amplitude * amp * np.outer(pattern, bump(t, latency, spec.bump_width))
        filt = np.linalg.solve(R, tmpl.T).T if whiten else tmpl
        # <filt, L z> == <filt L, z>
        proj = filt @ L
        signal = float(np.sum(filt * tmpl))
        clean.append(signal)
        projected.append(proj)
        dprimes.append(np.inf if noiseless else signal / float(np.sqrt(np.sum(proj ** 2))))
    analytic = float(np.mean(norm.cdf(dprimes)))
    clean = np.array(clean)
    projected = np.stack(projected).reshape(len(profiles), -1)

    rng = np.random.default_rng(seed)
    correct = 0
    done = 0
    while done < n_draws:
        m = min(5000, n_draws - done)
        who = rng.integers(0, len(profiles), size=m)
        y = np.where(rng.integers(0, 2, size=m) == 0, 1.0, -1.0)
        z = rng.standard_normal((m, projected.shape[1]))
        score = y * clean[who]
        if not noiseless:
            score = score + np.einsum("mk,mk->m", projected[who], z)
        correct += int(np.sum(np.where(score >= 0, 1.0, -1.0) == y))
        done += m
    return OracleResult(correct / n_draws, analytic, n_draws, whiten)
