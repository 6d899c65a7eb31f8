"""Convert a downloaded WithMe release into the canonical dataset layout.

The public release layout could not be inspected when this adapter was
written, so it accepts the most common shapes and fails loudly otherwise:

* ``profiles.csv`` (or ``.tsv``) with a subject column and the four profile
  attributes under any of the aliases in ``_ALIASES``;
* one file per subject, ``<id>.npz`` or ``<id>.mat``, holding ``eeg``
  (channels x samples), ``fs``, ``channels`` and an event table given either
  as ``events`` (rows of sample, label, condition) or as the three arrays
  ``event_samples``, ``event_labels`` and ``event_conditions``.

Mastoid channels are found by name (M1/M2, A1/A2, TP9/TP10) unless
``mastoids`` is passed explicitly.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (CONDITIONS, LABELS, Dataset, DatasetError, Event, RawRecording,
                      SubjectProfile, save_dataset)

MASTOID_NAMES = ("M1", "M2", "A1", "A2", "TP9", "TP10")

_ALIASES = {
    "subject_id": ("subject_id", "subject", "id", "participant"),
    "dominance": ("dominance", "sensory_dominance"),
    "sex": ("sex", "gender"),
    "music_education": ("music_education", "musical_education", "music_edu"),
    "active_musician": ("active_musician", "musician", "active"),
}
_LABEL_CODES = {"1": "target", "0": "distractor", "t": "target", "d": "distractor"}
_CONDITION_CODES = {str(k + 1): c for k, c in enumerate(CONDITIONS)}


def _column(header: Sequence[str], field: str) -> str:
    low = {h.strip().lower(): h for h in header}
    for alias in _ALIASES[field]:
        if alias in low:
            return low[alias]
    raise DatasetError(f"profiles table has no column for {field!r} (saw {list(header)})")


def _bit(value: str, field: str, sid: str) -> int:
    v = str(value).strip().lower()
    if field == "sex":
        mapping = {"0": 0, "1": 1, "f": 0, "female": 0, "m": 1, "male": 1}
    else:
        mapping = {"0": 0, "1": 1, "no": 0, "yes": 1, "false": 0, "true": 1}
    if v not in mapping:
        raise DatasetError(f"{sid}: cannot read {field}={value!r}")
    return mapping[v]


def read_profiles(path: Path) -> dict[str, SubjectProfile]:
    delimiter = "\t" if path.suffix == ".tsv" else ","
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        cols = {f: _column(reader.fieldnames or [], f) for f in _ALIASES}
        out = {}
        for row in reader:
            sid = _subject_id(row[cols["subject_id"]])
            dom = row[cols["dominance"]].strip().lower()
            dom = {"a": "auditory", "v": "visual"}.get(dom, dom)
            out[sid] = SubjectProfile(sid, dom,
                                      _bit(row[cols["sex"]], "sex", sid),
                                      _bit(row[cols["music_education"]], "music_education", sid),
                                      _bit(row[cols["active_musician"]], "active_musician", sid))
    return out


def _subject_id(raw) -> str:
    text = str(raw).strip()
    return f"S{int(text):02d}" if text.isdigit() else text


def _text(x) -> str:
    if isinstance(x, bytes):
        return x.decode()
    if isinstance(x, np.ndarray):
        return _text(x.ravel()[0]) if x.size else ""
    return str(x).strip()


def _norm_label(x) -> str:
    t = _text(x).lower()
    t = _LABEL_CODES.get(t, t)
    if t not in LABELS:
        raise DatasetError(f"unknown event label {x!r}")
    return t


def _norm_condition(x) -> str:
    t = _text(x).lower()
    t = _CONDITION_CODES.get(t, t)
    if t not in CONDITIONS:
        raise DatasetError(f"unknown condition {x!r}")
    return t


def _load_arrays(path: Path) -> dict:
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    from scipy.io import loadmat
    return {k: v for k, v in loadmat(path, squeeze_me=True).items() if not k.startswith("__")}


def read_recording(path: Path, mastoids: Sequence[int] | None = None) -> RawRecording:
    d = _load_arrays(path)
    missing = [k for k in ("eeg", "fs", "channels") if k not in d]
    if missing:
        raise DatasetError(f"{path.name}: missing arrays {missing}")
    samples = np.asarray(d["eeg"], dtype=np.float64)
    channels = [_text(c) for c in np.atleast_1d(d["channels"])]
    if samples.shape[0] != len(channels) and samples.shape[1] == len(channels):
        samples = samples.T
    if mastoids is None:
        mastoids = [i for i, c in enumerate(channels) if c.upper() in MASTOID_NAMES]
    if "events" in d:
        ev = np.atleast_2d(d["events"])
        triples = [(r[0], r[1], r[2]) for r in ev]
    else:
        triples = zip(np.atleast_1d(d["event_samples"]), np.atleast_1d(d["event_labels"]),
                      np.atleast_1d(d["event_conditions"]))
    events = [Event(int(float(_text(s))), _norm_label(lab), _norm_condition(cond))
              for s, lab, cond in triples]
    return RawRecording(_subject_id(path.stem), samples, float(np.asarray(d["fs"]).ravel()[0]),
                        channels, list(mastoids), events)


def convert_withme(src, dst, mastoids: Sequence[int] | None = None) -> Dataset:
    """Read ``src`` (layout in the module docstring) and write ``dst``."""
    src = Path(src)
    prof_path = next((p for p in (src / "profiles.csv", src / "profiles.tsv") if p.exists()),
                     None)
    if prof_path is None:
        raise DatasetError(f"no profiles.csv or profiles.tsv in {src}")
    profiles = read_profiles(prof_path)
    files = sorted(p for p in src.iterdir() if p.suffix in (".npz", ".mat"))
    if not files:
        raise DatasetError(f"no per-subject .npz or .mat files in {src}")
    recs = {}
    for p in files:
        rec = read_recording(p, mastoids)
        recs[rec.subject_id] = rec
    first = recs[min(recs)]
    for rec in recs.values():
        if rec.channel_names != first.channel_names or rec.fs != first.fs:
            raise DatasetError(f"{rec.subject_id}: channel list or sampling rate differs "
                               f"from {first.subject_id}")
    ds = Dataset("raw", profiles, first.fs, first.channel_names, first.mastoid_indices,
                 recordings=recs)
    save_dataset(ds, dst)
    return ds


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m eegcond.withme",
                                description="Convert a WithMe download to the canonical layout.")
    p.add_argument("src", type=Path)
    p.add_argument("dst", type=Path)
    p.add_argument("--mastoids", type=int, nargs="+", help="mastoid channel indices")
    args = p.parse_args(argv)
    try:
        ds = convert_withme(args.src, args.dst, args.mastoids)
    except DatasetError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(f"converted {len(ds.subjects)} subjects -> {args.dst}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
