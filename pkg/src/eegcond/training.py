"""Adam training with early stopping, accuracy reports, the +/-IDs ablation
and the dominance-split evaluation."""
from __future__ import annotations

import copy
import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .conditioning import profile_codes
from .dataset import (LABELS, Dataset, DatasetError, SplitSpec, SubjectProfile,
                      TrialEpoch, audit_partition, partition_epochs, split_subjects)
from .models import Decoder, ModelSpec, build_model

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    precision: int = 32
    max_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == 64 else torch.float32


@dataclass
class LabeledSet:
    """Stacked epochs ready for batching. Label 0 is target, 1 distractor."""

    x: np.ndarray                 # n, C, T
    y: np.ndarray                 # n
    subject_ids: np.ndarray       # n
    conditions: np.ndarray        # n
    codes: np.ndarray | None = None  # n, 4

    @classmethod
    def from_epochs(cls, epochs: Sequence[TrialEpoch],
                    profiles: Mapping[str, SubjectProfile] | None = None) -> "LabeledSet":
        if epochs:
            x = np.stack([e.data for e in epochs])
        else:
            x = np.zeros((0, 0, 0))
        y = np.array([LABELS.index(e.label) for e in epochs], dtype=np.int64)
        sids = np.array([e.subject_id for e in epochs], dtype=object)
        conds = np.array([e.condition for e in epochs], dtype=object)
        codes = profile_codes(profiles, sids) if profiles is not None and epochs else None
        if profiles is not None and not epochs:
            codes = np.zeros((0, 4), dtype=np.int64)
        return cls(x, y, sids, conds, codes)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.x[idx], self.y[idx], self.subject_ids[idx],
                          self.conditions[idx],
                          None if self.codes is None else self.codes[idx])


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float | None] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    steps: int = 0
    wall_time: float = 0.0

    @property
    def n_epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_accuracy", "val_accuracy"])
        for k in range(self.n_epochs):
            va = self.val_accuracy[k]
            w.writerow([k + 1, repr(self.train_loss[k]), repr(self.train_accuracy[k]),
                        "" if va is None else repr(va)])
        return buf.getvalue()


def _tensors(data: LabeledSet, dtype):
    x = torch.as_tensor(data.x, dtype=dtype)
    y = torch.as_tensor(data.y)
    codes = None if data.codes is None else torch.as_tensor(data.codes, dtype=dtype)
    return x, y, codes


def _require_codes(spec: ModelSpec, data: LabeledSet) -> None:
    if spec.use_ids and data.codes is None and len(data):
        missing = sorted(set(data.subject_ids.tolist()))
        raise DatasetError("conditioned model needs subject profiles",
                           [f"{s}: no profile" for s in missing])


@torch.no_grad()
def predict_logits(model: Decoder, data: LabeledSet, batch_size: int = 512) -> np.ndarray:
    _require_codes(model.spec, data)
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    x, _, codes = _tensors(data, dtype)
    out = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        out.append(model(x[sl], None if codes is None else codes[sl]))
    model.train(was_training)
    if not out:
        return np.zeros((0, 2))
    return torch.cat(out).double().numpy()


def train(spec: ModelSpec, data: LabeledSet, cfg: TrainConfig = TrainConfig(),
          init_seed: int | None = None) -> tuple[Decoder, TrainHistory]:
    """Minimise mean cross-entropy with Adam.

    A ``cfg.val_fraction`` carve-out of ``data`` drives early stopping; the
    parameters of the best validation epoch are returned. With
    ``val_fraction == 0`` the final parameters are returned.
    """
    if len(data) == 0:
        raise ValueError("empty training data")
    _require_codes(spec, data)
    if data.x.shape[1:] != (spec.n_channels, spec.n_times):
        raise ValueError(f"data epochs are {data.x.shape[1:]}, spec expects "
                         f"({spec.n_channels}, {spec.n_times})")
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    model = build_model(spec, cfg.seed if init_seed is None else init_seed, cfg.dtype)
    rng = np.random.default_rng(cfg.seed)

    n = len(data)
    n_val = int(round(cfg.val_fraction * n))
    if cfg.val_fraction > 0 and n - n_val < 1:
        raise ValueError("validation carve-out leaves no training data")
    perm = rng.permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    val = data.subset(val_idx) if n_val else None

    x, y, codes = _tensors(data, cfg.dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                           eps=cfg.adam_eps)
    hist = TrainHistory()
    best_state, best_acc, wait = None, -1.0, 0
    step = 0
    for ep in range(cfg.max_epochs):
        model.train()
        order = rng.permutation(train_idx)
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            logits = model(x[idx], None if codes is None else codes[idx])
            loss = F.cross_entropy(logits, y[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            total_loss += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        seen = min(len(order), start + cfg.batch_size)
        hist.train_loss.append(total_loss / seen)
        hist.train_accuracy.append(correct / seen)
        if val is not None:
            acc = float(np.mean(predict_logits(model, val).argmax(1) == val.y))
            hist.val_accuracy.append(acc)
            if acc > best_acc:
                best_acc, wait, hist.best_epoch = acc, 0, ep + 1
                best_state = copy.deepcopy(model.state_dict())
            else:
                wait += 1
        else:
            hist.val_accuracy.append(None)
            hist.best_epoch = ep + 1
        log.debug("epoch %d loss %.4f acc %.3f val %s", ep + 1, hist.train_loss[-1],
                  hist.train_accuracy[-1], hist.val_accuracy[-1])
        if val is not None and wait >= cfg.patience:
            break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    hist.stopped_epoch = hist.n_epochs
    hist.steps = step
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    hist.wall_time = time.perf_counter() - t0
    return model, hist


# ---------------------------------------------------------------------------
# evaluation


def _acc(mask: np.ndarray, hits: np.ndarray) -> dict:
    n = int(mask.sum())
    return {"accuracy": float(hits[mask].mean()) if n else None, "n": n}


@dataclass
class EvalReport:
    accuracy: float
    n: int
    per_split: dict[str, dict] = field(default_factory=dict)
    per_condition: dict[str, dict] = field(default_factory=dict)
    per_subject: dict[str, dict] = field(default_factory=dict)
    per_dominance: dict[str, dict[str, dict]] = field(default_factory=dict)
    per_class_recall: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "n": self.n, "per_split": self.per_split,
                "per_condition": self.per_condition, "per_subject": self.per_subject,
                "per_dominance": self.per_dominance,
                "per_class_recall": self.per_class_recall}

    def rows(self):
        yield ("overall", "all", "all", self.n, self.accuracy)
        for split, d in self.per_split.items():
            yield ("split", split, split, d["n"], d["accuracy"])
        for key, section in (("condition", self.per_condition), ("subject", self.per_subject),
                             ("class_recall", self.per_class_recall)):
            for name, by_split in section.items():
                for split, d in by_split.items():
                    yield (key, split, name, d["n"], d["accuracy"])
        for group, by_split in self.per_dominance.items():
            for split, d in by_split.items():
                yield ("dominance", split, group, d["n"], d["accuracy"])

    def to_csv(self, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "split", "key", "n", "accuracy"])
        for scope, split, key, n, acc in self.rows():
            w.writerow([scope, split, key, n, "" if acc is None else repr(acc)])
        return buf.getvalue()


def score_predictions(predictions: Mapping[str, np.ndarray], sets: Mapping[str, LabeledSet],
                      profiles: Mapping[str, SubjectProfile] | None = None) -> EvalReport:
    """Accuracy breakdowns for predicted class indices, one array per split."""
    if not sets or all(len(s) == 0 for s in sets.values()):
        raise ValueError("empty evaluation set")
    rep = EvalReport(accuracy=0.0, n=0)
    all_hits = []
    for split, data in sets.items():
        pred = np.asarray(predictions[split])
        if pred.shape != data.y.shape:
            raise ValueError(f"{split}: {pred.shape} predictions for {data.y.shape} labels")
        hits = (pred == data.y).astype(float)
        all_hits.append(hits)
        everything = np.ones(len(data), dtype=bool)
        rep.per_split[split] = _acc(everything, hits)
        for cond in sorted(set(data.conditions.tolist())):
            rep.per_condition.setdefault(cond, {})[split] = _acc(data.conditions == cond, hits)
        for sid in sorted(set(data.subject_ids.tolist())):
            rep.per_subject.setdefault(sid, {})[split] = _acc(data.subject_ids == sid, hits)
        for k, label in enumerate(LABELS):
            rep.per_class_recall.setdefault(label, {})[split] = _acc(data.y == k, hits)
        if profiles is not None:
            dom = np.array([profiles[s].dominance for s in data.subject_ids], dtype=object)
            for group in ("auditory", "visual"):
                rep.per_dominance.setdefault(group, {})[split] = _acc(dom == group, hits)
    hits = np.concatenate(all_hits)
    rep.n = int(hits.size)
    rep.accuracy = float(hits.mean())
    return rep


def evaluate(model: Decoder, sets, profiles: Mapping[str, SubjectProfile] | None = None
             ) -> EvalReport:
    """Score ``model`` (eval mode) on one LabeledSet or a mapping split -> set."""
    if isinstance(sets, LabeledSet):
        sets = {"all": sets}
    if not sets or all(len(s) == 0 for s in sets.values()):
        raise ValueError("empty evaluation set")
    preds = {k: (predict_logits(model, s).argmax(1) if len(s) else np.zeros(0, dtype=int))
             for k, s in sets.items()}
    return score_predictions(preds, sets, profiles)


def dominance_eval(model: Decoder, sets, profiles: Mapping[str, SubjectProfile]
                   ) -> dict[str, dict[str, float | None]]:
    """Accuracy per dominance group and split; an empty group maps to None."""
    rep = evaluate(model, sets, profiles)
    return {g: {s: d["accuracy"] for s, d in by.items()} for g, by in rep.per_dominance.items()}


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationResult:
    rows: list[dict]                       # backbone, use_ids, within, unseen
    deltas: dict[str, dict[str, float | None]]
    reports: dict[str, EvalReport]
    histories: dict[str, TrainHistory]
    models: dict[str, Decoder]
    split: SplitSpec

    def to_dict(self) -> dict:
        return {"rows": self.rows, "deltas": self.deltas, "split": self.split.to_dict(),
                "reports": {k: r.to_dict() for k, r in self.reports.items()}}

    def to_csv(self, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["backbone", "use_ids", "within", "unseen"])
        for r in self.rows:
            w.writerow([r["backbone"], int(r["use_ids"]),
                        "" if r["within"] is None else repr(r["within"]),
                        "" if r["unseen"] is None else repr(r["unseen"])])
        return buf.getvalue()


def variant_name(backbone: str, use_ids: bool) -> str:
    return f"{backbone}_{'ids' if use_ids else 'base'}"


def split_sets(dataset: Dataset, split: SplitSpec) -> dict[str, LabeledSet]:
    part = partition_epochs(dataset, split)
    audit_partition(part, split)
    return {"train": LabeledSet.from_epochs(part.train, dataset.profiles),
            "within": LabeledSet.from_epochs(part.within_test, dataset.profiles),
            "unseen": LabeledSet.from_epochs(part.unseen, dataset.profiles)}


def ablation_table(dataset: Dataset, backbones: Sequence[str], cfg: TrainConfig = TrainConfig(),
                   split: SplitSpec | None = None, n_unseen: int = 4,
                   model_kwargs: Mapping | None = None) -> AblationResult:
    """Train each backbone with and without the profile branch on one split.

    Both members of a pair use the same seeds, so every parameter they share
    by name and shape starts from the same values.
    """
    if split is None:
        split = split_subjects(dataset, n_unseen, cfg.seed)
    sets = split_sets(dataset, split)
    eval_sets = {k: sets[k] for k in ("within", "unseen") if len(sets[k])}
    rows, reports, histories, models = [], {}, {}, {}
    for backbone in backbones:
        for use_ids in (False, True):
            spec = ModelSpec(backbone=backbone, use_ids=use_ids,
                             n_channels=dataset.n_channels,
                             n_times=sets["train"].x.shape[-1], **dict(model_kwargs or {}))
            name = variant_name(backbone, use_ids)
            log.info("training %s", name)
            model, hist = train(spec, sets["train"], cfg)
            rep = evaluate(model, eval_sets, dataset.profiles)
            reports[name], histories[name], models[name] = rep, hist, model
            rows.append({"backbone": backbone, "use_ids": use_ids,
                         "within": rep.per_split.get("within", {}).get("accuracy"),
                         "unseen": rep.per_split.get("unseen", {}).get("accuracy")})
    deltas = {}
    for backbone in backbones:
        base = next(r for r in rows if r["backbone"] == backbone and not r["use_ids"])
        ids = next(r for r in rows if r["backbone"] == backbone and r["use_ids"])
        deltas[backbone] = {s: (None if base[s] is None or ids[s] is None else ids[s] - base[s])
                            for s in ("within", "unseen")}
    return AblationResult(rows, deltas, reports, histories, models, split)
