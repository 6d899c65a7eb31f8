"""Subject profile encoding, the 16-d profile embedder, and channel-append
fusion of the embedding with an EEG epoch."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np
import torch
from torch import nn

from .dataset import Dataset, DatasetError, SubjectProfile, TrialEpoch

BIT_ORDER = ("dominance", "sex", "music_education", "active_musician")
EMBED_DIM = 16
N_CODES = 2 ** len(BIT_ORDER)


def encode_profile(p: SubjectProfile) -> np.ndarray:
    """Profile -> bits in BIT_ORDER; auditory dominance is 1, visual 0."""
    return np.array([1 if p.dominance == "auditory" else 0,
                     p.sex, p.music_education, p.active_musician], dtype=np.int64)


def code_index(bits) -> int:
    """Integer 0..15 of a 4-bit code, most significant bit first."""
    bits = np.asarray(bits).astype(int)
    if bits.shape != (4,) or not np.isin(bits, (0, 1)).all():
        raise ValueError(f"profile code must be 4 bits, got {bits!r}")
    return int(bits @ (2 ** np.arange(3, -1, -1)))


def code_string(bits) -> str:
    return "".join(str(int(b)) for b in bits)


def embed(code, W, b):
    """Affine embedding ``W @ bits + b`` of one code or a batch of codes.

    Works on numpy arrays and on torch tensors (differentiable in W, b).
    """
    if isinstance(W, torch.Tensor):
        if not (torch.isfinite(W).all() and torch.isfinite(b).all()):
            raise ValueError("embedder parameters are not finite")
        bits = torch.as_tensor(code, dtype=W.dtype)
        return bits @ W.T + b
    W = np.asarray(W, dtype=float)
    b = np.asarray(b, dtype=float)
    if not (np.isfinite(W).all() and np.isfinite(b).all()):
        raise ValueError("embedder parameters are not finite")
    return np.asarray(code, dtype=float) @ W.T + b


class ProfileEmbedder(nn.Module):
    """Learned map from 4 profile bits to a 16-d subject embedding.

    ``kind="affine"`` is a single linear layer on the bits (no nonlinearity),
    so it also covers bit combinations absent from training. ``kind="lookup"``
    keeps one free vector per combination.
    """

    def __init__(self, kind: str = "affine", dim: int = EMBED_DIM):
        super().__init__()
        if kind not in ("affine", "lookup"):
            raise ValueError(f"unknown embedder kind {kind!r}")
        self.kind = kind
        self.dim = dim
        if kind == "affine":
            self.weight = nn.Parameter(torch.zeros(dim, len(BIT_ORDER)))
            self.bias = nn.Parameter(torch.zeros(dim))
        else:
            self.table = nn.Parameter(torch.zeros(N_CODES, dim))

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        if self.kind == "affine":
            return embed(codes, self.weight, self.bias)
        idx = (codes.long() * torch.tensor([8, 4, 2, 1])).sum(-1)
        return self.table[idx]


def fuse(data, e):
    """Append the embedding as constant channels: (C, T) + (16,) -> (C+16, T).

    Batched inputs (B, C, T) with (B, 16) are handled the same way. Works
    with numpy and torch; under torch the gradient flows into ``e``.
    """
    if isinstance(data, torch.Tensor):
        if data.ndim == 2:
            if e.ndim != 1:
                raise ValueError(f"embedding shape {tuple(e.shape)} does not match epoch")
            return torch.cat([data, e[:, None].expand(-1, data.shape[-1])], dim=0)
        if e.ndim != 2 or e.shape[0] != data.shape[0]:
            raise ValueError(f"embedding shape {tuple(e.shape)} does not match batch "
                             f"{tuple(data.shape)}")
        return torch.cat([data, e[:, :, None].expand(-1, -1, data.shape[-1])], dim=1)
    data = np.asarray(data)
    e = np.asarray(e)
    if data.ndim == 2:
        if e.ndim != 1:
            raise ValueError(f"embedding shape {e.shape} does not match epoch")
        return np.concatenate([data, np.repeat(e[:, None], data.shape[-1], axis=1)], axis=0)
    if e.ndim != 2 or e.shape[0] != data.shape[0]:
        raise ValueError(f"embedding shape {e.shape} does not match batch {data.shape}")
    return np.concatenate([data, np.repeat(e[:, :, None], data.shape[-1], axis=2)], axis=1)


@dataclass(eq=False)
class FusedEpoch:
    data: np.ndarray  # (C + 16) x T
    label: str
    subject_id: str


def profile_codes(profiles: Mapping[str, SubjectProfile], subject_ids) -> np.ndarray:
    missing = sorted({s for s in subject_ids if s not in profiles})
    if missing:
        raise DatasetError("profile missing", [f"{s}: no profile" for s in missing])
    return np.stack([encode_profile(profiles[s]) for s in subject_ids])


def condition_dataset(ds: Dataset, embedder: ProfileEmbedder) -> Iterator[FusedEpoch]:
    """Lazily fuse every epoch with the embedder's current output."""
    if ds.stage != "preprocessed":
        raise DatasetError("condition_dataset expects a preprocessed dataset")
    missing = sorted({e.subject_id for e in ds.epochs} - set(ds.profiles))
    if missing:
        raise DatasetError("profile missing", [f"{s}: no profile" for s in missing])
    for ep in ds.epochs:
        yield condition_epoch(ep, ds.profiles[ep.subject_id], embedder)


def condition_epoch(ep: TrialEpoch, profile: SubjectProfile,
                    embedder: ProfileEmbedder) -> FusedEpoch:
    dtype = next(embedder.parameters()).dtype
    with torch.no_grad():
        code = torch.as_tensor(encode_profile(profile)[None], dtype=dtype)
        e = embedder(code)[0].double().numpy()
    return FusedEpoch(fuse(ep.data, e), ep.label, ep.subject_id)
