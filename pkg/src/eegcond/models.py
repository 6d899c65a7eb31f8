"""Decoder backbones (EEGNet, LSTM, delayed memory unit), the conditioned
decoder wrapper, deterministic initialisation and checkpoints."""
from __future__ import annotations

import io
import json
import zipfile
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .conditioning import EMBED_DIM, ProfileEmbedder, fuse

BACKBONES = ("eegnet", "lstm", "dmu")
CHECKPOINT_VERSION = 1


class NonFiniteActivation(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    backbone: str = "eegnet"
    use_ids: bool = False
    n_channels: int = 64          # EEG rows, before fusion
    n_times: int = 77
    hidden: int = 64
    F1: int = 16
    depth_mult: int = 2
    F2: int = 64
    temporal_kernel: int = 32
    separable_kernel: int = 16
    pool1: int = 4
    pool2: int = 8
    dropout: float = 0.25
    dmu_delays: int = 20
    embedding: str = "affine"

    def __post_init__(self):
        problems = []
        if self.backbone not in BACKBONES:
            problems.append(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.F1 * self.depth_mult != 32:
            problems.append("F1 * depth_mult must be 32")
        if self.F2 != 64:
            problems.append("F2 must be 64")
        if self.hidden != 64:
            problems.append("hidden must be 64")
        if self.dmu_delays < 1:
            problems.append("dmu_delays must be >= 1")
        if self.n_channels < 1 or self.n_times < 1:
            problems.append("n_channels and n_times must be positive")
        if self.backbone == "eegnet" and self.n_times // self.pool1 // self.pool2 < 1:
            problems.append(f"n_times={self.n_times} too short for the pooling stages")
        if self.embedding not in ("affine", "lookup"):
            problems.append(f"unknown embedding {self.embedding!r}")
        if problems:
            raise ValueError("invalid model spec: " + "; ".join(problems))

    @property
    def input_channels(self) -> int:
        return self.n_channels + (EMBED_DIM if self.use_ids else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _check(name: str, x: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteActivation(f"non-finite activation after layer {name!r}")
    return x


def _same_pad(kernel: int) -> nn.ZeroPad2d:
    # even kernels: one extra zero on the right, output length unchanged
    left = (kernel - 1) // 2
    return nn.ZeroPad2d((left, kernel - 1 - left, 0, 0))


class EEGNet(nn.Module):
    """Temporal conv -> depthwise spatial conv -> separable conv -> affine."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        C, F1, D, F2 = spec.input_channels, spec.F1, spec.depth_mult, spec.F2
        self.temporal_pad = _same_pad(spec.temporal_kernel)
        self.temporal = nn.Conv2d(1, F1, (1, spec.temporal_kernel), bias=False)
        self.bn1 = nn.BatchNorm2d(F1)
        self.spatial = nn.Conv2d(F1, F1 * D, (C, 1), groups=F1, bias=False)
        self.bn2 = nn.BatchNorm2d(F1 * D)
        self.pool1 = nn.AvgPool2d((1, spec.pool1))
        self.drop = nn.Dropout(spec.dropout)
        self.separable_pad = _same_pad(spec.separable_kernel)
        self.separable_depth = nn.Conv2d(F1 * D, F1 * D, (1, spec.separable_kernel),
                                         groups=F1 * D, bias=False)
        self.separable_point = nn.Conv2d(F1 * D, F2, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(F2)
        self.pool2 = nn.AvgPool2d((1, spec.pool2))
        self.n_flat = F2 * (spec.n_times // spec.pool1 // spec.pool2)
        self.classify = nn.Linear(self.n_flat, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.unsqueeze(1)                                   # B,1,C,T
        x = _check("bn1", self.bn1(self.temporal(self.temporal_pad(x))))
        x = _check("elu1", F.elu(self.bn2(self.spatial(x))))
        x = self.drop(self.pool1(x))
        x = self.separable_point(self.separable_depth(self.separable_pad(x)))
        x = _check("elu2", F.elu(self.bn3(x)))
        x = self.pool2(x).flatten(1)
        return _check("classify", self.classify(x))


class LSTMBackbone(nn.Module):
    """Single LSTM layer over time; the last hidden state feeds an affine head."""

    def __init__(self, n_in: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.W_ih = nn.Parameter(torch.empty(4 * hidden, n_in))
        self.W_hh = nn.Parameter(torch.empty(4 * hidden, hidden))
        self.bias = nn.Parameter(torch.zeros(4 * hidden))
        self.classify = nn.Linear(hidden, 2)

    def step(self, xw_t, h, c):
        # xw_t already holds W_ih x_t + bias; gate order i, f, g, o
        gates = xw_t + h @ self.W_hh.T
        i, f, g, o = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c

    def states(self, x: torch.Tensor) -> list[torch.Tensor]:
        B = x.shape[0]
        xw = torch.einsum("bct,gc->tbg", x, self.W_ih) + self.bias
        h = x.new_zeros(B, self.hidden)
        c = x.new_zeros(B, self.hidden)
        out = []
        # unbind keeps the backward pass to one stacked gradient, not T scatters
        for xw_t in xw.unbind(0):
            h, c = self.step(xw_t, h, c)
            out.append(h)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = _check("lstm", self.states(x)[-1])
        return _check("classify", self.classify(h))


class DMUBackbone(nn.Module):
    """Delayed memory unit.

    At every step a delay gate puts a softmax over the last D hidden states,
    separately for each unit, and the mixed memory drives a GRU-style update::

        a_t = softmax_d(W_g x_t + U_g h_{t-1} + b_g)       (H x D)
        m_t = sum_d a_t[:, d] * h_{t-d}
        z_t = sigmoid(W_z x_t + U_z m_t + b_z)
        c_t = tanh(W_c x_t + U_c m_t + b_c)
        h_t = (1 - z_t) * m_t + z_t * c_t

    with h_s = 0 for s < 1.
    """

    def __init__(self, n_in: int, hidden: int, delays: int):
        super().__init__()
        H, D = hidden, delays
        self.hidden, self.delays = H, D
        self.W_g = nn.Parameter(torch.empty(H * D, n_in))
        self.U_g = nn.Parameter(torch.empty(H * D, H))
        self.b_g = nn.Parameter(torch.zeros(H * D))
        self.W_z = nn.Parameter(torch.empty(H, n_in))
        self.U_z = nn.Parameter(torch.empty(H, H))
        self.b_z = nn.Parameter(torch.zeros(H))
        self.W_c = nn.Parameter(torch.empty(H, n_in))
        self.U_c = nn.Parameter(torch.empty(H, H))
        self.b_c = nn.Parameter(torch.zeros(H))
        self.classify = nn.Linear(H, 2)

    def states(self, x: torch.Tensor, return_gates: bool = False):
        B = x.shape[0]
        H, D = self.hidden, self.delays
        xg = torch.einsum("bct,gc->tbg", x, self.W_g) + self.b_g
        xz = torch.einsum("bct,gc->tbg", x, self.W_z) + self.b_z
        xc = torch.einsum("bct,gc->tbg", x, self.W_c) + self.b_c
        hist = x.new_zeros(B, H, D)  # hist[..., d - 1] = h_{t-d}
        hs, gates = [], []
        for xg_t, xz_t, xc_t in zip(xg.unbind(0), xz.unbind(0), xc.unbind(0)):
            a = torch.softmax((xg_t + hist[..., 0] @ self.U_g.T).view(B, H, D), dim=-1)
            m = (a * hist).sum(-1)
            z = torch.sigmoid(xz_t + m @ self.U_z.T)
            c = torch.tanh(xc_t + m @ self.U_c.T)
            h = (1 - z) * m + z * c
            hist = torch.cat([h.unsqueeze(-1), hist[..., :-1]], dim=-1)
            hs.append(h)
            gates.append((a, m))
        return (hs, gates) if return_gates else hs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = _check("dmu", self.states(x)[-1])
        return _check("classify", self.classify(h))


class Decoder(nn.Module):
    """Backbone plus, when ``spec.use_ids``, the profile embedder feeding it."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.embedder = ProfileEmbedder(spec.embedding) if spec.use_ids else None
        n_in = spec.input_channels
        if spec.backbone == "eegnet":
            self.backbone = EEGNet(spec)
        elif spec.backbone == "lstm":
            self.backbone = LSTMBackbone(n_in, spec.hidden)
        else:
            self.backbone = DMUBackbone(n_in, spec.hidden, spec.dmu_delays)

    def prepare(self, x: torch.Tensor, codes: torch.Tensor | None = None) -> torch.Tensor:
        """Shape-check ``x`` (B, rows, T) and fuse it when it is still plain EEG."""
        spec = self.spec
        if x.ndim != 3 or x.shape[-1] != spec.n_times:
            raise ValueError(f"expected (batch, rows, {spec.n_times}) input, "
                             f"got {tuple(x.shape)}")
        rows = x.shape[1]
        if spec.use_ids and rows == spec.n_channels:
            if codes is None:
                raise ValueError("conditioned model needs profile codes")
            return fuse(x, self.embedder(codes.to(x.dtype)))
        if rows != spec.input_channels:
            raise ValueError(f"model expects {spec.input_channels} rows"
                             + (f" (or {spec.n_channels} plus codes)" if spec.use_ids else "")
                             + f", got {rows}")
        return x

    def forward(self, x: torch.Tensor, codes: torch.Tensor | None = None) -> torch.Tensor:
        return self.backbone(self.prepare(x, codes))


def forward(model: Decoder, x, codes=None) -> torch.Tensor:
    """Logits for one epoch (rows x T) or a batch; routes by the model spec."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(x, dtype=dtype)
    single = x.ndim == 2
    if single:
        x = x.unsqueeze(0)
    if codes is not None:
        codes = torch.as_tensor(codes, dtype=dtype)
        if codes.ndim == 1:
            codes = codes.unsqueeze(0)
    out = model(x, codes)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# initialisation


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


@torch.no_grad()
def reset_parameters(model: Decoder, seed: int) -> Decoder:
    """Deterministic init; each tensor draws from a stream keyed on its name.

    Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, batch-norm
    scale 1, LSTM forget-gate bias 1. Tensors sharing a name and shape across
    the baseline and conditioned variants therefore start out identical.
    """
    for mod_name, mod in model.named_modules():
        for pname, p in mod.named_parameters(recurse=False):
            full = f"{mod_name}.{pname}" if mod_name else pname
            if isinstance(mod, nn.BatchNorm2d):
                p.fill_(1.0 if pname == "weight" else 0.0)
            elif pname == "bias" or pname.startswith("b_"):
                p.zero_()
                if isinstance(mod, LSTMBackbone) and pname == "bias":
                    p[mod.hidden:2 * mod.hidden] = 1.0
            else:
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                values = _param_rng(seed, full).uniform(-bound, bound, size=tuple(p.shape))
                p.copy_(torch.from_numpy(values).to(p.dtype))
        if isinstance(mod, nn.BatchNorm2d):
            mod.reset_running_stats()
    return model


def build_model(spec: ModelSpec, seed: int = 0, dtype: torch.dtype = torch.float64) -> Decoder:
    model = Decoder(spec).to(dtype)
    return reset_parameters(model, seed)


def init_params(spec: ModelSpec, seed: int = 0) -> dict[str, torch.Tensor]:
    """Named parameter tensors (64-bit) of a freshly initialised model."""
    return {k: v.detach().clone() for k, v in build_model(spec, seed).named_parameters()}


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, model: Decoder, *, step: int = 0, seed: int = 0,
                    extra: dict | None = None) -> None:
    """Write spec, every named tensor and run metadata into one zip file.

    Byte-identical for identical inputs (fixed member timestamps, stored
    uncompressed, sorted members).
    """
    state = model.state_dict()
    meta = {
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "step": int(step),
        "seed": int(seed),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "tensors": sorted(state),
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for name in sorted(state):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, state[name].detach().cpu().numpy(),
                                      allow_pickle=False)
            _zip_write(zf, f"tensors/{name}.npy", buf.getvalue())


def load_checkpoint(path) -> tuple[Decoder, dict]:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        spec = ModelSpec.from_dict(meta["spec"])
        dtype = getattr(torch, meta["dtype"])
        model = Decoder(spec).to(dtype)
        state = {}
        for name in meta["tensors"]:
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"tensors/{name}.npy")),
                                           allow_pickle=False)
            state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, meta
