"""Feature extractor Q, reconstructor P, activity classifier C and subject discriminator D."""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

ROLES = ("Q", "P", "C", "D")


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_c: int
    n_w: int
    n_a: int
    n_subjects_out: int = 2
    base_filters: int = 32
    conv_kernel: int = 5
    latent_channels: Optional[int] = None  # defaults to 8 * base_filters
    dropout_rate: float = 0.5
    classifier_hidden: int = 128
    discriminator_hidden: int = 128

    def __post_init__(self):
        if self.latent_channels is None:
            self.latent_channels = 8 * self.base_filters
        self.validate()

    def validate(self) -> None:
        counts = dict(n_c=self.n_c, n_w=self.n_w, n_a=self.n_a, n_subjects_out=self.n_subjects_out,
                      base_filters=self.base_filters, conv_kernel=self.conv_kernel,
                      latent_channels=self.latent_channels, classifier_hidden=self.classifier_hidden,
                      discriminator_hidden=self.discriminator_hidden)
        bad = [k for k, v in counts.items() if int(v) < 1]
        if bad:
            raise ModelConfigError(f"counts must be >= 1: {bad}")
        if self.n_w % 8:
            raise ModelConfigError(
                f"n_w={self.n_w} is not divisible by 8; pad windows to {padded_length(self.n_w)}"
            )
        if self.conv_kernel % 2 == 0:
            raise ModelConfigError("conv_kernel must be odd for same-length convolutions")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def latent_length(self) -> int:
        return self.n_w // 8

    def to_dict(self) -> dict:
        return asdict(self)


def padded_length(n_w: int, multiple: int = 8) -> int:
    return int(math.ceil(n_w / multiple) * multiple)


def pad_windows(x, multiple: int = 8):
    """Right-pad the time axis with edge values up to a multiple of ``multiple``."""
    n_w = x.shape[-1]
    extra = padded_length(n_w, multiple) - n_w
    if extra == 0:
        return x
    if torch.is_tensor(x):
        return torch.cat([x, x[..., -1:].expand(*x.shape[:-1], extra)], dim=-1)
    return np.concatenate([x, np.repeat(x[..., -1:], extra, axis=-1)], axis=-1)


def _conv(cin: int, cout: int, k: int) -> nn.Conv1d:
    return nn.Conv1d(cin, cout, k, padding=k // 2)


def _double_conv(cin: int, cout: int, k: int) -> nn.Sequential:
    return nn.Sequential(
        _conv(cin, cout, k), nn.BatchNorm1d(cout), nn.ReLU(),
        _conv(cout, cout, k), nn.BatchNorm1d(cout), nn.ReLU(),
    )


def _init_fan_in(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(m.weight, -math.sqrt(3.0) * bound, math.sqrt(3.0) * bound)
            nn.init.uniform_(m.bias, -bound, bound)


@dataclass
class EmbeddingMap:
    features: torch.Tensor  # [batch, latent_channels, n_w / 8]
    pooled: torch.Tensor = field(init=False)  # [batch, latent_channels]

    def __post_init__(self):
        self.pooled = self.features.mean(dim=-1)


class Network(nn.Module):
    """Base class tagging every network with its role and config."""

    role = "?"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg

    def param_hash(self) -> str:
        return state_hash(self)


class FeatureExtractor(Network):
    """Four double-conv blocks; max-pool after the first three."""

    role = "Q"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        f, k = cfg.base_filters, cfg.conv_kernel
        widths = [f, 2 * f, 4 * f, cfg.latent_channels]
        self.blocks = nn.ModuleList()
        cin = cfg.n_c
        for w in widths:
            self.blocks.append(_double_conv(cin, w, k))
            cin = w
        self.pool = nn.MaxPool1d(2)
        _init_fan_in(self)

    def forward(self, x: torch.Tensor) -> EmbeddingMap:
        if x.ndim != 3 or x.shape[1] != self.cfg.n_c or x.shape[2] != self.cfg.n_w:
            raise ValueError(
                f"Q expects [batch, {self.cfg.n_c}, {self.cfg.n_w}], got {tuple(x.shape)}"
            )
        h = x
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < 3:
                h = self.pool(h)
        return EmbeddingMap(h)


class Reconstructor(Network):
    """Three upsample + double-conv blocks and a linear projection back to ``n_c``."""

    role = "P"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        f, k = cfg.base_filters, cfg.conv_kernel
        widths = [4 * f, 2 * f, f]
        self.blocks = nn.ModuleList()
        cin = cfg.latent_channels
        for w in widths:
            self.blocks.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                             _double_conv(cin, w, k)))
            cin = w
        self.project = nn.Conv1d(cin, cfg.n_c, 1)
        _init_fan_in(self)

    def forward(self, emb: EmbeddingMap | torch.Tensor) -> torch.Tensor:
        h = emb.features if isinstance(emb, EmbeddingMap) else emb
        if h.shape[1:] != (self.cfg.latent_channels, self.cfg.latent_length):
            raise ValueError(
                f"P expects features [batch, {self.cfg.latent_channels}, {self.cfg.latent_length}], "
                f"got {tuple(h.shape)}"
            )
        for block in self.blocks:
            h = block(h)
        return self.project(h)


class ActivityClassifier(Network):
    """Max-pool, one convolution, two fully connected layers."""

    role = "C"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        t = math.ceil(cfg.latent_length / 2)
        self.pool = nn.MaxPool1d(2, ceil_mode=True)
        self.conv = nn.Sequential(_conv(cfg.latent_channels, cfg.latent_channels, cfg.conv_kernel), nn.ReLU())
        self.fc = nn.Sequential(
            nn.Flatten(),
            nn.Linear(cfg.latent_channels * t, cfg.classifier_hidden), nn.ReLU(),
            nn.Linear(cfg.classifier_hidden, cfg.n_a),
        )
        _init_fan_in(self)

    def forward(self, emb: EmbeddingMap | torch.Tensor) -> torch.Tensor:
        h = emb.features if isinstance(emb, EmbeddingMap) else emb
        return self.fc(self.conv(self.pool(h)))

    @staticmethod
    def probabilities(logits: torch.Tensor) -> torch.Tensor:
        return torch.softmax(logits, dim=-1)


class SubjectDiscriminator(Network):
    """Three conv / batch-norm / dropout blocks and two fully connected layers."""

    role = "D"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        c, k = cfg.latent_channels, cfg.conv_kernel
        layers = []
        for _ in range(3):
            layers += [_conv(c, c, k), nn.BatchNorm1d(c), nn.ReLU(), nn.Dropout(cfg.dropout_rate)]
        self.blocks = nn.Sequential(*layers)
        self.fc = nn.Sequential(
            nn.Flatten(),
            nn.Linear(c * cfg.latent_length, cfg.discriminator_hidden), nn.ReLU(),
            nn.Linear(cfg.discriminator_hidden, cfg.n_subjects_out),
        )
        _init_fan_in(self)

    def forward(self, emb: EmbeddingMap | torch.Tensor) -> torch.Tensor:
        h = emb.features if isinstance(emb, EmbeddingMap) else emb
        return self.fc(self.blocks(h))


def build_feature_extractor(cfg: ModelConfig) -> FeatureExtractor:
    return FeatureExtractor(cfg)


def build_reconstructor(cfg: ModelConfig) -> Reconstructor:
    return Reconstructor(cfg)


def build_classifier(cfg: ModelConfig) -> ActivityClassifier:
    return ActivityClassifier(cfg)


def build_discriminator(cfg: ModelConfig) -> SubjectDiscriminator:
    return SubjectDiscriminator(cfg)


BUILDERS = {"Q": build_feature_extractor, "P": build_reconstructor,
            "C": build_classifier, "D": build_discriminator}


def forward_all(Q, P, C, D, x: torch.Tensor, mode: str = "inference") -> dict:
    """Run every network on one batch. ``D`` may be ``None`` (no-discriminator variants)."""
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    nets = [n for n in (Q, P, C, D) if n is not None]
    cfgs = {json.dumps(n.cfg.to_dict(), sort_keys=True) for n in nets}
    if len(cfgs) != 1:
        raise ValueError("networks were built from different model configs")
    for n in nets:
        n.train(mode == "train")
    emb = Q(x)
    recon = P(emb)
    if recon.shape != x.shape:
        raise ValueError(f"Q->P edge: reconstruction {tuple(recon.shape)} != input {tuple(x.shape)}")
    out = {"embedding": emb, "recon": recon, "class_logits": C(emb)}
    out["subj_logits"] = D(emb) if D is not None else None
    return out


# --- hashing and checkpoints -------------------------------------------------

def state_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        arr = t.detach().cpu().contiguous().numpy()
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


_FIXED_TIME = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_TIME)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_network(net: Network, path, extra: Optional[dict] = None) -> None:
    """Write a byte-reproducible archive: ``manifest.json`` plus one ``.npy`` per tensor."""
    state = net.state_dict()
    manifest = {
        "role": net.role,
        "model_config": net.cfg.to_dict(),
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.items()},
    }
    if extra:
        manifest.update(extra)
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for k, v in state.items():
            buf = io.BytesIO()
            np.save(buf, v.detach().cpu().numpy(), allow_pickle=False)
            _write_entry(zf, f"{k}.npy", buf.getvalue())


def load_network(path, expected_role: Optional[str] = None) -> tuple[Network, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        role = manifest["role"]
        if expected_role and role != expected_role:
            raise ValueError(f"{path}: archive holds network {role}, expected {expected_role}")
        net = BUILDERS[role](ModelConfig(**manifest["model_config"]))
        current = net.state_dict()
        if set(current) != set(manifest["tensors"]):
            raise ValueError(f"{path}: tensor names differ from a freshly built {role}")
        loaded = {}
        for k, ref in current.items():
            arr = np.load(io.BytesIO(zf.read(f"{k}.npy")), allow_pickle=False)
            if list(arr.shape) != list(ref.shape) or list(arr.shape) != manifest["tensors"][k]["shape"]:
                raise ValueError(f"{path}: shape mismatch for {k}: {arr.shape} vs {tuple(ref.shape)}")
            loaded[k] = torch.from_numpy(arr.copy()).to(ref.dtype)
        net.load_state_dict(loaded)
    return net, manifest
