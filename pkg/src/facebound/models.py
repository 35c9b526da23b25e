"""Networks of both stages, their forward contracts and the checkpoint container.

Images travel as ``N x 3 x H x W`` tensors: boundary rasters in [0, 1], face
images in [-1, 1]. All activations are smooth (SiLU) so finite-difference
gradient checks are meaningful everywhere.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DependencyError

FORMAT_VERSION = 1
NETWORK_NAMES = ("enc", "dec", "f_p", "f_e", "g_enc_b", "g_enc_i", "g_dec_i", "proxy", "d", "d_ip")


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    z_dim: int = 128
    pose_dim: int = 3
    expr_dim: int = 17
    c_b: int = 128  # structure feature channels
    d_id: int = 64  # identity / texture embedding width
    ch: int = 32  # base width of every conv stack
    id_classes: int = 8  # proxy classifier head; set from data, not hashed

    def __post_init__(self):
        r = self.resolution
        if r < 32 or r > 128 or r & (r - 1):
            raise ConfigError(f"resolution must be a power of two in [32, 128], got {r}")
        if min(self.z_dim, self.c_b, self.d_id, self.ch, self.id_classes) < 1:
            raise ConfigError("network widths must be positive")

    @property
    def cond_dim(self) -> int:
        return self.z_dim + self.pose_dim + self.expr_dim

    @property
    def bottleneck(self) -> int:
        return self.resolution // 8

    def hash(self) -> str:
        d = dataclasses.asdict(self)
        d.pop("id_classes")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, 1, 1)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(x)))


def _down_stack(c_in: int, widths, norm: bool = False) -> nn.Sequential:
    """3x3 stem followed by one stride-2 conv per entry after the first."""
    def block(conv):
        return [conv, nn.BatchNorm2d(conv.out_channels), nn.SiLU()] if norm else [conv, nn.SiLU()]

    layers = block(nn.Conv2d(c_in, widths[0], 3, 1, 1))
    for a, b in zip(widths[:-1], widths[1:]):
        layers += block(nn.Conv2d(a, b, 4, 2, 1))
    return nn.Sequential(*layers)


def _up_stack(widths, norm: bool = False) -> nn.Sequential:
    layers = []
    for a, b in zip(widths[:-1], widths[1:]):
        layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(a, b, 3, 1, 1)]
        layers += [nn.BatchNorm2d(b), nn.SiLU()] if norm else [nn.SiLU()]
    return nn.Sequential(*layers)


class BoundaryEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.ch
        self.body = nn.Sequential(_down_stack(3, [c, c, 2 * c, 4 * c]), ResBlock(4 * c))
        self.fc = nn.Linear(4 * c * cfg.bottleneck**2, cfg.z_dim)

    def forward(self, b):
        return self.fc(self.body(b).flatten(1))


class BoundaryDecoder(nn.Module):
    """Decodes the concatenated (z, pose, expression) vector into a boundary raster.

    The upsampling path is batch-normalized: without it the sparse L1 target
    collapses the output to an empty raster early in training.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.ch
        self.cfg = cfg
        self.fc = nn.Linear(cfg.cond_dim, 4 * c * cfg.bottleneck**2)
        self.res = ResBlock(4 * c)
        self.up = _up_stack([4 * c, 2 * c, c, c], norm=True)
        self.out = nn.Conv2d(c, 3, 3, 1, 1)

    def forward(self, z, p, e):
        h = self.fc(torch.cat([z, p, e], dim=1))
        n = self.cfg.bottleneck
        h = F.silu(h.view(h.shape[0], -1, n, n))
        return torch.sigmoid(self.out(self.up(self.res(h))))


class Estimator(nn.Module):
    """Regresses a condition vector from a boundary raster (F_p or F_e).

    Batch normalization in the body; always run frozen estimators in eval mode.
    """

    def __init__(self, cfg: ModelConfig, out_dim: int, bounded: bool):
        super().__init__()
        c = cfg.ch
        self.body = _down_stack(3, [c, c, 2 * c, 2 * c], norm=True)
        self.head = nn.Sequential(
            nn.Linear(2 * c * cfg.bottleneck**2, 128), nn.SiLU(), nn.Linear(128, out_dim)
        )
        self.bounded = bounded
        self.resolution = cfg.resolution

    def forward(self, b):
        y = self.head(self.body(b).flatten(1))
        return torch.sigmoid(y) if self.bounded else y


class StructureEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.ch
        self.body = nn.Sequential(_down_stack(3, [c, c, 2 * c, cfg.c_b]), ResBlock(cfg.c_b))
        self.resolution = cfg.resolution

    def forward(self, b):
        return self.body(b)


class TextureEncoder(nn.Module):
    """Global texture code; no spatial skip path reaches the decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.ch
        self.body = _down_stack(3, [c, c, 2 * c, 4 * c])
        self.fc = nn.Linear(4 * c * cfg.bottleneck**2, cfg.d_id)

    def forward(self, img):
        return self.fc(self.body(img).flatten(1))


class FaceDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.ch
        self.in_channels = cfg.c_b + cfg.d_id
        self.fuse = nn.Conv2d(self.in_channels, 4 * c, 1)
        self.res = nn.Sequential(ResBlock(4 * c), ResBlock(4 * c))
        self.up = _up_stack([4 * c, 2 * c, c, c])
        self.out = nn.Conv2d(c, 3, 3, 1, 1)

    def forward(self, f_b, f_i):
        tiled = f_i[:, :, None, None].expand(-1, -1, f_b.shape[2], f_b.shape[3])
        h = torch.cat([f_b, tiled], dim=1)
        if h.shape[1] != self.in_channels:
            raise ContractError(f"decoder expects {self.in_channels} channels, got {h.shape[1]}")
        h = F.silu(self.fuse(h))
        return torch.tanh(self.out(self.up(self.res(h))))


class IdentityNet(nn.Module):
    """Small face recognizer: pooled embedding plus identity logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.ch
        self.body = _down_stack(3, [c, c, 2 * c, cfg.d_id])
        self.fc = nn.Linear(cfg.d_id, cfg.id_classes)

    def forward(self, img):
        pool = self.body(img).mean(dim=(2, 3))
        return pool, self.fc(pool)


class PatchDiscriminator(nn.Module):
    def __init__(self, c_in: int, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, ch, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(ch, 2 * ch, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(2 * ch, 1, 3, 1, 1),
        )

    def forward(self, x):
        return torch.sigmoid(self.body(x))


class MultiScaleDiscriminator(nn.Module):
    """Three patch discriminators on the (image, boundary) pair at 1, 1/2, 1/4 scale."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.scales = nn.ModuleList(PatchDiscriminator(6, cfg.ch) for _ in range(3))

    def forward(self, img, b):
        x = torch.cat([img, b], dim=1)
        out = []
        for k, d in enumerate(self.scales):
            out.append(d(F.avg_pool2d(x, 2**k) if k else x))
        return out


_BUILDERS = {
    "enc": BoundaryEncoder,
    "dec": BoundaryDecoder,
    "f_p": lambda cfg: Estimator(cfg, cfg.pose_dim, bounded=False),
    "f_e": lambda cfg: Estimator(cfg, cfg.expr_dim, bounded=True),
    "g_enc_b": StructureEncoder,
    "g_enc_i": TextureEncoder,
    "g_dec_i": FaceDecoder,
    "proxy": IdentityNet,
    "d": MultiScaleDiscriminator,
    "d_ip": IdentityNet,
}


def build_network(name: str, cfg: ModelConfig, seed: int) -> nn.Module:
    """Construct one network with parameters drawn from a per-(seed, name) stream."""
    if name not in _BUILDERS:
        raise ConfigError(f"unknown network {name!r}")
    sub = int(np.random.SeedSequence([seed, NETWORK_NAMES.index(name)]).generate_state(1)[0])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(sub)
        return _BUILDERS[name](cfg)


@dataclass
class NetworkBundle:
    config: ModelConfig
    init_seed: int
    nets: dict = field(default_factory=dict)

    def __getitem__(self, name) -> nn.Module:
        return self.nets[name]

    def parameter_count(self) -> int:
        return sum(p.numel() for net in self.nets.values() for p in net.parameters())


def init_networks(config: ModelConfig, seed: int, names=NETWORK_NAMES) -> NetworkBundle:
    return NetworkBundle(config, seed, {n: build_network(n, config, seed) for n in names})


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# -- forward contracts --------------------------------------------------------

def _check_image(x: torch.Tensor, res: int, what: str):
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != res or x.shape[3] != res:
        raise ContractError(f"{what}: expected N x 3 x {res} x {res}, got {tuple(x.shape)}")


def _check_vec(x: torch.Tensor, n: int, dim: int, what: str):
    if x.ndim != 2 or x.shape != (n, dim):
        raise ContractError(f"{what}: expected {n} x {dim}, got {tuple(x.shape)}")


def forward_boundary_autoencoder(enc: BoundaryEncoder, dec: BoundaryDecoder, b, p, e):
    cfg = dec.cfg
    _check_image(b, cfg.resolution, "boundary")
    _check_vec(p, b.shape[0], cfg.pose_dim, "pose")
    _check_vec(e, b.shape[0], cfg.expr_dim, "expression")
    z = enc(b)
    return z, dec(z, p, e)


def forward_estimators(f_p: Estimator, f_e: Estimator, b):
    _check_image(b, f_p.resolution, "boundary")
    return f_p(b), f_e(b)


def forward_synthesis(g_enc_b: StructureEncoder, g_enc_i: TextureEncoder, g_dec_i: FaceDecoder, b_hat, i_a):
    if b_hat.shape != i_a.shape:
        raise ContractError(f"boundary {tuple(b_hat.shape)} and face {tuple(i_a.shape)} differ")
    _check_image(i_a, g_enc_b.resolution, "face")
    f_b = g_enc_b(b_hat)
    f_i = g_enc_i(i_a)
    return f_b, f_i, g_dec_i(f_b, f_i)


def forward_discriminators(d: MultiScaleDiscriminator, img, b):
    if img.shape != b.shape:
        raise ContractError(f"image {tuple(img.shape)} and boundary {tuple(b.shape)} differ")
    return d(img, b)


def identity_features(net: IdentityNet, img):
    if img.ndim != 4 or img.shape[1] != 3:
        raise ContractError(f"expected N x 3 x H x W face batch, got {tuple(img.shape)}")
    return net(img)


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: str
    step: int
    config: ModelConfig
    params: dict  # network name -> state_dict
    meta: dict
    path: Path | None = None

    def build(self, name: str) -> nn.Module:
        if name not in self.params:
            raise DependencyError(f"checkpoint {self.path} ({self.stage}) has no network {name!r}")
        net = build_network(name, self.config, 0)
        net.load_state_dict(self.params[name])
        return net.eval()

    def require_stage(self, *stages: str) -> "Checkpoint":
        if self.stage not in stages:
            raise DependencyError(
                f"checkpoint {self.path} is stage {self.stage!r}, expected {' or '.join(stages)}"
            )
        return self


def save_checkpoint(path, stage: str, step: int, config: ModelConfig, nets: dict,
                    rng_state=None, meta=None) -> Path:
    """Write all parameter sets plus metadata to ``path`` atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "step": int(step),
        "config": dataclasses.asdict(config),
        "config_hash": config.hash(),
        "rng_state": rng_state if rng_state is not None else {},
        "meta": meta or {},
        "params": {k: {n: t.detach().clone() for n, t in v.state_dict().items()} for k, v in nets.items()},
    }
    buf = io.BytesIO()  # serialized in memory: the archive must not embed the temp file name
    torch.save(payload, buf)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".pt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path, expected: ModelConfig | None = None, force: bool = False) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing checkpoint {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise DependencyError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != FORMAT_VERSION:
        raise DependencyError(f"{path}: unsupported format_version {payload.get('format_version')}")
    cfg = ModelConfig(**payload["config"])
    if expected is not None and payload["config_hash"] != expected.hash() and not force:
        raise DependencyError(
            f"{path}: config_hash {payload['config_hash']} does not match {expected.hash()} (use --force)"
        )
    meta = dict(payload["meta"])
    meta["rng_state"] = payload["rng_state"]
    return Checkpoint(payload["stage"], payload["step"], cfg, payload["params"], meta, path)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
