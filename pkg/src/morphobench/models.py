"""Shared CNN backbone, the four architectures and their losses."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalError

MODEL_KINDS = ("WSL", "SSL", "SSR", "ICL")
BCE_EPS = 1e-7


def _default_blocks():
    return [(32, 3, 2), (64, 3, 2), (128, 3, 2), (128, 3, 2)]


@dataclass
class BackboneConfig:
    conv_blocks: list = field(default_factory=_default_blocks)
    latent_dim: int = 128
    input_size: int = 64

    def __post_init__(self):
        self.conv_blocks = [tuple(int(v) for v in b) for b in self.conv_blocks]
        if not self.conv_blocks:
            raise ValueError("backbone needs at least one conv block")

    def spatial_sizes(self) -> list[int]:
        sizes = [self.input_size]
        for _, k, s in self.conv_blocks:
            sizes.append((sizes[-1] + 2 * (k // 2) - k) // s + 1)
        if sizes[-1] < 1:
            raise ValueError(f"conv stack collapses a {self.input_size}px input: {sizes}")
        return sizes

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return self.conv_blocks[-1][0], self.spatial_sizes()[-1], self.spatial_sizes()[-1]

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        return d


@dataclass
class ByolConfig:
    projection_size: int = 128
    projection_hidden_size: int = 128
    moving_average_decay: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.moving_average_decay <= 1.0:
            raise ValueError("moving_average_decay must lie in [0, 1]")
        if self.projection_size < 1 or self.projection_hidden_size < 1:
            raise ValueError("projection sizes must be positive")


class Backbone(nn.Module):
    """Strided 3x3 conv blocks with ReLU, flattened into a linear latent."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        layers, in_ch = [], 1
        for out_ch, k, s in config.conv_blocks:
            conv = nn.Conv2d(in_ch, out_ch, k, stride=s, padding=k // 2)
            # He init: the default uniform init leaves a long loss plateau without normalization layers
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
            layers += [conv, nn.ReLU()]
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        c, h, w = config.feature_shape
        self.fc = nn.Linear(c * h * w, config.latent_dim)

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(1)
        return self.fc(torch.flatten(self.features(x), 1))


class ClassifierHead(nn.Module):
    def __init__(self, latent_dim: int, n_classes: int = 2):
        super().__init__()
        self.linear = nn.Linear(latent_dim, n_classes)

    def forward(self, z):
        return self.linear(z)

    def spec(self) -> dict:
        return {"in": self.linear.in_features, "out": self.linear.out_features}


class Decoder(nn.Module):
    """Mirror of the backbone: linear unflatten, transposed convs, sigmoid."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c, h, w = config.feature_shape
        self.fc = nn.Linear(config.latent_dim, c * h * w)
        sizes = config.spatial_sizes()
        layers = []
        blocks = config.conv_blocks
        for i in range(len(blocks) - 1, -1, -1):
            in_ch = blocks[i][0]
            out_ch = blocks[i - 1][0] if i > 0 else 1
            _, k, s = blocks[i]
            pad = k // 2
            target = sizes[i]
            base = (sizes[i + 1] - 1) * s - 2 * pad + k
            layers.append(nn.ConvTranspose2d(in_ch, out_ch, k, stride=s, padding=pad,
                                             output_padding=target - base))
            if i > 0:
                layers.append(nn.ReLU())
        self.deconv = nn.Sequential(*layers)

    def forward(self, z):
        c, h, w = self.config.feature_shape
        x = F.relu(self.fc(z)).view(-1, c, h, w)
        return torch.sigmoid(self.deconv(x)).squeeze(1)

    def spec(self) -> list:
        return [repr(m) for m in self.deconv] + [repr(self.fc)]


class MLP(nn.Module):
    """Linear -> BatchNorm -> ReLU -> Linear, the BYOL projector/predictor shape."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(), nn.Linear(hidden, out_dim)
        )

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------------------
# architectures


class WSLModel(nn.Module):
    kind = "WSL"

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.backbone = Backbone(config)
        self.classifier = ClassifierHead(config.latent_dim)

    def forward(self, x):
        return self.classifier(self.backbone(x))


class SSLModel(nn.Module):
    kind = "SSL"

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.backbone = Backbone(config)
        self.decoder = Decoder(config)

    def forward(self, x):
        return self.decoder(self.backbone(x))


class SSRModel(nn.Module):
    """Encoder shared by a classifier head and a decoder."""

    kind = "SSR"

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.backbone = Backbone(config)
        self.classifier = ClassifierHead(config.latent_dim)
        self.decoder = Decoder(config)

    def forward(self, x):
        z = self.backbone(x)
        return self.decoder(z), self.classifier(z)


class ICLModel(nn.Module):
    """BYOL: online backbone + projector + predictor, EMA target backbone + projector."""

    kind = "ICL"

    def __init__(self, config: BackboneConfig, byol: ByolConfig):
        super().__init__()
        self.byol = byol
        self.backbone = Backbone(config)
        self.projector = MLP(config.latent_dim, byol.projection_hidden_size, byol.projection_size)
        self.predictor = MLP(byol.projection_size, byol.projection_hidden_size, byol.projection_size)
        self.target_backbone = copy.deepcopy(self.backbone)
        self.target_projector = copy.deepcopy(self.projector)
        for p in self.target_parameters():
            p.requires_grad_(False)

    def online_modules(self):
        return [self.backbone, self.projector]

    def target_modules(self):
        return [self.target_backbone, self.target_projector]

    def online_parameters(self):
        return [p for m in (self.backbone, self.projector, self.predictor) for p in m.parameters()]

    def target_parameters(self):
        return [p for m in self.target_modules() for p in m.parameters()]

    def predict(self, x):
        return self.predictor(self.projector(self.backbone(x)))

    @torch.no_grad()
    def target_project(self, x):
        return self.target_projector(self.target_backbone(x))

    def pair_loss(self, v1, v2):
        """Symmetrized BYOL loss: mean of both prediction directions, in [0, 4]."""
        n = v1.shape[0]
        preds = self.predict(torch.cat([v1, v2]))
        targets = self.target_project(torch.cat([v2, v1]))
        return 0.5 * (byol_loss(preds[:n], targets[:n]) + byol_loss(preds[n:], targets[n:]))

    def update_target(self):
        for online, target in zip(self.online_modules(), self.target_modules()):
            ema_update(target, online, self.byol.moving_average_decay)


def build_model(kind: str, config: BackboneConfig, byol: ByolConfig | None = None) -> nn.Module:
    if kind == "WSL":
        return WSLModel(config)
    if kind == "SSL":
        return SSLModel(config)
    if kind == "SSR":
        return SSRModel(config)
    if kind == "ICL":
        return ICLModel(config, byol or ByolConfig())
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# forward helpers and losses


def check_finite_parameters(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericalError(f"non-finite parameter {name}")


def backbone_forward(backbone: Backbone, batch) -> torch.Tensor:
    """Latent matrix (N x latent_dim) for a batch of 64x64 crops."""
    check_finite_parameters(backbone)
    x = torch.as_tensor(batch, dtype=next(backbone.parameters()).dtype)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return backbone(x)


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy over the batch."""
    logp = F.log_softmax(logits, dim=1)
    return -logp.gather(1, labels.long().view(-1, 1)).mean()


def bce_reconstruction_loss(reconstruction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise binary cross-entropy; reconstruction clamped to [1e-7, 1 - 1e-7]."""
    if reconstruction.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(reconstruction.shape)} vs {tuple(target.shape)}")
    r = reconstruction.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(r) + (1.0 - target) * torch.log(1.0 - r)).mean()


def byol_loss(online_prediction: torch.Tensor, target_projection: torch.Tensor) -> torch.Tensor:
    """Mean over rows of ||p/|p| - z/|z|||^2 = 2 - 2 cos(p, z); target carries no gradient."""
    target = target_projection.detach()
    pn = online_prediction.norm(dim=1, keepdim=True)
    tn = target.norm(dim=1, keepdim=True)
    if (pn == 0).any() or (tn == 0).any():
        raise NumericalError("zero-norm row in byol_loss")
    p = online_prediction / pn
    z = target / tn
    return ((p - z) ** 2).sum(dim=1).mean()


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, decay: float) -> nn.Module:
    """theta_target <- decay * theta_target + (1 - decay) * theta_online, in place."""
    t_params = dict(target.named_parameters())
    o_params = dict(online.named_parameters())
    if t_params.keys() != o_params.keys() or any(
        t_params[k].shape != o_params[k].shape for k in t_params
    ):
        raise ValueError("target and online parameter layouts differ")
    for name, t in t_params.items():
        t.copy_(torch.mul(t, decay) + torch.mul(o_params[name], 1.0 - decay))
    return target


def forward_ssr(model: SSRModel, batch: torch.Tensor, labels: torch.Tensor):
    """One encoder pass feeding both heads: (reconstruction, logits, bce, ce)."""
    z = model.backbone(batch)
    recon = model.decoder(z)
    logits = model.classifier(z)
    target = batch.squeeze(1) if batch.dim() == 4 else batch
    return recon, logits, bce_reconstruction_loss(recon, target), ce_loss(logits, labels)
