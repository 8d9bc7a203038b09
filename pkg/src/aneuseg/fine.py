"""Dual-channel 3D U-Net with squeeze-and-excitation gates and deep supervision.

Encoder level ``k`` works at ``size / 2**k`` with ``base_filters * 2**k``
channels. Every level is a strided (or, at level 0, plain) 3^3 convolution
followed by a residual context block. Decoder levels upsample trilinearly,
halve the width with a 3^3 convolution, concatenate the skip and run a
localization block. Segmentation heads on the two coarsest decoder outputs are
upsampled and summed into the full-resolution head before the softmax.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .losses import LossParams, WeightedDiceLoss
from .preprocessing import VoiCrop
from .volume import LabelVolume
from .weights import load_weights, save_weights, state_to_arrays

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class FineConfig:
    in_channels: int = 2
    classes: int = 2
    depth: int = 4
    base_filters: int = 16
    dropout_p: float = 0.3
    se_reduction: int = 8
    epochs: int = 500
    batch_size: int = 1
    lr_init: float = 5e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    early_stop_patience: int = 50
    optimizer: str = "adam"
    rng_seed: int = 0
    deep_supervision: bool = True
    use_se: bool = True

    def __post_init__(self) -> None:
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_filters < self.se_reduction:
            raise ValueError(
                f"base_filters ({self.base_filters}) must be >= se_reduction ({self.se_reduction})"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.batch_size != 1:
            raise ValueError("the fine stage trains with batch size 1")
        if self.optimizer != "adam":
            raise ValueError("the fine stage is trained with Adam")
        if self.classes != 2:
            raise ValueError("only binary segmentation is supported")

    @property
    def widths(self) -> list[int]:
        return [self.base_filters * 2**k for k in range(self.depth)]

    @property
    def se_level(self) -> int:
        """Encoder level whose context block is followed by an SE gate (the penultimate)."""
        return self.depth - 2


def conv_block(c_in: int, c_out: int, kernel: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, kernel, stride=stride, padding=kernel // 2),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.LeakyReLU(0.01),
    )


class ContextBlock(nn.Module):
    def __init__(self, channels: int, dropout_p: float):
        super().__init__()
        self.conv1 = conv_block(channels, channels)
        self.drop = nn.Dropout3d(dropout_p)
        self.conv2 = conv_block(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.drop(self.conv1(x)))


class SEBlock(nn.Module):
    """Channel gate: global average pool, bottleneck MLP, sigmoid, rescale.

    Setting ``force_gate`` replaces the learned gate with a constant, which
    makes the block an exact multiplicative identity at 1.
    """

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.force_gate: float | None = None

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        if self.force_gate is not None:
            return torch.full(x.shape[:2], float(self.force_gate), dtype=x.dtype)
        s = x.mean(dim=(2, 3, 4))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)[:, :, None, None, None]


class UpBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = conv_block(c_in, c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        return self.conv(x)


class LocalizationBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv3 = conv_block(c_in, c_out)
        self.conv1 = conv_block(c_out, c_out, kernel=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv1(self.conv3(x))


class SEUNet3D(nn.Module):
    def __init__(self, cfg: FineConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.use_se = cfg.use_se
        self.down = nn.ModuleList()
        self.context = nn.ModuleList()
        for k, c in enumerate(w):
            c_prev = cfg.in_channels if k == 0 else w[k - 1]
            self.down.append(conv_block(c_prev, c, stride=1 if k == 0 else 2))
            self.context.append(ContextBlock(c, cfg.dropout_p))
        self.se_encoder = SEBlock(w[cfg.se_level], cfg.se_reduction)
        # decoder modules are indexed by the level they produce, deepest first
        self.up = nn.ModuleList()
        self.local = nn.ModuleList()
        self.heads = nn.ModuleList()
        for k in reversed(range(cfg.depth - 1)):
            self.up.append(UpBlock(w[k + 1], w[k]))
            if k > 0:
                self.local.append(LocalizationBlock(2 * w[k], w[k]))
            else:
                self.local.append(conv_block(2 * w[0], 2 * w[0]))
        self.se_decoder = SEBlock(w[cfg.depth - 2], cfg.se_reduction)
        out_widths = [w[k] if k else 2 * w[0] for k in reversed(range(cfg.depth - 1))]
        n_heads = min(3, len(out_widths)) if cfg.deep_supervision else 1
        for c in out_widths[-n_heads:]:
            self.heads.append(nn.Conv3d(c, cfg.classes, 1))

    def set_se_gate(self, value: float | None) -> None:
        self.se_encoder.force_gate = value
        self.se_decoder.force_gate = value

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected (N, {self.cfg.in_channels}, X, Y, Z) input, got {tuple(x.shape)}"
            )
        step = 2 ** (self.cfg.depth - 1)
        if any(s % step for s in x.shape[2:]):
            raise ValueError(f"spatial extent {tuple(x.shape[2:])} is not divisible by {step}")

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        self._check_input(x)
        skips = []
        for k in range(self.cfg.depth):
            x = self.context[k](self.down[k](x))
            if k == self.cfg.se_level and self.use_se:
                x = self.se_encoder(x)
            skips.append(x)
        return skips

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skips = self.encode(x)
        x = skips[-1]
        outputs = []
        for i, k in enumerate(reversed(range(self.cfg.depth - 1))):
            x = self.up[i](x)
            if i == 0 and self.use_se:
                x = self.se_decoder(x)
            skip = skips[k]
            if x.shape != skip.shape:
                raise RuntimeError(f"decoder {tuple(x.shape)} does not match skip {tuple(skip.shape)}")
            x = self.local[i](torch.cat([x, skip], dim=1))
            outputs.append(x)
        heads = list(self.heads)
        seg = None
        for feat, head in zip(outputs[-len(heads):], heads):
            s = head(feat)
            if seg is not None:
                s = s + F.interpolate(seg, size=s.shape[2:], mode="trilinear", align_corners=False)
            seg = s
        return seg

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Class probabilities, softmax over dim 1."""
        return torch.softmax(self.logits(x), dim=1)


@dataclass
class FineModel:
    net: SEUNet3D
    config: FineConfig
    log: list[dict] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        meta = {"kind": "fine", "config": asdict(self.config)}
        save_weights(path, state_to_arrays(self.net.state_dict()), meta)

    @classmethod
    def load(cls, path: str | Path) -> "FineModel":
        tensors, meta = load_weights(path)
        if meta.get("kind") != "fine":
            raise ValueError(f"{path} does not hold fine-stage weights")
        model = build_fine(FineConfig(**meta["config"]))
        model.net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        return model

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
            writer.writeheader()
            writer.writerows(self.log)

    def summary(self, size: int = 64) -> str:
        """Per-layer output shapes and parameter counts for one (1, C, size^3) input."""
        rows = []
        hooks = []

        def record(name):
            def hook(module, _inp, out):
                n = sum(p.numel() for p in module.parameters(recurse=False))
                rows.append((name, type(module).__name__, tuple(out.shape), n))
            return hook

        for name, module in self.net.named_modules():
            if name and not list(module.children()):
                hooks.append(module.register_forward_hook(record(name)))
        was_training = self.net.training
        self.net.eval()
        try:
            with torch.no_grad():
                self.net(torch.zeros(1, self.config.in_channels, size, size, size))
        finally:
            for h in hooks:
                h.remove()
            self.net.train(was_training)
        lines = [f"{'layer':<32} {'type':<16} {'output':<26} params"]
        for name, kind, shape, n in rows:
            lines.append(f"{name:<32} {kind:<16} {str(shape):<26} {n}")
        total = sum(p.numel() for p in self.net.parameters())
        lines.append(f"total parameters: {total}")
        return "\n".join(lines)


def build_fine(cfg: FineConfig) -> FineModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.rng_seed)
        net = SEUNet3D(cfg)
    net.eval()
    return FineModel(net, cfg)


class PlateauSchedule:
    """Reduce-on-plateau: scale lr by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float, patience: int, min_delta: float = 0.0):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.wait = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


def _tensors(sample: VoiCrop) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(sample.stacked())[None]
    y = torch.from_numpy((np.asarray(sample.label.data) > 0).astype(np.float32))[None]
    return x, y


def make_loss(loss: LossParams | nn.Module | None) -> nn.Module:
    if loss is None:
        return WeightedDiceLoss(LossParams())
    if isinstance(loss, LossParams):
        return WeightedDiceLoss(loss)
    return loss


def evaluate_loss(net: SEUNet3D, samples: Sequence[VoiCrop], loss_fn: nn.Module) -> float:
    net.eval()
    with torch.no_grad():
        values = [loss_fn(net(x), y).item() for x, y in map(_tensors, samples)]
    return float(np.mean(values))


def train_fine(
    model: FineModel,
    train: Sequence[VoiCrop],
    val: Sequence[VoiCrop],
    loss: LossParams | nn.Module | None = None,
    cfg: FineConfig | None = None,
) -> FineModel:
    """Adam with reduce-on-plateau and early stopping on the validation loss.

    The parameters with the lowest validation loss are restored at the end.
    """
    cfg = cfg or model.config
    if not train or not val:
        raise ValueError("train_fine needs nonempty train and validation sets")
    loss_fn = make_loss(loss)
    net = model.net
    rng = np.random.default_rng(cfg.rng_seed)
    sched = PlateauSchedule(cfg.lr_init, cfg.plateau_factor, cfg.plateau_patience)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_init)
    best_val, best_state, since_best = float("inf"), None, 0
    train_t = [_tensors(s) for s in train]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.rng_seed)
        for epoch in range(cfg.epochs):
            net.train()
            lr = sched.lr
            for group in opt.param_groups:
                group["lr"] = lr
            losses = []
            for i in rng.permutation(len(train_t)):
                x, y = train_t[i]
                opt.zero_grad()
                value = loss_fn(net(x), y)
                if not torch.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch} on sample {i}: lr={lr}")
                value.backward()
                opt.step()
                losses.append(value.item())
            val_loss = evaluate_loss(net, val, loss_fn)
            if not np.isfinite(val_loss):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}")
            model.log.append(
                {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "lr": lr}
            )
            log.info("fine epoch %d train %.4f val %.4f lr %.2e", epoch, np.mean(losses), val_loss, lr)
            if val_loss < best_val:
                best_val, since_best = val_loss, 0
                best_state = copy.deepcopy(net.state_dict())
            else:
                since_best += 1
            sched.step(val_loss)
            if since_best >= cfg.early_stop_patience:
                log.info("early stop after %d epochs without improvement", since_best)
                break
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return model


def _as_input(model: FineModel, x) -> torch.Tensor:
    if isinstance(x, VoiCrop):
        x = x.stacked()
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if t.ndim == 4:
        t = t[None]
    if t.ndim != 5 or t.shape[0] != 1:
        raise ValueError(f"expected one (C, X, Y, Z) sample, got {tuple(t.shape)}")
    return t


@torch.no_grad()
def predict_probabilities(model: FineModel, x) -> np.ndarray:
    """(classes, X, Y, Z) probabilities for one sample, dropout disabled."""
    model.net.eval()
    return model.net(_as_input(model, x))[0].numpy()


def decide(probs: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; ties go to the lower class index (background)."""
    return np.argmax(probs, axis=0).astype(np.uint8)


def predict_fine(model: FineModel, x) -> LabelVolume:
    probs = predict_probabilities(model, x)
    spacing, origin = (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)
    if isinstance(x, VoiCrop):
        spacing, origin = x.image_channel.spacing, x.image_channel.origin
    return LabelVolume(decide(probs), spacing, origin)
