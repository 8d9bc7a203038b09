"""Dual-pathway (full- and low-resolution) patch classifier for candidate detection.

Both pathways are stacks of unpadded 3^3 convolutions, so each layer trims one
voxel per side. The low-resolution pathway sees a ``lo_downsample`` times
larger neighbourhood, average-pooled to the same sampling step; its output is
nearest-upsampled onto the full-resolution output grid and added before a 1^3
classification head.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .volume import LabelVolume, Region, Volume3D, connected_components, crop_array, require_same_geometry
from .weights import load_weights, save_weights, state_to_arrays

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class CoarseConfig:
    hi_patch: tuple[int, int, int] = (25, 25, 25)
    lo_downsample: int = 3
    conv_layers: int = 8
    kernel: int = 3
    channels_per_layer: tuple[int, ...] = (30, 30, 40, 40, 40, 40, 50, 50)
    classes: int = 2
    iterations: int = 700
    batch_size: int = 10
    lr_init: float = 1e-3
    lr_decay_points: tuple[float, ...] = (0.5, 0.75)
    lr_decay_factor: float = 0.5
    l1: float = 1e-6
    l2: float = 1e-4
    optimizer: str = "rmsprop"
    rng_seed: int = 0
    inference_tile: int = 36
    min_candidate_size: int = 10

    def __post_init__(self) -> None:
        self.hi_patch = tuple(int(v) for v in self.hi_patch)
        self.channels_per_layer = tuple(int(v) for v in self.channels_per_layer)
        self.lr_decay_points = tuple(float(v) for v in self.lr_decay_points)
        if self.lo_downsample < 1:
            raise ValueError("lo_downsample must be >= 1")
        if len(self.channels_per_layer) != self.conv_layers:
            raise ValueError("channels_per_layer needs one width per conv layer")
        if self.kernel != 3:
            raise ValueError("only 3^3 kernels are supported")
        if self.optimizer != "rmsprop":
            raise ValueError("the coarse stage is trained with RMSProp")
        if self.inference_tile % self.lo_downsample:
            raise ValueError("inference_tile must be a multiple of lo_downsample")

    @property
    def out_patch(self) -> tuple[int, int, int]:
        return tuple(p - 2 * self.conv_layers for p in self.hi_patch)

    @property
    def lo_out(self) -> tuple[int, int, int]:
        return tuple(o // self.lo_downsample for o in self.out_patch)

    @property
    def lo_in(self) -> tuple[int, int, int]:
        return tuple(o + 2 * self.conv_layers for o in self.lo_out)


def _pathway(widths: Sequence[int], in_channels: int = 1) -> nn.Sequential:
    layers = []
    for w in widths:
        layers += [nn.Conv3d(in_channels, w, 3), nn.PReLU(w)]
        in_channels = w
    return nn.Sequential(*layers)


class DualPathwayNet(nn.Module):
    def __init__(self, cfg: CoarseConfig):
        super().__init__()
        self.cfg = cfg
        self.hi = _pathway(cfg.channels_per_layer)
        self.lo = _pathway(cfg.channels_per_layer)
        self.head = nn.Conv3d(cfg.channels_per_layer[-1], cfg.classes, 1)

    def forward(self, hi: torch.Tensor, lo: torch.Tensor) -> torch.Tensor:
        """Class logits on the full-resolution output grid."""
        h = self.hi(hi)
        l = self.lo(lo)
        l = F.interpolate(l, scale_factor=self.cfg.lo_downsample, mode="nearest")
        if l.shape[2:] != h.shape[2:]:
            raise ValueError(f"pathway outputs disagree: {tuple(h.shape[2:])} vs {tuple(l.shape[2:])}")
        return self.head(h + l)

    def probabilities(self, hi: torch.Tensor, lo: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(hi, lo), dim=1)


@dataclass
class CoarseModel:
    net: DualPathwayNet
    config: CoarseConfig
    log: list[dict] = field(default_factory=list)

    def parameter_shapes(self) -> dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self.net.state_dict().items()}

    def save(self, path: str | Path) -> None:
        meta = {"kind": "coarse", "config": asdict(self.config)}
        save_weights(path, state_to_arrays(self.net.state_dict()), meta)

    @classmethod
    def load(cls, path: str | Path) -> "CoarseModel":
        tensors, meta = load_weights(path)
        if meta.get("kind") != "coarse":
            raise ValueError(f"{path} does not hold coarse-stage weights")
        model = build_coarse(CoarseConfig(**meta["config"]))
        model.net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        return model

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "loss", "lr"])
            writer.writeheader()
            writer.writerows(self.log)


def build_coarse(cfg: CoarseConfig) -> CoarseModel:
    out = cfg.out_patch
    if min(out) < 1:
        raise ValueError(
            f"hi_patch {cfg.hi_patch} is too small for {cfg.conv_layers} unpadded 3^3 layers"
        )
    if any(o % cfg.lo_downsample for o in out):
        raise ValueError(f"output extent {out} is not divisible by lo_downsample={cfg.lo_downsample}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.rng_seed)
        net = DualPathwayNet(cfg)
    return CoarseModel(net, cfg)


def _lo_region(out_region: Region, cfg: CoarseConfig) -> Region:
    """Full-resolution box whose ``lo_downsample`` pooling feeds the low pathway."""
    ds, L = cfg.lo_downsample, cfg.conv_layers
    start = tuple(a - L * ds for a in out_region.start)
    size = tuple((s // ds + 2 * L) * ds for s in out_region.size)
    return Region(start, size)


def _inputs_for(data: np.ndarray, out_region: Region, cfg: CoarseConfig) -> tuple[np.ndarray, np.ndarray]:
    L = cfg.conv_layers
    hi_region = Region(
        tuple(a - L for a in out_region.start), tuple(s + 2 * L for s in out_region.size)
    )
    hi = crop_array(data, hi_region, 0)
    lo_full = crop_array(data, _lo_region(out_region, cfg), 0)
    ds = cfg.lo_downsample
    sx, sy, sz = (n // ds for n in lo_full.shape)
    lo = lo_full.reshape(sx, ds, sy, ds, sz, ds).mean(axis=(1, 3, 5))
    return hi.astype(np.float32), lo.astype(np.float32)


@dataclass
class PatchBatch:
    hi: torch.Tensor  # (n, 1, *hi_patch)
    lo: torch.Tensor  # (n, 1, *lo_in)
    target: torch.Tensor  # (n, *out_patch), int64
    centers: list[tuple[int, int, int]]


def _assemble(items, cfg: CoarseConfig) -> PatchBatch:
    """``items`` are (image array, binary label array, centre) triples."""
    his, los, tgts, centers = [], [], [], []
    for data, labels, c in items:
        out_region = Region.centered(c, cfg.out_patch)
        hi, lo = _inputs_for(data, out_region, cfg)
        his.append(hi)
        los.append(lo)
        tgts.append(crop_array(labels, out_region, False))
        centers.append(tuple(int(v) for v in c))
    return PatchBatch(
        hi=torch.from_numpy(np.stack(his)[:, None]),
        lo=torch.from_numpy(np.stack(los)[:, None]),
        target=torch.from_numpy(np.stack(tgts).astype(np.int64)),
        centers=centers,
    )


def _center_pools(labels: np.ndarray, roi) -> tuple[np.ndarray, np.ndarray]:
    fg = np.argwhere(labels)
    bg_mask = ~labels
    if roi is not None:
        inside = bg_mask & (np.asarray(roi.data) != 0)
        if inside.any():
            bg_mask = inside
    return fg, np.argwhere(bg_mask)


def sample_patches(
    img: Volume3D,
    dilated_labels: LabelVolume,
    cfg: CoarseConfig,
    n: int,
    rng: np.random.Generator | None = None,
    roi: Volume3D | None = None,
) -> PatchBatch:
    """Half foreground-centred, half background-centred training patches.

    Foreground centres are drawn uniformly from labelled voxels, background
    centres from unlabelled voxels inside ``roi`` (the whole volume if absent).
    With no labelled voxel the batch is all background and a warning is issued.
    """
    require_same_geometry(img, dilated_labels)
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    labels = np.asarray(dilated_labels.data) > 0
    fg, bg = _center_pools(labels, roi)
    if not len(fg):
        warnings.warn("no foreground voxels: sampling background patches only")
    n_fg = n // 2 if len(fg) else 0
    centers = [fg[i] for i in rng.integers(len(fg), size=n_fg)] if n_fg else []
    centers += [bg[i] for i in rng.integers(len(bg), size=n - n_fg)]
    return _assemble([(img.data, labels, c) for c in centers], cfg)


def lr_at(step: int, cfg: CoarseConfig) -> float:
    """Step decay: multiply by ``lr_decay_factor`` at each decay point."""
    drops = sum(step >= int(p * cfg.iterations) for p in cfg.lr_decay_points)
    return cfg.lr_init * cfg.lr_decay_factor**drops


def penalty(net: nn.Module, cfg: CoarseConfig) -> torch.Tensor:
    """L1 + L2 weight penalty over convolution kernels (biases excluded)."""
    total = torch.zeros(())
    for m in net.modules():
        if isinstance(m, nn.Conv3d):
            total = total + cfg.l1 * m.weight.abs().sum() + cfg.l2 * (m.weight**2).sum()
    return total


def make_optimizer(net: nn.Module, cfg: CoarseConfig) -> torch.optim.Optimizer:
    return torch.optim.RMSprop(net.parameters(), lr=cfg.lr_init, alpha=0.9, eps=1e-4)


@dataclass
class CoarseSubject:
    """Training view of one subject: network input, target and sampling ROI."""

    image: Volume3D
    target: LabelVolume
    roi: Volume3D | None = None


def train_coarse(model: CoarseModel, cohort: Sequence[CoarseSubject], cfg: CoarseConfig | None = None) -> CoarseModel:
    """RMSProp on voxelwise cross-entropy plus the L1/L2 penalty.

    Each step draws ``batch_size`` patches, foreground/background balanced,
    from uniformly chosen subjects. The loss of every step is logged.
    """
    cfg = cfg or model.config
    if not cohort:
        raise ValueError("training cohort is empty")
    rng = np.random.default_rng(cfg.rng_seed)
    prepared = []
    for subj in cohort:
        labels = np.asarray(subj.target.data) > 0
        fg, bg = _center_pools(labels, subj.roi)
        prepared.append((subj.image.data.astype(np.float32), labels, fg, bg))
    with_fg = [p for p in prepared if len(p[2])]
    net = model.net
    opt = make_optimizer(net, cfg)
    net.train()
    for step in range(cfg.iterations):
        lr = lr_at(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        n_fg = cfg.batch_size // 2 if with_fg else 0
        items = []
        for i in range(cfg.batch_size):
            pool = with_fg if i < n_fg else prepared
            data, labels, fg, bg = pool[rng.integers(len(pool))]
            coords = fg if i < n_fg else bg
            items.append((data, labels, coords[rng.integers(len(coords))]))
        batch = _assemble(items, cfg)
        hi, lo, tgt = batch.hi, batch.lo, batch.target
        opt.zero_grad()
        data_loss = F.cross_entropy(net(hi, lo), tgt)
        loss = data_loss + penalty(net, cfg)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {step}: data={data_loss.item()} lr={lr}"
            )
        loss.backward()
        opt.step()
        model.log.append({"step": step, "loss": float(data_loss.item()), "lr": lr})
        if step % 50 == 0:
            log.info("coarse step %d loss %.4f lr %.2e", step, data_loss.item(), lr)
    net.eval()
    return model


@torch.no_grad()
def predict_probabilities(model: CoarseModel, img: Volume3D) -> np.ndarray:
    """Foreground probability per voxel via tiled fully-convolutional inference."""
    cfg = model.config
    if any(n < p for n, p in zip(img.dims, cfg.hi_patch)):
        raise ValueError(f"image {img.dims} is smaller than the receptive field {cfg.hi_patch}")
    net = model.net
    net.eval()
    data = img.data.astype(np.float32)
    out = np.zeros(img.dims, dtype=np.float32)
    ds = cfg.lo_downsample
    # tile starts stay on multiples of ds so the low pathway always pools on
    # the same grid; the last tile overhangs into zero padding
    tiles = []
    for n in img.dims:
        t = min(cfg.inference_tile, int(math.ceil(n / ds)) * ds)
        tiles.append((list(range(0, n, t)), t))
    (xs, tx), (ys, ty), (zs, tz) = tiles
    for x in xs:
        for y in ys:
            for z in zs:
                region = Region((x, y, z), (tx, ty, tz))
                hi, lo = _inputs_for(data, region, cfg)
                probs = net.probabilities(torch.from_numpy(hi)[None, None], torch.from_numpy(lo)[None, None])
                fg = probs[0, 1].numpy()
                clip = region.intersect(img.bounds())
                sl = tuple(slice(a, b) for a, b in zip(clip.start, clip.stop))
                local = tuple(slice(0, b - a) for a, b in zip(clip.start, clip.stop))
                out[sl] = fg[local]
    return out


def predict_coarse(model: CoarseModel, img: Volume3D) -> LabelVolume:
    probs = predict_probabilities(model, img)
    return LabelVolume((probs > 0.5).astype(np.uint8), img.spacing, img.origin)


@dataclass(frozen=True)
class CandidateRegion:
    center: tuple[int, int, int]
    extent: tuple[int, int, int]
    score: float
    voxel_count: int = 0

    def __post_init__(self) -> None:
        if min(self.extent) <= 0:
            raise ValueError("candidate extent must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("candidate score must lie in [0, 1]")

    def to_json(self) -> dict:
        return {"center": list(self.center), "extent": list(self.extent), "score": self.score}


def extract_candidates(
    mask: Volume3D | np.ndarray,
    min_size: int = 1,
    probs: np.ndarray | None = None,
    connectivity: int = 26,
) -> list[CandidateRegion]:
    """One candidate per component of at least ``min_size`` voxels, largest first.

    The score is the mean foreground probability over the component when
    ``probs`` is given, else 1.
    """
    comps = connected_components(mask, connectivity)
    out = []
    for comp in comps:
        if comp.voxel_count < min_size:
            continue
        center = tuple(int(math.floor(c + 0.5)) for c in comp.centroid)
        score = 1.0 if probs is None else float(np.clip(probs[tuple(comp.indices.T)].mean(), 0, 1))
        out.append(CandidateRegion(center, comp.bbox.size, score, comp.voxel_count))
    out.sort(key=lambda c: (-c.voxel_count, c.center))
    return out
