"""Miniature dense detector with the auxiliary heads used for adaptation.

Layout: a stride-8 conv backbone F, a dense per-cell head (K+1 class logits
plus 4 box offsets), a prototype MLP P fed by ROI-aligned features and a
domain discriminator D fed by globally pooled backbone features through a
gradient reversal layer.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, roi_align

from .core import Annotation, Box, TrainConfig

STRIDE = 8
REF_SIZE = 2.0 * STRIDE  # box size that decodes from a zero log-size offset
SMOOTH_L1_BETA = 1.0 / 9.0
MAX_LOG_SIZE = math.log(1000.0 / REF_SIZE)
POSITIVE_FRACTION = 0.25


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class ParamCount:
    learnable: int
    domain_state: int

    @property
    def total(self) -> int:
        return self.learnable + self.domain_state


class Backbone(nn.Module):
    def __init__(self, channels: int = 48):
        super().__init__()
        widths = [3, 16, 32, channels, channels]
        strides = [2, 2, 2, 1]
        for n, (cin, cout, s) in enumerate(zip(widths[:-1], widths[1:], strides), start=1):
            setattr(self, f"conv{n}", nn.Conv2d(cin, cout, 3, stride=s, padding=1))
            setattr(self, f"norm{n}", nn.GroupNorm(_groups(cout), cout))
        self.out_channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - 0.5) / 0.25
        for n in range(1, 5):
            x = F.relu(getattr(self, f"norm{n}")(getattr(self, f"conv{n}")(x)))
        return x


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class DetHead(nn.Module):
    def __init__(self, in_channels: int, hidden: int, num_classes: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.cls = nn.Conv2d(hidden, num_classes + 1, 1)  # last channel is background
        self.reg = nn.Conv2d(hidden, 4, 1)

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.relu(self.conv(feats))
        return self.cls(h), self.reg(h)


class PrototypeNet(nn.Module):
    def __init__(self, in_features: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x.flatten(1))))


class DomainDiscriminator(nn.Module):
    def __init__(self, in_features: int, hidden: int, num_domains: int):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, num_domains)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class Detector(nn.Module):
    def __init__(self, num_classes: int, num_sources: int, proto_dim: int, *,
                 channels: int = 48, head_hidden: int = 48, roi_size: int = 3,
                 proto_hidden: int = 64, disc_hidden: int = 64):
        super().__init__()
        self.num_classes = num_classes
        self.num_sources = num_sources
        self.roi_size = roi_size
        self.backbone = Backbone(channels)
        self.det_head = DetHead(channels, head_hidden, num_classes)
        self.proto_net = PrototypeNet(channels * roi_size * roi_size, proto_hidden, proto_dim)
        self.disc = DomainDiscriminator(channels, disc_hidden, num_sources + 1)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "Detector":
        return cls(config.num_classes, config.num_sources, config.proto_dim,
                   channels=config.feature_channels, head_hidden=config.head_hidden,
                   roi_size=config.roi_size, proto_hidden=config.proto_hidden,
                   disc_hidden=config.disc_hidden)


def build_detector(config: TrainConfig, seed: int) -> Detector:
    """Freshly initialized detector; initialization depends only on ``seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = Detector.from_config(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def images_to_tensor(images: Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack H x W x 3 arrays into a B x 3 x H x W tensor."""
    arr = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def backbone_forward(images: torch.Tensor, model: Detector) -> torch.Tensor:
    """Backbone features, ``B x c_f x H/8 x W/8``; also accepts a single ``3 x H x W`` image."""
    if images.dim() == 3:
        images = images.unsqueeze(0)
    h, w = images.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image size {h}x{w} is not divisible by {STRIDE}")
    return model.backbone(images)


# ---------------------------------------------------------------- GRL

class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambd, None


def grl(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lambd``."""
    if lambd < 0:
        raise ValueError("lambda must be nonnegative")
    return _GradReverse.apply(x, lambd)


# ---------------------------------------------------------------- losses

def build_targets(annotations: Sequence[Sequence[Annotation]], grid_h: int, grid_w: int,
                  num_classes: int, device=None, dtype=torch.float32):
    """Per-cell training targets.

    A cell is a positive for the ground-truth box whose center falls in it
    (the larger box wins a tie); every other cell is background (index K).
    Returns ``(cls_target [B,h,w] long, reg_target [B,4,h,w], positive mask [B,h,w])``.
    """
    b = len(annotations)
    cls_t = torch.full((b, grid_h, grid_w), num_classes, dtype=torch.long, device=device)
    reg_t = torch.zeros((b, 4, grid_h, grid_w), dtype=dtype, device=device)
    best_area = np.zeros((b, grid_h, grid_w))
    for n, anns in enumerate(annotations):
        for a in anns:
            cx, cy = a.box.center
            j = min(max(int(cx // STRIDE), 0), grid_w - 1)
            i = min(max(int(cy // STRIDE), 0), grid_h - 1)
            if a.box.area <= best_area[n, i, j]:
                continue
            best_area[n, i, j] = a.box.area
            cls_t[n, i, j] = a.class_id
            reg_t[n, :, i, j] = torch.tensor(encode_box(a.box, i, j), dtype=dtype)
    return cls_t, reg_t, cls_t != num_classes


def encode_box(box: Box, i: int, j: int) -> tuple[float, float, float, float]:
    cx, cy = box.center
    return ((cx - (j + 0.5) * STRIDE) / STRIDE, (cy - (i + 0.5) * STRIDE) / STRIDE,
            math.log(box.width / REF_SIZE), math.log(box.height / REF_SIZE))


def detection_loss(cls_logits: torch.Tensor, box_offsets: torch.Tensor | None, targets,
                   with_regression: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy over all cells plus smooth-L1 over positive cells.

    Positive and background cells are averaged separately and mixed with
    weights ``POSITIVE_FRACTION`` / ``1 - POSITIVE_FRACTION``, the balance a
    sampled 25%-positive ROI minibatch would have.

    Returns ``(classification, regression)``; the regression term is an exact
    zero without positives or when ``with_regression`` is false.
    """
    cls_t, reg_t, pos = targets
    ce = F.cross_entropy(cls_logits, cls_t, reduction="none")
    if bool(pos.any()) and not bool(pos.all()):
        cls_loss = POSITIVE_FRACTION * ce[pos].mean() + (1 - POSITIVE_FRACTION) * ce[~pos].mean()
    else:
        cls_loss = ce.mean()
    if not with_regression or box_offsets is None:
        return cls_loss, cls_logits.new_zeros(())
    num_pos = int(pos.sum())
    if num_pos == 0:
        return cls_loss, box_offsets.new_zeros(())
    mask = pos.unsqueeze(1).expand_as(box_offsets)
    reg = F.smooth_l1_loss(box_offsets[mask], reg_t[mask], beta=SMOOTH_L1_BETA, reduction="sum")
    return cls_loss, reg / num_pos


def supervised_loss(images: torch.Tensor, annotations: Sequence[Sequence[Annotation]], model: Detector,
                    feats: torch.Tensor | None = None) -> torch.Tensor:
    """Classification cross-entropy plus smooth-L1 box regression on one labeled minibatch.

    Gradients reach backbone and detection head only. ``feats`` may carry
    precomputed backbone features for ``images``.
    """
    if feats is None:
        feats = backbone_forward(images, model)
    cls_logits, offsets = model.det_head(feats)
    targets = build_targets(annotations, feats.shape[-2], feats.shape[-1], model.num_classes,
                            device=feats.device, dtype=feats.dtype)
    cls_loss, reg_loss = detection_loss(cls_logits, offsets, targets)
    return cls_loss + reg_loss


def discriminator_logits(feats: torch.Tensor, model: Detector, lambd: float = 1.0) -> torch.Tensor:
    pooled = feats.mean(dim=(2, 3))
    return model.disc(grl(pooled, lambd))


def discriminator_loss(feats: torch.Tensor, domains: torch.Tensor | int, model: Detector,
                       lambd: float = 1.0) -> torch.Tensor:
    """Mean cross-entropy of the domain classifier on reversed, pooled features.

    ``domains`` holds one domain index per image (or one int for the batch).
    """
    logits = discriminator_logits(feats, model, lambd)
    if isinstance(domains, int):
        domains = torch.full((logits.shape[0],), domains, dtype=torch.long)
    return F.cross_entropy(logits, domains)


# ---------------------------------------------------------------- ROI features

def roi_pool(feats: torch.Tensor, boxes: Sequence[Sequence[Box]], output_size: int) -> torch.Tensor:
    """Bilinear ROI-align of image-space boxes on a stride-8 feature map.

    ``boxes[n]`` lists the boxes of image ``n``; returns ``R x C x s x s`` in
    the same order. One bilinear sample is taken at each bin center. A box
    narrower than one feature cell along either axis is pooled from the
    single cell nearest its center.
    """
    if feats.dim() == 3:
        feats = feats.unsqueeze(0)
    rows, degenerate = [], []
    for n, bs in enumerate(boxes):
        for b in bs:
            rows.append([n, b.x_min / STRIDE, b.y_min / STRIDE, b.x_max / STRIDE, b.y_max / STRIDE])
            degenerate.append(b.width < STRIDE or b.height < STRIDE)
    c = feats.shape[1]
    if not rows:
        return feats.new_zeros((0, c, output_size, output_size))
    rois = torch.tensor(rows, dtype=feats.dtype, device=feats.device)
    pooled = roi_align(feats, rois, output_size=output_size, spatial_scale=1.0,
                       sampling_ratio=1, aligned=True)
    if any(degenerate):
        h, w = feats.shape[-2:]
        parts = []
        for r, (row, deg) in enumerate(zip(rows, degenerate)):
            if not deg:
                parts.append(pooled[r])
                continue
            n = int(row[0])
            j = min(max(int(0.5 * (row[1] + row[3])), 0), w - 1)
            i = min(max(int(0.5 * (row[2] + row[4])), 0), h - 1)
            parts.append(feats[n, :, i, j][:, None, None].expand(c, output_size, output_size))
        pooled = torch.stack(parts)
    return pooled


def prototype_embed(roi_feats: torch.Tensor, model: Detector) -> torch.Tensor:
    return model.proto_net(roi_feats)


# ---------------------------------------------------------------- inference

def decode_boxes(offsets: torch.Tensor) -> torch.Tensor:
    """``[B,4,h,w]`` offsets to ``[B,h,w,4]`` image-space (x_min, y_min, x_max, y_max)."""
    _, _, h, w = offsets.shape
    jj = (torch.arange(w, dtype=offsets.dtype) + 0.5) * STRIDE
    ii = (torch.arange(h, dtype=offsets.dtype) + 0.5) * STRIDE
    cx = jj[None, None, :] + offsets[:, 0] * STRIDE
    cy = ii[None, :, None] + offsets[:, 1] * STRIDE
    bw = REF_SIZE * torch.exp(offsets[:, 2].clamp(max=MAX_LOG_SIZE))
    bh = REF_SIZE * torch.exp(offsets[:, 3].clamp(max=MAX_LOG_SIZE))
    return torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1)


def nms(boxes: torch.Tensor, scores: torch.Tensor, classes: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy per-class suppression; kept indices in descending score order."""
    return batched_nms(boxes, scores, classes, iou_threshold)


def decode_detections(cls_logits: torch.Tensor, offsets: torch.Tensor, image_size: tuple[int, int],
                      score_threshold: float, nms_iou: float) -> list[list[Detection]]:
    """Turn dense head outputs into scored, suppressed detections per image.

    A candidate exists for every (cell, class) with probability strictly above
    ``score_threshold``; boxes are clipped to the image.
    """
    height, width = image_size
    num_classes = cls_logits.shape[1] - 1
    probs = torch.softmax(cls_logits.detach().double(), dim=1)[:, :num_classes]  # B,K,h,w
    boxes = decode_boxes(offsets.detach().double())
    boxes[..., 0::2] = boxes[..., 0::2].clamp(0, width)
    boxes[..., 1::2] = boxes[..., 1::2].clamp(0, height)
    out = []
    for n in range(probs.shape[0]):
        keep = probs[n] > score_threshold
        k_idx, i_idx, j_idx = torch.nonzero(keep, as_tuple=True)
        cand_boxes = boxes[n, i_idx, j_idx]
        cand_scores = probs[n, k_idx, i_idx, j_idx]
        good = (cand_boxes[:, 2] > cand_boxes[:, 0]) & (cand_boxes[:, 3] > cand_boxes[:, 1])
        cand_boxes, cand_scores, k_idx = cand_boxes[good], cand_scores[good], k_idx[good]
        kept = nms(cand_boxes, cand_scores, k_idx, nms_iou) if len(cand_scores) else k_idx
        dets = [Detection(Box(*cand_boxes[t].tolist()), int(k_idx[t]), float(cand_scores[t]))
                for t in kept.tolist()]
        out.append(dets)
    return out


@torch.no_grad()
def detect(images: torch.Tensor, model: Detector, score_threshold: float = 0.05,
           nms_iou: float = 0.5) -> list[list[Detection]]:
    """Run the detector on a ``B x 3 x H x W`` batch (or one ``3 x H x W`` image)."""
    if images.dim() == 3:
        images = images.unsqueeze(0)
    dtype = next(model.parameters()).dtype
    feats = backbone_forward(images.to(dtype), model)
    cls_logits, offsets = model.det_head(feats)
    return decode_detections(cls_logits, offsets, tuple(images.shape[-2:]), score_threshold, nms_iou)


# ---------------------------------------------------------------- bookkeeping

def count_parameters(model: Detector, num_sources: int, num_classes: int, proto_dim: int) -> ParamCount:
    """Learnable parameter count and the size of the per-domain prototype memory."""
    learnable = sum(p.numel() for p in model.parameters())
    domains = num_sources + 1
    return ParamCount(learnable=learnable, domain_state=domains * num_classes * proto_dim + domains * num_classes)


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], sidecar: dict[str, Any]) -> None:
    """Write ``path`` (tensor archive keyed by dotted names) and ``path`` + ``.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({k: v.detach().cpu().clone() for k, v in tensors.items()}, path)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True),
                                                       encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors = torch.load(path, map_location="cpu", weights_only=True)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8")) if sidecar_path.is_file() else {}
    return tensors, sidecar
