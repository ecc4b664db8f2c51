"""EMA teacher, weak/strong augmentation and pseudo-label self-training on the target."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .core import Annotation, Box
from .toydet import Detection, Detector, build_targets, detection_loss, STRIDE

PseudoLabelSet = list[list[Annotation]]


@dataclass
class TeacherState:
    params: Detector
    step: int = 0


def init_teacher(student: Detector) -> TeacherState:
    """Exact copy of the student; the optimizer never sees these tensors."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return TeacherState(teacher, 0)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: Detector, m: float) -> TeacherState:
    """theta_teacher <- m * theta_teacher + (1 - m) * theta_student, for every tensor."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum {m} outside [0, 1]")
    t_params = dict(teacher.params.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        missing = sorted(t_params.keys() ^ s_params.keys())
        raise ValueError(f"teacher/student structure differs at {missing[0]!r}")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ValueError(f"shape mismatch for {name!r}: teacher {tuple(tp.shape)} vs student {tuple(sp.shape)}")
        tp.mul_(m).add_(sp.detach(), alpha=1.0 - m)
    teacher.step += 1
    return teacher


# ---------------------------------------------------------------- weak view

def hflip_box(box: Box, width: float) -> Box:
    return Box(width - box.x_max, box.y_min, width - box.x_min, box.y_max)


def snapped_size(size: int, scale: float, lo: float = 0.8, hi: float = 1.2) -> int:
    """Rescaled side length, rounded to the detector stride and kept within [lo, hi] * size."""
    smallest = STRIDE * math.ceil(lo * size / STRIDE)
    largest = STRIDE * math.floor(hi * size / STRIDE)
    target = STRIDE * round(size * scale / STRIDE)
    return int(min(max(target, smallest), largest))


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].float()
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0).astype(image.dtype)


def weak_augment(image: np.ndarray, annotations: Sequence[Annotation], rng: np.random.Generator,
                 scale: float | None = None, flip: bool | None = None) -> tuple[np.ndarray, list[Annotation]]:
    """Random horizontal flip (p = 0.5) and rescale by a factor in [0.8, 1.2].

    ``scale``/``flip`` override the random draws (callers fix one scale per
    minibatch so images stack). Output sides stay multiples of the stride.
    """
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if scale is None:
        scale = float(rng.uniform(0.8, 1.2))
    h, w = image.shape[:2]
    anns = list(annotations)
    if flip:
        image = image[:, ::-1].copy()
        anns = [Annotation(hflip_box(a.box, w), a.class_id) for a in anns]
    nh, nw = snapped_size(h, scale), snapped_size(w, scale)
    if (nh, nw) != (h, w):
        image = resize_image(image, nh, nw)
        anns = [Annotation(a.box.scaled(nw / w, nh / h), a.class_id) for a in anns]
    return image, anns


# ---------------------------------------------------------------- strong view

@dataclass(frozen=True)
class StrongAugParams:
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    # (probability, min area fraction, max area fraction) per cutout pass
    cutouts: tuple[tuple[float, float, float], ...] = ((0.7, 0.05, 0.2), (0.5, 0.02, 0.2), (0.3, 0.02, 0.2))
    cutout_ratio: tuple[float, float] = (0.3, 3.3)

    @classmethod
    def disabled(cls) -> "StrongAugParams":
        return cls(jitter_p=0.0, grayscale_p=0.0, blur_p=0.0, cutouts=())


def _gray(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114], dtype=image.dtype)


def color_jitter(image: np.ndarray, rng: np.random.Generator, p: StrongAugParams) -> np.ndarray:
    out = image
    for kind in rng.permutation(3):
        if kind == 0:
            out = out * rng.uniform(1 - p.brightness, 1 + p.brightness)
        elif kind == 1:
            mean = _gray(out).mean()
            out = (out - mean) * rng.uniform(1 - p.contrast, 1 + p.contrast) + mean
        else:
            g = _gray(out)[..., None]
            out = (out - g) * rng.uniform(1 - p.saturation, 1 + p.saturation) + g
        out = np.clip(out, 0.0, 1.0)
    return out


def cutout(image: np.ndarray, rng: np.random.Generator, area: tuple[float, float],
           ratio: tuple[float, float]) -> tuple[np.ndarray, tuple[int, int, int, int], float]:
    """Fill one random rectangle with a constant gray; returns (image, (x0, y0, x1, y1), fill)."""
    h, w = image.shape[:2]
    frac = rng.uniform(*area)
    aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
    ch = int(round(math.sqrt(frac * h * w * aspect)))
    cw = int(round(math.sqrt(frac * h * w / aspect)))
    ch, cw = min(max(ch, 1), h), min(max(cw, 1), w)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    fill = float(rng.uniform(0.0, 1.0))
    out = image.copy()
    out[y0:y0 + ch, x0:x0 + cw] = fill
    return out, (x0, y0, x0 + cw, y0 + ch), fill


def strong_augment(image: np.ndarray, rng: np.random.Generator,
                   params: StrongAugParams = StrongAugParams()) -> np.ndarray:
    """Pixel-only perturbation: color jitter, grayscale, Gaussian blur, cutout.

    Geometry is untouched, so labels of the input remain valid.
    """
    out = image
    if rng.random() < params.jitter_p:
        out = color_jitter(out, rng, params)
    if rng.random() < params.grayscale_p:
        out = np.repeat(_gray(out)[..., None], 3, axis=-1)
    if rng.random() < params.blur_p:
        sigma = rng.uniform(*params.blur_sigma)
        out = gaussian_filter(out, sigma=(sigma, sigma, 0))
    for prob, lo, hi in params.cutouts:
        if rng.random() < prob:
            out, _, _ = cutout(out, rng, (lo, hi), params.cutout_ratio)
    if out.shape != image.shape:
        raise AssertionError("strong augmentation changed the image shape")
    return out.astype(image.dtype, copy=False)


# ---------------------------------------------------------------- pseudo labels

def filter_pseudo_labels(dets: Sequence[Detection], tau: float) -> list[Annotation]:
    """Keep detections scoring at least ``tau``, in their original order."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau {tau} outside [0, 1]")
    return [Annotation(d.box, d.class_id) for d in dets if d.score >= tau]


def unsupervised_loss(cls_logits: torch.Tensor, pseudo: PseudoLabelSet, num_classes: int) -> torch.Tensor:
    """Classification-only loss of the student's strong-view logits against pseudo-labels.

    The box-regression output never enters this loss.
    """
    targets = build_targets(pseudo, cls_logits.shape[-2], cls_logits.shape[-1], num_classes,
                            device=cls_logits.device, dtype=cls_logits.dtype)
    cls_loss, _ = detection_loss(cls_logits, None, targets, with_regression=False)
    return cls_loss
