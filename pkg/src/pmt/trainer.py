"""Two-stage training: supervised burn-in, then joint adaptation with an EMA teacher."""
from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core import Annotation, DomainId, LossBreakdown, TrainConfig, spawn_rngs
from .data import DomainDataset
from .eval import EvalResult, evaluate
from .meanteacher import (StrongAugParams, TeacherState, ema_update, filter_pseudo_labels, init_teacher,
                          strong_augment, unsupervised_loss, weak_augment)
from .protobank import PrototypeBank, compute_update_value, prototype_loss, update_prototype
from .toydet import (Detector, backbone_forward, build_detector, detect, discriminator_loss, images_to_tensor,
                     prototype_embed, roi_pool, save_checkpoint, supervised_loss)

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no_disc", "no_sep", "no_align", "disc_only", "mt_only", "source_only")

METRIC_COLUMNS = ("phase", "epoch", "step", "sup", "unsup", "dis", "prot", "total", "pseudo_count",
                  "active_protos", "grad_norm", "target_AP50")


class TrainingError(RuntimeError):
    pass


def apply_ablation(config: TrainConfig, ablation: str) -> TrainConfig:
    """Loss-composition changes for one ablation; data and schedule are never touched."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    if ablation == "no_disc":
        return config.replace(beta=0.0)
    if ablation == "no_sep":
        return config.replace(use_separation=False)
    if ablation == "no_align":
        return config.replace(use_alignment=False)
    if ablation == "disc_only":
        return config.replace(gamma=0.0)
    if ablation == "mt_only":
        return config.replace(beta=0.0, gamma=0.0)
    if ablation == "source_only":
        return config.replace(adapt_epochs=0)
    return config


@dataclass
class StepReport:
    losses: LossBreakdown
    pseudo_count: int
    active_prototypes: int
    grad_norm: float


@dataclass
class TrainState:
    config: TrainConfig
    student: Detector
    optimizer: torch.optim.Optimizer
    rngs: dict[str, np.random.Generator]
    bank: PrototypeBank
    teacher: TeacherState | None = None
    epoch: int = 0
    step: int = 0
    phase: str = "burn_in"
    data_digest: str = ""  # running hash of every batch fed to the model

    def clone(self) -> "TrainState":
        """Independent deep copy (student, teacher, optimizer moments, RNG streams)."""
        return copy.deepcopy(self)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = dict(self.student.state_dict())
        if self.teacher is not None:
            out.update({f"teacher.{k}": v for k, v in self.teacher.params.state_dict().items()})
        out.update(self.bank.state_dict())
        return out

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.tensors(), {
            "config": self.config.to_dict(), "step": self.step, "epoch": self.epoch,
            "phase": self.phase, "teacher_step": None if self.teacher is None else self.teacher.step,
            "data_digest": self.data_digest,
        })

    def record_batch(self, idx: Sequence[int], *views: torch.Tensor) -> None:
        h = hashlib.sha256(self.data_digest.encode())
        h.update(np.asarray(idx, dtype=np.int64).tobytes())
        for v in views:
            h.update(v.detach().contiguous().numpy().tobytes())
        self.data_digest = h.hexdigest()


def make_optimizer(model: Detector, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.sgd_momentum)


def init_state(config: TrainConfig) -> TrainState:
    rngs = spawn_rngs(config.seed, ["init", "data", "augment"])
    student = build_detector(config, seed=int(rngs["init"].integers(0, 2 ** 31 - 1)))
    bank = PrototypeBank.zeros(config.num_domains, config.num_classes, config.proto_dim)
    return TrainState(config, student, make_optimizer(student, config), rngs, bank)


# ---------------------------------------------------------------- batching

class BatchStream:
    """Endless shuffled index batches over one dataset."""

    def __init__(self, size: int, batch_size: int, rng: np.random.Generator):
        if size == 0:
            raise TrainingError("cannot draw batches from an empty dataset")
        self.size, self.batch_size, self.rng = size, batch_size, rng
        self._pending: list[int] = []

    def next(self) -> list[int]:
        while len(self._pending) < self.batch_size:
            self._pending.extend(self.rng.permutation(self.size).tolist())
        out, self._pending = self._pending[:self.batch_size], self._pending[self.batch_size:]
        return out


@dataclass
class LabeledBatch:
    images: torch.Tensor
    annotations: list[list[Annotation]]
    domain: int


@dataclass
class TargetBatch:
    weak: torch.Tensor
    strong: torch.Tensor


def _weak_batch(images, annotations, rng):
    scale = float(rng.uniform(0.8, 1.2))
    views = [weak_augment(img, anns, rng, scale=scale) for img, anns in zip(images, annotations)]
    return [v[0] for v in views], [v[1] for v in views]


def prepare_source_batch(ds: DomainDataset, idx: Sequence[int], rng: np.random.Generator) -> LabeledBatch:
    imgs, anns = _weak_batch([ds.images[i] for i in idx], [ds.annotations[i] for i in idx], rng)
    return LabeledBatch(images_to_tensor(imgs), anns, ds.domain_id.index)


def prepare_target_batch(ds: DomainDataset, idx: Sequence[int], rng: np.random.Generator,
                         strong: StrongAugParams = StrongAugParams()) -> TargetBatch:
    weak, _ = _weak_batch([ds.images[i] for i in idx], [[] for _ in idx], rng)
    strong_views = [strong_augment(w, rng, strong) for w in weak]
    return TargetBatch(images_to_tensor(weak), images_to_tensor(strong_views))


def _check_sources(sources: Sequence[DomainDataset], config: TrainConfig) -> None:
    if len(sources) != config.num_sources:
        raise TrainingError(f"expected {config.num_sources} source datasets, got {len(sources)}")
    for j, ds in enumerate(sources):
        if not ds.labeled:
            raise TrainingError(f"source dataset {j} is unlabeled")
        if ds.domain_id.index != j:
            raise TrainingError(f"source dataset {j} carries domain index {ds.domain_id.index}")


def _steps_per_epoch(sizes: Sequence[int], batch_size: int) -> int:
    return max(math.ceil(n / batch_size) for n in sizes)


# ---------------------------------------------------------------- optimisation

def _grad_norm(params) -> float:
    grads = [p.grad.detach().flatten() for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.cat(grads).norm())


def _apply_gradients(state: TrainState, loss: torch.Tensor) -> float:
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for p in state.student.parameters() if p.grad is not None]
    if state.config.grad_clip > 0 and params:
        norm = float(torch.nn.utils.clip_grad_norm_(params, state.config.grad_clip))
    else:
        norm = _grad_norm(params)
    state.optimizer.step()
    return norm


def burn_in_step(state: TrainState, batches: Sequence[LabeledBatch]) -> StepReport:
    """One supervised step over one minibatch per source domain."""
    state.student.train()
    loss = sum(supervised_loss(b.images, b.annotations, state.student) for b in batches)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite supervised loss at step {state.step}: {float(loss)}")
    norm = _apply_gradients(state, loss)
    state.step += 1
    cfg = state.config
    return StepReport(LossBreakdown.combine(float(loss.detach()), 0.0, 0.0, 0.0, cfg.alpha, cfg.beta, cfg.gamma),
                      0, 0, norm)


def _group_embeddings(emb: torch.Tensor, annotations: Sequence[Sequence[Annotation]]):
    classes = [a.class_id for anns in annotations for a in anns]
    groups: dict[int, list[int]] = {}
    for r, k in enumerate(classes):
        groups.setdefault(k, []).append(r)
    return {k: emb[rows] for k, rows in sorted(groups.items())}


def adapt_step(state: TrainState, sources: Sequence[LabeledBatch], target: TargetBatch) -> StepReport:
    """One optimisation step of sup + alpha*unsup + beta*dis + gamma*prot, then the EMA update."""
    if state.phase != "adapt" or state.teacher is None:
        raise TrainingError("adapt_step requires a finished burn-in (teacher initialized)")
    cfg, model = state.config, state.student
    model.train()
    n_target = cfg.target_index

    # teacher labels the weak target view
    dets = detect(target.weak, state.teacher.params, cfg.tau, cfg.nms_iou)
    pseudo = [filter_pseudo_labels(d, cfg.tau) for d in dets]
    pseudo_count = sum(len(p) for p in pseudo)
    h, w = target.strong.shape[-2:]
    assert target.weak.shape == target.strong.shape and all(a.box.inside(w, h) for p in pseudo for a in p)

    src_feats = [backbone_forward(b.images, model) for b in sources]
    tgt_feats = backbone_forward(target.strong, model)

    sup = sum(supervised_loss(b.images, b.annotations, model, feats=f) for b, f in zip(sources, src_feats))

    with torch.set_grad_enabled(cfg.alpha > 0):
        tgt_logits, _ = model.det_head(tgt_feats)
        unsup = unsupervised_loss(tgt_logits, pseudo, cfg.num_classes)

    with torch.set_grad_enabled(cfg.beta > 0):
        dis = sum(discriminator_loss(f, b.domain, model) for b, f in zip(sources, src_feats))
        dis = dis + discriminator_loss(tgt_feats, n_target, model)

    with torch.set_grad_enabled(cfg.gamma > 0):
        bank = state.bank
        labeled = [(b.domain, f, b.annotations) for b, f in zip(sources, src_feats)]
        labeled.append((n_target, tgt_feats, pseudo))
        for domain, feats, anns in labeled:
            if not any(anns):
                continue
            rois = roi_pool(feats, [[a.box for a in ann] for ann in anns], cfg.roi_size)
            emb = prototype_embed(rois, model)
            for k, group in _group_embeddings(emb, anns).items():
                bank = update_prototype(bank, compute_update_value(group, DomainId(domain), k))
        prot_terms = prototype_loss(bank, cfg.use_alignment, cfg.use_separation)
        prot = prot_terms.value

    components = {"sup": sup, "unsup": unsup, "dis": dis, "prot": prot}
    values = {k: float(v.detach()) for k, v in components.items()}
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite loss at step {state.step}: {bad}; all components: {values}")

    total = sup
    for weight, term in ((cfg.alpha, unsup), (cfg.beta, dis), (cfg.gamma, prot)):
        if weight > 0:
            total = total + weight * term
    norm = _apply_gradients(state, total)

    state.bank = bank.detach()
    ema_update(state.teacher, model, cfg.ema_momentum)
    state.step += 1
    losses = LossBreakdown.combine(values["sup"], values["unsup"], values["dis"], values["prot"],
                                   cfg.alpha, cfg.beta, cfg.gamma)
    return StepReport(losses, pseudo_count, state.bank.num_active(), norm)


# ---------------------------------------------------------------- loops

@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, phase: str, epoch: int, step: int, report: StepReport) -> None:
        l = report.losses
        self.rows.append({"phase": phase, "epoch": epoch, "step": step, "sup": l.sup, "unsup": l.unsup,
                          "dis": l.dis, "prot": l.prot, "total": l.total, "pseudo_count": report.pseudo_count,
                          "active_protos": report.active_prototypes, "grad_norm": report.grad_norm,
                          "target_AP50": ""})

    def mark_eval(self, ap50: float) -> None:
        if self.rows:
            self.rows[-1]["target_AP50"] = ap50

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


EpochHook = Callable[[TrainState, "EvalResult | None"], None]


def _epoch_end(state: TrainState, metrics: MetricsLog, target_eval: DomainDataset | None,
               out_dir: Path | None, model: Detector) -> EvalResult | None:
    result = None
    if target_eval is not None:
        result = evaluate(model, target_eval, state.config.num_classes, state.config.eval_score_threshold,
                          state.config.nms_iou)
        metrics.mark_eval(result.map50)
        log.info("%s epoch %d: target AP50 %.4f", state.phase, state.epoch, result.map50)
    if out_dir is not None:
        state.save(out_dir / f"ckpt_epoch{state.epoch:03d}.pt")
    return result


def burn_in(sources: Sequence[DomainDataset], config: TrainConfig, *, state: TrainState | None = None,
            target_eval: DomainDataset | None = None, out_dir: str | Path | None = None,
            metrics: MetricsLog | None = None) -> TrainState:
    """Supervised training on the sources, then the teacher becomes a copy of the student."""
    _check_sources(sources, config)
    state = state or init_state(config)
    metrics = metrics if metrics is not None else MetricsLog()
    out = Path(out_dir) if out_dir is not None else None
    streams = [BatchStream(len(ds), config.batch_size, state.rngs["data"]) for ds in sources]
    steps = _steps_per_epoch([len(ds) for ds in sources], config.batch_size)
    for _ in range(config.burn_in_epochs):
        for _ in range(steps):
            batches = []
            for ds, s in zip(sources, streams):
                idx = s.next()
                batches.append(prepare_source_batch(ds, idx, state.rngs["augment"]))
                state.record_batch(idx, batches[-1].images)
            metrics.add("burn_in", state.epoch, state.step, burn_in_step(state, batches))
        _epoch_end(state, metrics, target_eval, out, state.student)
        state.epoch += 1
    state.teacher = init_teacher(state.student)
    state.bank = PrototypeBank.zeros(config.num_domains, config.num_classes, config.proto_dim,
                                     dtype=next(state.student.parameters()).dtype)
    state.phase = "adapt"
    return state


def adapt(state: TrainState, sources: Sequence[DomainDataset], target: DomainDataset, *,
          target_eval: DomainDataset | None = None, out_dir: str | Path | None = None,
          metrics: MetricsLog | None = None, on_epoch: EpochHook | None = None) -> TrainState:
    """Round-robin adaptation epochs (one batch per source plus one target batch per step)."""
    config = state.config
    _check_sources(sources, config)
    if state.phase != "adapt" or state.teacher is None:
        raise TrainingError("adapt requires a completed burn-in")
    if target.labeled or target.domain_id.index != config.target_index:
        raise TrainingError("target training data must be unlabeled with domain index N")
    metrics = metrics if metrics is not None else MetricsLog()
    out = Path(out_dir) if out_dir is not None else None
    everything = list(sources) + [target]
    streams = [BatchStream(len(ds), config.batch_size, state.rngs["data"]) for ds in everything]
    steps = _steps_per_epoch([len(ds) for ds in everything], config.batch_size)
    for _ in range(config.adapt_epochs):
        for _ in range(steps):
            src = []
            for ds, s in zip(sources, streams[:-1]):
                idx = s.next()
                src.append(prepare_source_batch(ds, idx, state.rngs["augment"]))
                state.record_batch(idx, src[-1].images)
            idx = streams[-1].next()
            tgt = prepare_target_batch(target, idx, state.rngs["augment"])
            state.record_batch(idx, tgt.weak, tgt.strong)
            metrics.add("adapt", state.epoch, state.step, adapt_step(state, src, tgt))
        result = _epoch_end(state, metrics, target_eval, out, state.teacher.params)
        if on_epoch is not None:
            on_epoch(state, result)
        state.epoch += 1
    return state


@dataclass
class RunResult:
    state: TrainState
    metrics: MetricsLog
    target_ap50: float | None
    evaluated: str  # "teacher" or "student"


def run_experiment(config: TrainConfig, sources: Sequence[DomainDataset], target: DomainDataset,
                   target_eval: DomainDataset | None = None, ablation: str = "none",
                   burned: tuple[TrainState, MetricsLog] | None = None,
                   out_dir: str | Path | None = None) -> RunResult:
    """Burn-in (or reuse a finished one) plus adaptation under one ablation.

    ``burned`` lets several ablations share one burn-in; it is cloned, never mutated.
    """
    cfg = apply_ablation(config, ablation)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if burned is None:
        metrics = MetricsLog()
        state = burn_in(sources, cfg, target_eval=target_eval, out_dir=out, metrics=metrics)
    else:
        state, metrics = burned[0].clone(), copy.deepcopy(burned[1])
        if state.config.replace(**_loss_fields(cfg)) != cfg:
            raise TrainingError("shared burn-in was produced under a different schedule/config")
    state.config = cfg
    if ablation == "source_only":
        ap = evaluate(state.student, target_eval, cfg.num_classes, cfg.eval_score_threshold,
                      cfg.nms_iou).map50 if target_eval is not None else None
        result = RunResult(state, metrics, ap, "student")
    else:
        adapt(state, sources, target, target_eval=target_eval, out_dir=out, metrics=metrics)
        ap = evaluate(state.teacher.params, target_eval, cfg.num_classes, cfg.eval_score_threshold,
                      cfg.nms_iou).map50 if target_eval is not None else None
        result = RunResult(state, metrics, ap, "teacher")
    if out is not None:
        metrics.write(out / "metrics.csv")
    return result


def _loss_fields(cfg: TrainConfig) -> dict:
    keys = ("alpha", "beta", "gamma", "use_alignment", "use_separation", "adapt_epochs")
    return {k: getattr(cfg, k) for k in keys}


def params_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
