"""Per-(domain, class) prototype memory and the two-part contrastive loss on it.

Local prototypes are streaming means of per-minibatch embedding averages.
Same-class prototypes are pulled together across all domains (target
included); count-weighted global prototypes of the source domains are
pushed apart across classes.

Gradient routing: the stored history of a prototype is a constant. Only the
update value of the current minibatch stays attached to the autograd graph,
so a freshly updated prototype ``(rho * p + q) / (rho + 1)`` carries gradient
``1 / (rho + 1)`` into ``q``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import torch

from .core import DomainId

NORM_EPS = 1e-12


@dataclass
class PrototypeBank:
    protos: torch.Tensor  # (N+1) x K x d
    counts: torch.Tensor  # (N+1) x K, int64 update-event counts

    @classmethod
    def zeros(cls, num_domains: int, num_classes: int, dim: int,
              dtype: torch.dtype = torch.float32) -> "PrototypeBank":
        return cls(torch.zeros(num_domains, num_classes, dim, dtype=dtype),
                   torch.zeros(num_domains, num_classes, dtype=torch.long))

    @property
    def num_domains(self) -> int:
        return self.protos.shape[0]

    @property
    def num_sources(self) -> int:
        return self.num_domains - 1

    @property
    def num_classes(self) -> int:
        return self.protos.shape[1]

    @property
    def active(self) -> torch.Tensor:
        return self.counts > 0

    def num_active(self) -> int:
        return int(self.active.sum())

    def detach(self) -> "PrototypeBank":
        """Copy cut from the autograd graph, as stored between steps."""
        return PrototypeBank(self.protos.detach().clone(), self.counts.clone())

    def check(self) -> None:
        if (self.counts < 0).any():
            raise ValueError("negative prototype count")
        if not torch.isfinite(self.protos).all():
            raise ValueError("non-finite prototype entry")
        if self.protos[~self.active].abs().sum() != 0:
            raise ValueError("untouched prototype is not the zero vector")

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {"protobank.protos": self.protos.detach().clone(), "protobank.counts": self.counts.clone()}

    @classmethod
    def from_state_dict(cls, state: dict[str, torch.Tensor]) -> "PrototypeBank":
        return cls(state["protobank.protos"].clone(), state["protobank.counts"].clone())


@dataclass
class BatchUpdate:
    domain: DomainId
    class_id: int
    value: torch.Tensor  # d-dim minibatch mean embedding (may carry gradient)
    occurrences: int

    def __post_init__(self) -> None:
        if self.occurrences < 1:
            raise ValueError("occurrences must be >= 1")


def compute_update_value(embeddings: torch.Tensor | Sequence[torch.Tensor], domain: DomainId,
                         class_id: int) -> BatchUpdate:
    """Mean of the embeddings of one class from one domain in a minibatch."""
    if not isinstance(embeddings, torch.Tensor):
        if len(embeddings) == 0:
            raise ValueError("no embeddings for this (domain, class); skip the update instead")
        embeddings = torch.stack(list(embeddings))
    if embeddings.shape[0] == 0:
        raise ValueError("no embeddings for this (domain, class); skip the update instead")
    return BatchUpdate(domain, class_id, embeddings.mean(dim=0), embeddings.shape[0])


def update_prototype(bank: PrototypeBank, u: BatchUpdate) -> PrototypeBank:
    """Return a new bank with entry (domain, class) moved to its streaming mean."""
    j, k = u.domain.index, u.class_id
    rho = int(bank.counts[j, k])
    protos = bank.protos.clone()
    protos[j, k] = (rho * bank.protos[j, k].detach() + u.value.to(protos.dtype)) / (rho + 1)
    counts = bank.counts.clone()
    counts[j, k] += 1
    return PrototypeBank(protos, counts)


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    nu, nv = u.norm(), v.norm()
    if nu < NORM_EPS or nv < NORM_EPS:
        return u.new_zeros(())
    return torch.dot(u, v) / (nu * nv)


def _normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    ok = norms >= NORM_EPS
    return torch.where(ok, x / torch.where(ok, norms, torch.ones_like(norms)), torch.zeros_like(x))


def num_domain_pairs(num_domains: int) -> int:
    return num_domains * (num_domains - 1) // 2


def alignment_active(bank: PrototypeBank) -> bool:
    return bool((bank.active.sum(dim=0) >= 2).any())


def alignment_score(bank: PrototypeBank) -> torch.Tensor:
    """Sum of same-class cosine similarities over ordered domain pairs ``(j, l != j)``,
    divided by ``C * K`` with ``C = (N+1) N / 2``.

    Pairs that involve a never-updated prototype are skipped; with no valid
    pair the score is 0.
    """
    active = bank.active
    if not alignment_active(bank):
        return bank.protos.new_zeros(())
    pn = _normalize(bank.protos).transpose(0, 1)  # K x D x d
    gram = pn @ pn.transpose(1, 2)  # K x D x D
    mask = (active.T[:, :, None] & active.T[:, None, :]).to(gram.dtype)
    mask = mask * (1 - torch.eye(bank.num_domains, dtype=gram.dtype))
    return (gram * mask).sum() / (num_domain_pairs(bank.num_domains) * bank.num_classes)


def global_defined(bank: PrototypeBank) -> torch.Tensor:
    """Classes whose count-weighted source mean exists (target excluded)."""
    return bank.counts[: bank.num_sources].sum(dim=0) > 0


def global_prototypes(bank: PrototypeBank) -> torch.Tensor:
    """``K x d`` count-weighted means over the source domains; zero rows where undefined."""
    rho = bank.counts[: bank.num_sources].to(bank.protos.dtype)  # N x K
    total = rho.sum(dim=0)  # K
    weighted = (rho[:, :, None] * bank.protos[: bank.num_sources]).sum(dim=0)
    safe = torch.where(total > 0, total, torch.ones_like(total))
    return weighted / safe[:, None]


def global_prototype(bank: PrototypeBank, k: int) -> torch.Tensor:
    if not bool(global_defined(bank)[k]):
        raise ValueError(f"class {k} has no updated source prototype")
    return global_prototypes(bank)[k]


def separation_active(bank: PrototypeBank) -> bool:
    return int(global_defined(bank).sum()) >= 2


def separation_score(bank: PrototypeBank) -> torch.Tensor:
    """Sum of cosine similarities between global prototypes over ordered class pairs."""
    if not separation_active(bank):
        return bank.protos.new_zeros(())
    defined = global_defined(bank)
    gn = _normalize(global_prototypes(bank)[defined])
    gram = gn @ gn.T
    return gram.sum() - gram.diagonal().sum()


@dataclass
class PrototypeLoss:
    value: torch.Tensor
    alignment: torch.Tensor
    separation: torch.Tensor
    alignment_active: bool
    separation_active: bool

    @property
    def inactive(self) -> bool:
        return not (self.alignment_active or self.separation_active)


def prototype_loss(bank: PrototypeBank, use_alignment: bool = True,
                   use_separation: bool = True) -> PrototypeLoss:
    """Separation minus alignment; either term can be switched off for ablations."""
    zero = bank.protos.new_zeros(())
    align_on = use_alignment and alignment_active(bank)
    sep_on = use_separation and separation_active(bank)
    align = alignment_score(bank) if align_on else zero
    sep = separation_score(bank) if sep_on else zero
    if not (align_on or sep_on) and (use_alignment or use_separation):
        warnings.warn("prototype loss has no active term", RuntimeWarning, stacklevel=2)
    return PrototypeLoss(sep - align, align, sep, align_on, sep_on)
