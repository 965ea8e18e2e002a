"""Causal representation discrimination: contrastive and ranking losses.

All losses take tensors shaped (..., V) or (..., V, d) with ``root`` an int or
a long tensor matching the leading dims, and return one value per leading
index (a 0-d tensor for single cases). Nothing is averaged here.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
import torch
from torch.nn import functional as F

from .errors import NonFinite, RootInAffected, UnknownRoot
from .types import CallGraphSnapshot, ServiceId

TCD_MODES = ("prose", "literal")


@dataclass
class CRDConfig:
    delta: float = 0.5
    margin_m: float = 0.2
    lambda1: float = 0.5
    lambda2: float = 0.2
    tcd_sign: str = "prose"
    affected_hops: int = 1

    def __post_init__(self):
        if self.delta <= 0 or self.margin_m <= 0:
            raise ValueError("margins must be strictly positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tcd_sign not in TCD_MODES:
            raise ValueError(f"tcd_sign must be one of {TCD_MODES}")
        if self.affected_hops < 1:
            raise ValueError("affected_hops must be >= 1")

    def to_json(self):
        return asdict(self)


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _root_index(root, lead_shape, v) -> torch.Tensor:
    if isinstance(root, ServiceId):
        root = root.index
    r = torch.as_tensor(root, dtype=torch.long)
    if (r < 0).any() or (r >= v).any():
        raise UnknownRoot(f"root {root} outside 0..{v - 1}")
    return r.expand(lead_shape) if r.dim() == 0 else r


def cosine(u, v) -> torch.Tensor:
    """Cosine similarity along the last axis; 0 when either vector is zero."""
    u, v = _t(u), _t(v)
    uu, vv = (u * u).sum(-1), (v * v).sum(-1)
    ok = (uu > 0) & (vv > 0)
    denom = torch.sqrt(torch.where(ok, uu, torch.ones_like(uu))) * torch.sqrt(
        torch.where(ok, vv, torch.ones_like(vv)))
    return torch.where(ok, (u * v).sum(-1) / denom, torch.zeros_like(uu))


def tcd_from_cosines(cos, root, delta: float, sign_mode: str = "prose") -> torch.Tensor:
    """Hinge over non-root services given per-service (anomalous, normal) cosines.

    ``prose`` penalises a root that stayed similar to its normal state:
    ``sum_{i != r} max(0, delta + c_r - c_i)``. ``literal`` uses the opposite
    sign on the cosine terms: ``sum_{i != r} max(0, delta - c_r + c_i)``.
    """
    cos = _t(cos)
    if sign_mode not in TCD_MODES:
        raise ValueError(f"sign_mode must be one of {TCD_MODES}")
    v = cos.shape[-1]
    r = _root_index(root, cos.shape[:-1], v)
    c_r = cos.gather(-1, r[..., None])
    slack = delta + c_r - cos if sign_mode == "prose" else delta - c_r + cos
    not_root = torch.ones_like(cos, dtype=torch.bool).scatter(-1, r[..., None], False)
    return (F.relu(slack) * not_root).sum(-1)


def tcd_loss(anom, norm, root, delta: float = 0.5, sign_mode: str = "prose") -> torch.Tensor:
    return tcd_from_cosines(cosine(anom, norm), root, delta, sign_mode)


def affected_set(root: ServiceId, snapshot: CallGraphSnapshot, hops: int = 1) -> set[ServiceId]:
    """Services within ``hops`` steps of ``root``, edges taken in both directions."""
    if root not in snapshot.services:
        raise UnknownRoot(f"{root} not in snapshot")
    mask = affected_mask(root.index, snapshot.edge_pairs(), len(snapshot.services), hops)
    return {snapshot.services[i] for i in np.flatnonzero(mask)}


def affected_mask(root: int, pairs: Iterable[tuple[int, int]], n_services: int, hops: int = 1) -> np.ndarray:
    if not 0 <= root < n_services:
        raise UnknownRoot(f"root {root} outside 0..{n_services - 1}")
    nbrs: list[set[int]] = [set() for _ in range(n_services)]
    for a, b in pairs:
        nbrs[a].add(b)
        nbrs[b].add(a)
    dist = {root: 0}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        if dist[u] == hops:
            continue
        for w in nbrs[u]:
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    mask = np.zeros(n_services, dtype=bool)
    for k in dist:
        mask[k] = k != root
    return mask


def _affected_tensor(affected, scores) -> torch.Tensor:
    if isinstance(affected, torch.Tensor) and affected.dtype == torch.bool:
        return affected
    if isinstance(affected, np.ndarray) and affected.dtype == bool:
        return torch.as_tensor(affected)
    mask = torch.zeros(scores.shape[-1], dtype=torch.bool)
    for a in affected:
        mask[a.index if isinstance(a, ServiceId) else int(a)] = True
    return mask


def sco_loss(scores, root, affected, m: float = 0.2) -> torch.Tensor:
    """``sum_{i in affected} max(0, m - (S_r - S_i))``; ``affected`` is a set or a bool mask."""
    scores = _t(scores)
    r = _root_index(root, scores.shape[:-1], scores.shape[-1])
    mask = _affected_tensor(affected, scores).expand_as(scores)
    if mask.gather(-1, r[..., None]).any():
        raise RootInAffected("the affected set must exclude the root")
    s_r = scores.gather(-1, r[..., None])
    return (F.relu(m - (s_r - scores)) * mask).sum(-1)


def ce_loss(logits, root) -> torch.Tensor:
    """Categorical cross-entropy of the root service under softmax over services."""
    logits = _t(logits)
    r = _root_index(root, logits.shape[:-1], logits.shape[-1])
    return -torch.log_softmax(logits, dim=-1).gather(-1, r[..., None]).squeeze(-1)


def total_loss(ce, tcd, sco, lambda1: float, lambda2: float):
    parts = [_t(x) for x in (ce, tcd, sco)]
    if not all(torch.isfinite(p).all() for p in parts):
        raise NonFinite("loss component is not finite")
    return parts[0] + lambda1 * parts[1] + lambda2 * parts[2]
