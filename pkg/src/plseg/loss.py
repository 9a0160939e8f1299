"""Combined cross-entropy + soft Dice loss over arbitrary class sets.

Both terms run over class sets that may merge base classes, so the same
code path serves full supervision, binary models, the class-adaptive
loss (sets that ignore part of the simplex) and the marginal loss (sets
that sum merged probabilities). Gradients with respect to the logits
are computed analytically through the marginalised softmax.

With S the 0/1 matrix mapping model channels onto class-set members,
p the softmax and q = S p the marginalised prediction:

    L_CE   = -1/N sum_i sum_c t_ic log q_ic
    dL/dz  =  p/N * (sum_c t_c  -  S^T (t / q))        per voxel

    L_Dice = -1/|C| sum_c (2 sum_i t q + eps) / (sum_i t + sum_i q + eps)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .labelspace import (ClassMember, ClassSet, LabelAvailability, Method,
                         class_set_for, model_members_for, one_hot)
from .volume import LabelVolume

PROB_CLAMP = 1e-12


@dataclass
class LossConfig:
    dice_epsilon: float = 1e-5

    def __post_init__(self):
        if self.dice_epsilon <= 0:
            raise ValueError("dice_epsilon must be positive")


@dataclass
class LossValue:
    total: float
    ce: float
    dice: float
    grad_logits: np.ndarray = field(repr=False)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Per-voxel softmax over the channel axis, stabilised by max-subtraction."""
    logits = np.asarray(logits)
    if np.isnan(logits).any():
        raise ValueError("logits contain NaN")
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _membership(cs: ClassSet, model_members: tuple[ClassMember, ...]) -> np.ndarray:
    """S[c, j] = 1 if model channel j belongs to class-set member c."""
    s = np.zeros((len(cs), len(model_members)))
    for c, m in enumerate(cs):
        for j, mm in enumerate(model_members):
            if mm.codes <= m.codes:
                s[c, j] = 1.0
    return s


def cross_entropy(logits: np.ndarray, targets: np.ndarray, cs: ClassSet,
                  model_members: tuple[ClassMember, ...],
                  ) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all voxels and its gradient w.r.t. logits.

    ``targets`` is the one-hot encoding of the labels over ``cs``; for
    voxels not covered by ``cs`` the target vector is all-zero and the
    voxel contributes no term.
    """
    logits = np.asarray(logits, dtype=np.float64)
    p = softmax_probs(logits)
    s = _membership(cs, model_members)
    nvox = int(np.prod(logits.shape[1:]))

    pf = p.reshape(p.shape[0], -1)
    tf = targets.reshape(targets.shape[0], -1)
    q = np.maximum(s @ pf, PROB_CLAMP)
    value = float(-(tf * np.log(q)).sum() / nvox)

    t_tot = tf.sum(axis=0)
    grad = pf * (t_tot - s.T @ (tf / q)) / nvox
    return value, grad.reshape(logits.shape)


def dice_loss(logits: np.ndarray, targets: np.ndarray, cs: ClassSet,
              model_members: tuple[ClassMember, ...],
              cfg: LossConfig | None = None) -> tuple[float, np.ndarray]:
    """Negated soft Dice averaged over the class set, with gradient.

    The epsilon smoothing (absent from the plain Dice definition) is
    added to numerator and denominator so empty classes score -1
    instead of being undefined.
    """
    cfg = cfg or LossConfig()
    eps = cfg.dice_epsilon
    logits = np.asarray(logits, dtype=np.float64)
    p = softmax_probs(logits)
    s = _membership(cs, model_members)

    pf = p.reshape(p.shape[0], -1)
    tf = targets.reshape(targets.shape[0], -1)
    q = s @ pf

    inter = (tf * q).sum(axis=1)
    sizes = tf.sum(axis=1) + q.sum(axis=1)
    per_class = (2.0 * inter + eps) / (sizes + eps)
    value = float(-per_class.mean())

    # dL/dq, then chain through q = S p and the softmax.
    k = len(cs)
    gq = -(2.0 * tf * (sizes + eps)[:, None] - (2.0 * inter + eps)[:, None]) \
        / (k * (sizes + eps)[:, None] ** 2)
    grad = pf * (s.T @ gq - (gq * q).sum(axis=0))
    return value, grad.reshape(logits.shape)


def combined_loss(logits: np.ndarray, y: LabelVolume | np.ndarray,
                  availability: LabelAvailability, method: Method,
                  cfg: LossConfig | None = None) -> LossValue:
    """Equally weighted sum of cross-entropy and Dice for one sample.

    Class sets follow the per-sample case analysis of the supervision
    method. For dual-head training on fully labelled samples the caller
    evaluates this once per head and averages the two results.
    """
    cs_ce, cs_dice = class_set_for(availability, method)
    members = model_members_for(method, availability)
    if logits.shape[0] != len(members):
        raise ValueError(
            f"{method} expects {len(members)} channels, got {logits.shape[0]}")
    codes = y.codes if isinstance(y, LabelVolume) else np.asarray(y)

    ce, g_ce = cross_entropy(logits, one_hot(codes, cs_ce), cs_ce, members)
    dv, g_d = dice_loss(logits, one_hot(codes, cs_dice), cs_dice, members, cfg)
    return LossValue(total=ce + dv, ce=ce, dice=dv, grad_logits=g_ce + g_d)
