"""Class-set algebra and label transforms for partial supervision.

The label space is {BG, WMH, ISL}. Supervision methods work on class
sets that may contain merged pseudo-classes (NOT_WMH, NOT_ISL, NOT_BG),
each standing for the union of the base classes it merges. Cross-entropy
and Dice class sets are derived per sample from which labels exist.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .volume import BG, ISL, WMH, LabelVolume


class ClassMember(enum.IntEnum):
    """Plain and merged class-set members, in canonical channel order."""

    BG = 0
    WMH = 1
    ISL = 2
    NOT_WMH = 3
    NOT_ISL = 4
    NOT_BG = 5

    @property
    def codes(self) -> frozenset[int]:
        """Base label codes this member represents."""
        return _MEMBER_CODES[self]


_MEMBER_CODES = {
    ClassMember.BG: frozenset({BG}),
    ClassMember.WMH: frozenset({WMH}),
    ClassMember.ISL: frozenset({ISL}),
    ClassMember.NOT_WMH: frozenset({BG, ISL}),
    ClassMember.NOT_ISL: frozenset({BG, WMH}),
    ClassMember.NOT_BG: frozenset({WMH, ISL}),
}


class ClassSet:
    """Ordered, duplicate-free set of class members.

    Members are kept in canonical order (BG < WMH < ISL < merged) so
    channel indices are stable everywhere. Merged members may not
    co-occur with any class they merge.
    """

    def __init__(self, members):
        members = tuple(ClassMember(m) for m in members)
        if not members:
            raise ValueError("class set must be non-empty")
        if len(set(members)) != len(members):
            raise ValueError(f"duplicate members in {members}")
        for i, a in enumerate(members):
            for b in members[i + 1:]:
                if a.codes & b.codes:
                    raise ValueError(f"{a.name} and {b.name} overlap")
        self.members = tuple(sorted(members))

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __eq__(self, other):
        return isinstance(other, ClassSet) and self.members == other.members

    def __hash__(self):
        return hash(self.members)

    def __repr__(self):
        return "{" + ", ".join(m.name for m in self.members) + "}"

    def index(self, member: ClassMember) -> int:
        return self.members.index(member)

    @property
    def covered_codes(self) -> frozenset[int]:
        out: frozenset[int] = frozenset()
        for m in self.members:
            out = out | m.codes
        return out

    def partitions_label_space(self) -> bool:
        return self.covered_codes == frozenset({BG, WMH, ISL})

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.members)


class Method(str, enum.Enum):
    """Supervision methods, including the internal per-phase variants."""

    MULTICLASS = "multiclass"
    BINARY_WMH = "binary_wmh"
    BINARY_ISL = "binary_isl"
    CLASS_CONDITIONAL = "class_conditional"
    PSEUDOLABELS = "pseudolabels"
    PHASED_STAGE1 = "phased_stage1"
    PHASED_STAGE2 = "phased_stage2"
    CLASS_ADAPTIVE = "class_adaptive"
    MARGINAL = "marginal"


@dataclass(frozen=True)
class LabelAvailability:
    """Which ground-truth classes exist for a training sample."""

    has_wmh: bool
    has_isl: bool

    @property
    def fully_labelled(self) -> bool:
        return self.has_wmh and self.has_isl


def one_hot(y: LabelVolume | np.ndarray, cs: ClassSet) -> np.ndarray:
    """Per-voxel target vectors over a class set, shape (|cs|, X, Y, Z).

    Plain members are indicators of their code; merged members indicate
    membership of any merged code. Class sets that contain a background
    representative assert coverage of every code present and raise if a
    present code has no channel; foreground-only sets (Dice sets,
    class-adaptive CE sets) leave uncovered voxels all-zero.
    """
    codes = y.codes if isinstance(y, LabelVolume) else np.asarray(y)
    covered = cs.covered_codes
    if BG in covered:
        present = set(np.unique(codes).tolist())
        if not present <= covered:
            missing = sorted(present - covered)
            raise ValueError(
                f"class set {cs} does not cover codes {missing} present in labels")
    out = np.zeros((len(cs),) + codes.shape, dtype=np.float64)
    for k, m in enumerate(cs):
        out[k] = np.isin(codes, tuple(m.codes))
    return out


def marginalize_probs(probs: np.ndarray, cs: ClassSet,
                      model_members: tuple[ClassMember, ...] = (
                          ClassMember.BG, ClassMember.WMH, ClassMember.ISL),
                      strict: bool = True) -> np.ndarray:
    """Sum probability channels onto a class set.

    Each output channel is the summed probability of the model channels
    whose codes it merges; plain members are copied. With ``strict``
    every model channel must land in exactly one output member, so total
    mass is preserved voxel-wise; non-strict projection drops orphan
    channels (used for loss sets like {WMH} that deliberately ignore the
    rest of the simplex).
    """
    probs = np.asarray(probs)
    if probs.shape[0] != len(model_members):
        raise ValueError("channel count does not match model members")
    out = np.zeros((len(cs),) + probs.shape[1:], dtype=probs.dtype)
    assigned = [False] * len(model_members)
    for k, m in enumerate(cs):
        for j, mm in enumerate(model_members):
            if mm.codes <= m.codes:
                out[k] += probs[j]
                assigned[j] = True
    if strict and not all(assigned):
        orphans = [model_members[j].name for j, a in enumerate(assigned) if not a]
        raise ValueError(f"model channels {orphans} not covered by {cs}")
    return out


# (C_CE, C_Dice) case analysis per method and per-sample label availability.
_FULL = (ClassMember.BG, ClassMember.WMH, ClassMember.ISL)


def class_set_for(sample: LabelAvailability, method: Method) -> tuple[ClassSet, ClassSet]:
    """Cross-entropy and Dice class sets for one training sample."""
    method = Method(method)
    M = ClassMember
    if method in (Method.MULTICLASS, Method.PSEUDOLABELS, Method.PHASED_STAGE2):
        if not sample.fully_labelled:
            raise ValueError(f"{method.value} requires fully labelled samples")
        return ClassSet(_FULL), ClassSet((M.WMH, M.ISL))
    if method == Method.BINARY_WMH:
        if not sample.has_wmh:
            raise ValueError("WMH label unavailable for binary WMH training")
        return ClassSet((M.BG, M.WMH)), ClassSet((M.WMH,))
    if method == Method.BINARY_ISL:
        if not sample.has_isl:
            raise ValueError("ISL label unavailable for binary ISL training")
        return ClassSet((M.BG, M.ISL)), ClassSet((M.ISL,))
    if method == Method.CLASS_CONDITIONAL:
        # One head at a time; fully labelled samples are handled by the
        # caller running both heads and averaging the losses.
        if sample.has_wmh and sample.has_isl:
            raise ValueError("class-conditional sets are per head; "
                             "query each head's availability separately")
        if sample.has_wmh:
            return ClassSet((M.BG, M.WMH)), ClassSet((M.WMH,))
        if sample.has_isl:
            return ClassSet((M.BG, M.ISL)), ClassSet((M.ISL,))
        raise ValueError("no labels available")
    if method == Method.PHASED_STAGE1:
        return ClassSet((M.BG, M.NOT_BG)), ClassSet((M.NOT_BG,))
    if method == Method.CLASS_ADAPTIVE:
        if sample.fully_labelled:
            return ClassSet(_FULL), ClassSet((M.WMH, M.ISL))
        if sample.has_wmh:
            return ClassSet((M.WMH,)), ClassSet((M.WMH,))
        if sample.has_isl:
            return ClassSet((M.ISL,)), ClassSet((M.ISL,))
        raise ValueError("no labels available")
    if method == Method.MARGINAL:
        # Dice runs over the same sets as cross-entropy, background included.
        if sample.fully_labelled:
            cs = ClassSet(_FULL)
            return cs, cs
        if sample.has_wmh:
            cs = ClassSet((M.NOT_WMH, M.WMH))
            return cs, cs
        if sample.has_isl:
            cs = ClassSet((M.NOT_ISL, M.ISL))
            return cs, cs
        raise ValueError("no labels available")
    raise ValueError(f"unknown method {method!r}")


def model_members_for(method: Method,
                      sample: LabelAvailability | None = None,
                      ) -> tuple[ClassMember, ...]:
    """Class meaning of the model's output channels under a method."""
    method = Method(method)
    if method == Method.BINARY_WMH:
        return (ClassMember.BG, ClassMember.WMH)
    if method == Method.BINARY_ISL:
        return (ClassMember.BG, ClassMember.ISL)
    if method == Method.PHASED_STAGE1:
        return (ClassMember.BG, ClassMember.NOT_BG)
    if method == Method.CLASS_CONDITIONAL:
        # Each head is a two-channel softmax over {BG, its class}.
        if sample is None or sample.fully_labelled or not (sample.has_wmh or sample.has_isl):
            raise ValueError("class-conditional channels are per head; "
                             "pass a single-class availability")
        return (ClassMember.BG,
                ClassMember.WMH if sample.has_wmh else ClassMember.ISL)
    return _FULL


def merge_foreground(y: LabelVolume) -> LabelVolume:
    """Collapse all foreground codes into one (0=BG, 1=foreground)."""
    return LabelVolume((y.codes > 0).astype(np.uint8), y.spacing)


def compose_pseudolabel(gt: LabelVolume, avail: LabelAvailability,
                        teacher: LabelVolume) -> LabelVolume:
    """Fill missing classes from a teacher prediction.

    The ground truth is authoritative for its available classes, both
    positively (its voxels keep their class) and negatively (where it
    says not-c, a teacher vote for c becomes background). Everywhere
    else the teacher's code is used. Fully labelled samples pass through
    unchanged.
    """
    if avail.fully_labelled:
        return LabelVolume(gt.codes.copy(), gt.spacing)
    if not (avail.has_wmh or avail.has_isl):
        raise ValueError("cannot compose pseudolabels without any ground truth")
    out = teacher.codes.copy()
    for code, available in ((WMH, avail.has_wmh), (ISL, avail.has_isl)):
        if not available:
            continue
        gt_pos = gt.codes == code
        out[(~gt_pos) & (teacher.codes == code)] = BG
        out[gt_pos] = code
    return LabelVolume(out, gt.spacing)
