"""Reference voxel classifier, SGD trainer, checkpointing, ensembling.

The classifier is deliberately small: a trunk of 3x3x3 convolutions with
leaky-rectifier activations and one or more 1x1x1 heads producing
per-voxel class logits. Heads share the trunk, so the dual-head variant
used by class-conditional training and the head swap of phased training
are both parameter-dict operations.

Training is plain SGD with Nesterov momentum and polynomial learning
rate decay, fully deterministic for a given seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .labelspace import LabelAvailability, Method, model_members_for
from .loss import LossConfig, LossValue, combined_loss, softmax_probs
from .sampling import AugmentationConfig, SamplerConfig, augment, sample_patch
from .volume import ISL, WMH, LabelVolume, SampleRecord, combine_labels, \
    read_label_volume, read_volume

LEAKY_SLOPE = 0.01


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

class VoxelClassifier:
    """Small 3D convnet mapping an image patch to per-voxel class logits."""

    def __init__(self, heads: dict[str, int] | int, in_channels: int = 1,
                 width: int = 8, n_hidden: int = 2, seed: int = 0,
                 dtype=np.float32):
        if isinstance(heads, int):
            heads = {"out": heads}
        self.heads = dict(heads)
        self.in_channels = in_channels
        self.width = width
        self.n_hidden = n_hidden
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self._cache = None
        rng = np.random.default_rng([seed, 0])
        prev = in_channels
        for i in range(n_hidden):
            self.params[f"conv{i}.w"] = self._he(rng, (width, prev, 3, 3, 3))
            self.params[f"conv{i}.b"] = np.zeros(width, dtype=self.dtype)
            prev = width
        for name in sorted(self.heads):
            self._init_head(name, self.heads[name], rng)

    def _he(self, rng, shape):
        fan_in = int(np.prod(shape[1:]))
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        return w.astype(self.dtype)

    def _init_head(self, name, n_out, rng):
        w = rng.standard_normal((n_out, self.width)) / np.sqrt(self.width)
        self.params[f"head.{name}.w"] = w.astype(self.dtype)
        self.params[f"head.{name}.b"] = np.zeros(n_out, dtype=self.dtype)

    @property
    def arch(self) -> dict:
        return {"heads": dict(self.heads), "in_channels": self.in_channels,
                "width": self.width, "n_hidden": self.n_hidden,
                "dtype": self.dtype.name}

    def forward(self, x: np.ndarray, heads: tuple[str, ...] | None = None,
                ) -> dict[str, np.ndarray]:
        """Per-head logits for one patch; activations are cached for backward."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.shape[0] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, "
                             f"got {x.shape[0]}")
        if not np.isfinite(x).all():
            raise ValueError("non-finite values in input patch")
        heads = tuple(heads) if heads is not None else tuple(sorted(self.heads))
        acts = [x]
        pre = []
        a = x
        for i in range(self.n_hidden):
            z = kernels.conv3x3_forward(a, self.params[f"conv{i}.w"],
                                        self.params[f"conv{i}.b"])
            a = np.where(z > 0, z, LEAKY_SLOPE * z)
            pre.append(z)
            acts.append(a)
        out = {}
        for name in heads:
            w = self.params[f"head.{name}.w"]
            b = self.params[f"head.{name}.b"]
            out[name] = np.tensordot(w, a, axes=([1], [0])) + b[:, None, None, None]
        self._cache = (acts, pre)
        return out

    def backward(self, grad_logits: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Parameter gradients for the last forward pass.

        ``grad_logits`` maps head names to upstream gradients; heads
        absent from the dict receive zero gradients.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts, pre = self._cache
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        a_last = acts[-1]
        g_a = np.zeros_like(a_last)
        for name, gy in grad_logits.items():
            gy = np.asarray(gy, dtype=self.dtype)
            w = self.params[f"head.{name}.w"]
            grads[f"head.{name}.w"] = np.tensordot(gy, a_last,
                                                   axes=([1, 2, 3], [1, 2, 3]))
            grads[f"head.{name}.b"] = gy.sum(axis=(1, 2, 3))
            g_a += np.tensordot(w.T, gy, axes=([1], [0]))
        for i in range(self.n_hidden - 1, -1, -1):
            g_z = g_a * np.where(pre[i] > 0, 1.0, LEAKY_SLOPE).astype(self.dtype)
            gw, gb = kernels.conv3x3_param_grad(acts[i], g_z)
            grads[f"conv{i}.w"] = gw
            grads[f"conv{i}.b"] = gb
            if i > 0:
                g_a = kernels.conv3x3_input_grad(g_z, self.params[f"conv{i}.w"])
        return grads

    def replace_head(self, name: str, n_out: int, seed: int) -> None:
        """Swap one head for a freshly initialised one; trunk is untouched."""
        for key in list(self.params):
            if key.startswith(f"head.{name}."):
                del self.params[key]
        self.heads[name] = n_out
        self._init_head(name, n_out, np.random.default_rng([seed, 1]))
        self._cache = None

    def clone(self) -> "VoxelClassifier":
        m = copy.copy(self)
        m.params = {k: v.copy() for k, v in self.params.items()}
        m._cache = None
        return m

    def param_digest(self, trunk_only: bool = False) -> str:
        h = hashlib.sha256()
        for key in sorted(self.params):
            if trunk_only and key.startswith("head."):
                continue
            h.update(key.encode())
            h.update(self.params[key].tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass
class TrainerConfig:
    epochs: int = 50
    steps_per_epoch: int = 10
    batch_size: int = 2
    lr0: float = 0.01
    momentum: float = 0.99
    lr_power: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr0 < 0 or not (0 <= self.momentum < 1) or self.epochs <= 0:
            raise ValueError("invalid trainer configuration")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("epochs", "steps_per_epoch", "batch_size", "lr0",
                 "momentum", "lr_power", "seed")}


def poly_lr(epoch: int, cfg: TrainerConfig) -> float:
    """Polynomial decay: lr0 * (1 - epoch/epochs) ** power."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr0 * (1.0 - epoch / cfg.epochs) ** cfg.lr_power


def sgd_step(params: dict, grads: dict, velocity: dict,
             lr: float, momentum: float) -> None:
    """In-place Nesterov update: v <- mu*v - lr*g; p <- p + mu*v - lr*g."""
    for key, p in params.items():
        g = grads[key]
        v = velocity[key]
        v *= momentum
        v -= lr * g
        p += momentum * v - lr * g


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------

@dataclass
class LoadedSample:
    """One subject's arrays, loaded once and shared read-only."""

    id: str
    image: np.ndarray
    spacing: tuple[float, float, float]
    wmh: np.ndarray | None = None
    isl: np.ndarray | None = None
    brain: np.ndarray | None = None

    @property
    def availability(self) -> LabelAvailability:
        return LabelAvailability(self.wmh is not None, self.isl is not None)

    def combined_codes(self) -> np.ndarray:
        """Multiclass codes from the available per-class masks."""
        wmh = LabelVolume((self.wmh > 0).astype(np.uint8), self.spacing) \
            if self.wmh is not None else None
        isl = LabelVolume((self.isl > 0).astype(np.uint8) * ISL, self.spacing) \
            if self.isl is not None else None
        return combine_labels(wmh, isl, shape=self.image.shape,
                              spacing=self.spacing).codes


def load_sample(record: SampleRecord, with_brain: bool = False) -> LoadedSample:
    img = read_volume(record.image)
    out = LoadedSample(id=record.id, image=img.data.astype(np.float32),
                       spacing=img.spacing)
    if record.has_wmh:
        out.wmh = read_label_volume(record.wmh_label).codes
    if record.has_isl:
        out.isl = read_label_volume(record.isl_label).codes
    if with_brain:
        out.brain = read_label_volume(record.brain_mask).codes
    return out


def _codes_for_method(s: LoadedSample, method: Method) -> np.ndarray:
    if method == Method.BINARY_WMH:
        return (s.wmh > 0).astype(np.uint8)
    if method == Method.BINARY_ISL:
        return (s.isl > 0).astype(np.uint8) * ISL
    codes = s.combined_codes()
    if method == Method.PHASED_STAGE1:
        return (codes > 0).astype(np.uint8)
    return codes


def _centre_classes(s: LoadedSample, method: Method) -> tuple[int, ...]:
    avail = s.availability
    if method == Method.BINARY_WMH:
        return (WMH,)
    if method == Method.BINARY_ISL:
        return (ISL,)
    if method == Method.PHASED_STAGE1:
        return (1,)  # merged foreground code
    if method in (Method.MULTICLASS, Method.PSEUDOLABELS, Method.PHASED_STAGE2):
        return (WMH, ISL)
    # availability-driven methods train the classes the sample has
    out = []
    if avail.has_wmh:
        out.append(WMH)
    if avail.has_isl:
        out.append(ISL)
    return tuple(out)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    epoch: int
    val_dsc: float
    arch: dict
    method: str
    config: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]


def _dsc_or_none(pred: np.ndarray, gt: np.ndarray) -> float | None:
    n_gt = int(np.count_nonzero(gt))
    if n_gt == 0:
        return None
    n_pred = int(np.count_nonzero(pred))
    inter = int(np.count_nonzero(pred & gt))
    return 2.0 * inter / (n_pred + n_gt)


def validation_dsc(model: VoxelClassifier, val: list[LoadedSample],
                   method: Method) -> float:
    """Mean argmax-decision DSC over the classes the method trains."""
    scores = []
    for s in val:
        if method == Method.CLASS_CONDITIONAL:
            logits = model.forward(s.image)
            for head, code, gt in (("wmh", 1, s.wmh), ("isl", 1, s.isl)):
                if gt is None:
                    continue
                pred = np.argmax(logits[head], axis=0) == code
                d = _dsc_or_none(pred, gt > 0)
                if d is not None:
                    scores.append(d)
            continue
        logits = model.forward(s.image)["out"]
        pred = np.argmax(logits, axis=0)
        if method == Method.BINARY_WMH:
            pairs = [(1, s.wmh)]
        elif method == Method.BINARY_ISL:
            pairs = [(1, s.isl)]
        elif method == Method.PHASED_STAGE1:
            merged = (s.combined_codes() > 0).astype(np.uint8)
            pairs = [(1, merged)]
        else:
            pairs = [(WMH, s.wmh), (ISL, s.isl)]
        for code, gt in pairs:
            if gt is None:
                continue
            d = _dsc_or_none(pred == code, gt > 0)
            if d is not None:
                scores.append(d)
    return float(np.mean(scores)) if scores else 0.0


def train(model: VoxelClassifier, train_samples: list[LoadedSample],
          val_samples: list[LoadedSample], method: Method, cfg: TrainerConfig,
          sampler_cfg: SamplerConfig, aug_cfg: AugmentationConfig,
          loss_cfg: LossConfig | None = None) -> TrainResult:
    """SGD training loop keeping the checkpoint with the best validation DSC.

    Deterministic given (seed, config, data): sampling, augmentation and
    updates all derive from one seeded generator.
    """
    if not train_samples:
        raise ValueError("training subset is empty")
    method = Method(method)
    rng = np.random.default_rng([cfg.seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    best: Checkpoint | None = None
    history = []

    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg)
        epoch_losses = []
        for _ in range(cfg.steps_per_epoch):
            acc = {k: np.zeros(v.shape, dtype=np.float64)
                   for k, v in model.params.items()}
            for _ in range(cfg.batch_size):
                idx = int(rng.integers(len(train_samples)))
                s = train_samples[idx]
                codes = _codes_for_method(s, method)
                scfg = replace(sampler_cfg,
                               centre_classes=_centre_classes(s, method))
                patch, patch_y = sample_patch(s.image, codes, scfg, rng)
                patch, patch_y = augment(patch, patch_y, aug_cfg, rng)
                loss_val = _sample_loss(model, patch, patch_y, s.availability,
                                        method, loss_cfg)
                if not np.isfinite(loss_val):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} (method {method.value})")
                epoch_losses.append(loss_val)
                grads = model.backward(_LAST_GRADS)
                for k in acc:
                    acc[k] += grads[k]
            mean_grads = {k: (v / cfg.batch_size).astype(model.dtype)
                          for k, v in acc.items()}
            sgd_step(model.params, mean_grads, velocity, lr, cfg.momentum)
        val_dsc = validation_dsc(model, val_samples, method)
        history.append({"epoch": epoch, "lr": lr,
                        "train_loss": float(np.mean(epoch_losses)),
                        "val_dsc": val_dsc})
        if best is None or val_dsc > best.val_dsc:
            best = Checkpoint(params={k: v.copy() for k, v in model.params.items()},
                              epoch=epoch, val_dsc=val_dsc, arch=model.arch,
                              method=method.value, config=cfg.to_dict())
    return TrainResult(checkpoint=best, history=history)


_LAST_GRADS: dict[str, np.ndarray] = {}


def _sample_loss(model: VoxelClassifier, patch: np.ndarray, patch_y: np.ndarray,
                 avail: LabelAvailability, method: Method,
                 loss_cfg: LossConfig | None) -> float:
    """Loss for one patch; leaves per-head logit gradients in _LAST_GRADS."""
    global _LAST_GRADS
    if method == Method.CLASS_CONDITIONAL:
        heads = []
        if avail.has_wmh:
            heads.append(("wmh", LabelAvailability(True, False),
                          (patch_y == WMH).astype(np.uint8)))
        if avail.has_isl:
            heads.append(("isl", LabelAvailability(False, True),
                          (patch_y == ISL).astype(np.uint8) * ISL))
        logits = model.forward(patch, heads=tuple(h for h, _, _ in heads))
        total = 0.0
        _LAST_GRADS = {}
        for name, head_avail, y_head in heads:
            lv = combined_loss(logits[name], y_head, head_avail, method, loss_cfg)
            total += lv.total / len(heads)
            _LAST_GRADS[name] = lv.grad_logits / len(heads)
        return total
    logits = model.forward(patch, heads=("out",))["out"]
    lv = combined_loss(logits, patch_y, avail, method, loss_cfg)
    _LAST_GRADS = {"out": lv.grad_logits}
    return lv.total


# ---------------------------------------------------------------------------
# Checkpoint I/O and ensembling
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(ck: Checkpoint, path) -> None:
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, "epoch": ck.epoch,
            "val_dsc": ck.val_dsc, "arch": ck.arch, "method": ck.method,
            "config": ck.config, "digest": _params_digest(ck.params)}
    arrays = {f"param/{k}": v for k, v in ck.params.items()}
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["meta"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        params = {k[len("param/"):]: blob[k] for k in blob.files
                  if k.startswith("param/")}
    if _params_digest(params) != meta["digest"]:
        raise ValueError(f"checkpoint {path} failed its digest check")
    return Checkpoint(params=params, epoch=meta["epoch"], val_dsc=meta["val_dsc"],
                      arch=meta["arch"], method=meta["method"],
                      config=meta.get("config", {}))


def _params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for key in sorted(params):
        h.update(key.encode())
        h.update(np.ascontiguousarray(params[key]).tobytes())
    return h.hexdigest()


def model_from_checkpoint(ck: Checkpoint) -> VoxelClassifier:
    m = VoxelClassifier(heads=ck.arch["heads"], in_channels=ck.arch["in_channels"],
                        width=ck.arch["width"], n_hidden=ck.arch["n_hidden"],
                        dtype=np.dtype(ck.arch["dtype"]))
    if set(m.params) != set(ck.params):
        raise ValueError("checkpoint parameters do not match architecture")
    m.params = {k: np.asarray(v, dtype=m.dtype).copy() for k, v in ck.params.items()}
    return m


def ensemble_predict(models: list[VoxelClassifier], x: np.ndarray,
                     head: str = "out") -> np.ndarray:
    """Arithmetic mean of the per-model softmax probabilities."""
    if not models:
        raise ValueError("empty model list")
    acc = None
    for m in models:
        p = softmax_probs(np.asarray(m.forward(x, heads=(head,))[head],
                                     dtype=np.float64))
        acc = p if acc is None else acc + p
    return acc / len(models)
