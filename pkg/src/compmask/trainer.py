"""Masked-consistency self-training loop for domain-adaptive segmentation.

One step: the EMA teacher pseudo-labels the unmasked target batch; the
student sees the labeled source batch plus two masked target views
(a complementary pair, or two independent random masks, or nothing for
the source-only baseline); the total loss

    total = sup + cl + lambda_cm * cm

combines source cross entropy, pseudo-label cross entropy on both views,
and the squared distance between the two view predictions. The student
takes one Adam step, the teacher one EMA step.

The fixed architecture is three 3x3 conv layers (8 -> 16 -> 16 channels,
rectified, same padding) plus a 1x1 class head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import datagen, masks as mk, metrics
from .autograd import Adam, Graph, Param, _conv2d_same, softmax
from .seeds import child_int, child_rng

VARIANTS = ("source_only", "random_mask", "complementary")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "complementary"
    # 0.6 leaves enough doubly-hidden area for independent mask pairs that
    # the coverage guarantee of complementary pairs shows up in the metrics,
    # without the heavy collapses independent pairs suffer at higher ratios.
    mask_ratio: float = 0.6
    patch: int | None = None  # default: input size / 16
    lambda_cm: float = 0.01
    lam: float = 0.5  # weight between the two masked views in the cl loss
    threshold: float = 0.7  # pseudo-label confidence cutoff
    # Averaging horizon ~100 steps; longer horizons leave the teacher too
    # uncertain to emit confident pseudo-labels within a 2k-step run.
    ema_decay: float = 0.99
    lr: float = 2e-3
    iterations: int = 2000
    batch_size: int = 2
    adain_align: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask ratio must lie in (0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch size must be positive")


@dataclass
class ModelPair:
    student: dict[str, Param]
    teacher: dict[str, Param]

    def __post_init__(self):
        if set(self.student) != set(self.teacher):
            raise ValueError("student and teacher must share parameter names")
        for name in self.student:
            if self.student[name].value.shape != self.teacher[name].value.shape:
                raise ValueError(f"shape mismatch for parameter '{name}'")


@dataclass(frozen=True)
class PseudoLabel:
    classes: np.ndarray  # (N, H, W) int
    keep: np.ndarray     # (N, H, W) in {0, 1}


_CHANNELS = (8, 16, 16)


def init_params(num_classes: int, seed: int, in_channels: int = 1) -> dict[str, Param]:
    rng = child_rng(seed, 0)
    shapes = {
        "k1": (_CHANNELS[0], in_channels, 3, 3), "b1": (_CHANNELS[0],),
        "k2": (_CHANNELS[1], _CHANNELS[0], 3, 3), "b2": (_CHANNELS[1],),
        "k3": (_CHANNELS[2], _CHANNELS[1], 3, 3), "b3": (_CHANNELS[2],),
        "kh": (num_classes, _CHANNELS[2], 1, 1), "bh": (num_classes,),
    }
    params = {}
    for name, shape in shapes.items():
        if name.startswith("b"):
            params[name] = Param(name, np.zeros(shape))
        elif name == "kh":
            # Near-zero head: initial class probabilities sit close to
            # uniform, so confidence-thresholded pseudo-labels stay empty
            # until the teacher has absorbed real training signal, while the
            # small noise still breaks the symmetry between classes.
            params[name] = Param(name, rng.normal(0.0, 0.01, shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = Param(name, rng.normal(0.0, math.sqrt(2.0 / fan_in), shape))
    return params


def copy_params(params: dict[str, Param]) -> dict[str, Param]:
    return {name: Param(name, p.value.copy()) for name, p in params.items()}


def init_pair(num_classes: int, seed: int) -> ModelPair:
    # teacher starts as an exact copy of the student
    student = init_params(num_classes, seed)
    return ModelPair(student, copy_params(student))


def _check_dims(image: np.ndarray):
    if image.ndim != 4:
        raise ValueError(f"expected NCHW image batch, got shape {image.shape}")
    if image.shape[2] % 16 != 0 or image.shape[3] % 16 != 0:
        raise ValueError(f"spatial dims must be divisible by 16, got {image.shape[2:]}")


def _forward_logits(g: Graph, params: dict[str, Param], x, align=None):
    h = g.relu(g.bias_add(g.conv2d(x, g.param(params["k1"])), g.param(params["b1"])))
    if align is not None:
        h = g.channel_affine(h, *align)
    h = g.relu(g.bias_add(g.conv2d(h, g.param(params["k2"])), g.param(params["b2"])))
    h = g.relu(g.bias_add(g.conv2d(h, g.param(params["k3"])), g.param(params["b3"])))
    return g.bias_add(g.conv2d(h, g.param(params["kh"])), g.param(params["bh"]))


def _infer_logits(params: dict[str, Param], images: np.ndarray) -> np.ndarray:
    """Graph-free forward pass for teacher predictions and evaluation."""
    def layer(x, k, b):
        return _conv2d_same(x, params[k].value) + params[b].value[None, :, None, None]

    h = np.maximum(layer(images, "k1", "b1"), 0.0)
    h = np.maximum(layer(h, "k2", "b2"), 0.0)
    h = np.maximum(layer(h, "k3", "b3"), 0.0)
    return layer(h, "kh", "bh")


def forward_segment(params: dict[str, Param], images: np.ndarray) -> np.ndarray:
    """Per-pixel class probabilities, (N, C, H, W)."""
    images = np.asarray(images, dtype=np.float64)
    _check_dims(images)
    return softmax(_infer_logits(params, images))


def first_layer_features(params: dict[str, Param], images: np.ndarray) -> np.ndarray:
    h = _conv2d_same(np.asarray(images, dtype=np.float64), params["k1"].value)
    return np.maximum(h + params["b1"].value[None, :, None, None], 0.0)


def pseudo_label(teacher: dict[str, Param], images: np.ndarray,
                 threshold: float) -> PseudoLabel:
    """Teacher argmax on the unmasked images, kept where confidence >= threshold.

    Ties break toward the lowest class index.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    probs = forward_segment(teacher, images)
    classes = probs.argmax(axis=1)
    keep = (probs.max(axis=1) >= threshold).astype(np.float64)
    return PseudoLabel(classes, keep)


def adain_coeffs(source_feats: np.ndarray, target_feats: np.ndarray):
    """Per-channel (scale, shift) mapping source statistics onto target's.

    Channels with zero source variance pass through unchanged.
    """
    axes = (0, 2, 3)
    mu_s = source_feats.mean(axis=axes)
    sd_s = source_feats.std(axis=axes)
    mu_t = target_feats.mean(axis=axes)
    sd_t = target_feats.std(axis=axes)
    scale = np.ones_like(mu_s)
    shift = np.zeros_like(mu_s)
    ok = sd_s > 0
    scale[ok] = sd_t[ok] / sd_s[ok]
    shift[ok] = mu_t[ok] - mu_s[ok] * scale[ok]
    return scale, shift


def adain_align(source_feats: np.ndarray, target_feats: np.ndarray) -> np.ndarray:
    scale, shift = adain_coeffs(source_feats, target_feats)
    return source_feats * scale[None, :, None, None] + shift[None, :, None, None]


def ema_update(pair: ModelPair, alpha: float) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, element-wise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("EMA decay must lie in [0, 1]")
    for name, sp in pair.student.items():
        tp = pair.teacher[name]
        tp.value = alpha * tp.value + (1.0 - alpha) * sp.value


def sample_view_masks(config: TrainConfig, size: int, count: int,
                      step_index: int) -> list[mk.MaskedPair]:
    """One mask pair per batch element for the configured variant."""
    patch = config.patch if config.patch is not None else size // 16
    mcfg = mk.MaskConfig((size, size), patch, config.mask_ratio)
    kind = "complementary" if config.variant == "complementary" else "random"
    return [mk.sample_pair(mcfg, kind, child_int(config.seed, 7, step_index, i))
            for i in range(count)]


class Trainer:
    """Owns the model pair and optimizer state across steps."""

    def __init__(self, config: TrainConfig, num_classes: int):
        self.config = config
        self.num_classes = num_classes
        self.pair = init_pair(num_classes, config.seed)
        self.optimizer = Adam(list(self.pair.student.values()), lr=config.lr)

    def train_step(self, source_images: np.ndarray, source_labels: np.ndarray,
                   target_images: np.ndarray, step_index: int) -> dict[str, float]:
        cfg = self.config
        source_images = np.asarray(source_images, dtype=np.float64)
        target_images = np.asarray(target_images, dtype=np.float64)
        if source_images.shape[0] == 0 or target_images.shape[0] == 0:
            raise ValueError("batches must be non-empty")
        _check_dims(source_images)

        g = Graph()
        align = None
        if cfg.adain_align:
            align = adain_coeffs(
                first_layer_features(self.pair.student, source_images),
                first_layer_features(self.pair.student, target_images))

        if cfg.variant == "source_only":
            sup = g.softmax_cross_entropy(
                _forward_logits(g, self.pair.student, g.leaf(source_images), align),
                source_labels)
            total = sup
            losses = {"sup": float(sup.value), "cl": 0.0, "cm": 0.0}
        else:
            _check_dims(target_images)
            pseudo = pseudo_label(self.pair.teacher, target_images, cfg.threshold)
            pairs = sample_view_masks(cfg, target_images.shape[2],
                                      target_images.shape[0], step_index)
            view_a = np.stack([mk.apply_mask(target_images[i], p.masks[0])
                               for i, p in enumerate(pairs)])
            view_b = np.stack([mk.apply_mask(target_images[i], p.masks[1])
                               for i, p in enumerate(pairs)])
            ns, nv = source_images.shape[0], view_a.shape[0]
            if align is None:
                # one batched pass over source + both views
                logits = _forward_logits(
                    g, self.pair.student,
                    g.leaf(np.concatenate([source_images, view_a, view_b])))
                logits_s = g.slice_batch(logits, 0, ns)
                logits_a = g.slice_batch(logits, ns, ns + nv)
                logits_b = g.slice_batch(logits, ns + nv, ns + 2 * nv)
            else:
                # the feature alignment applies to the source pass only
                logits_s = _forward_logits(g, self.pair.student,
                                           g.leaf(source_images), align)
                logits_a = _forward_logits(g, self.pair.student, g.leaf(view_a))
                logits_b = _forward_logits(g, self.pair.student, g.leaf(view_b))
            sup = g.softmax_cross_entropy(logits_s, source_labels)
            ce_a = g.softmax_cross_entropy(logits_a, pseudo.classes, pseudo.keep)
            ce_b = g.softmax_cross_entropy(logits_b, pseudo.classes, pseudo.keep)
            cl = g.add(g.scale(ce_a, cfg.lam), g.scale(ce_b, 1.0 - cfg.lam))
            cm = g.mean_sq_diff(g.softmax(logits_a), g.softmax(logits_b))
            total = g.add(g.add(sup, cl), g.scale(cm, cfg.lambda_cm))
            losses = {"sup": float(sup.value), "cl": float(cl.value),
                      "cm": float(cm.value)}

        losses["total"] = float(total.value)
        for name, value in losses.items():
            if not math.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss at step {step_index}: {losses}")
        self.optimizer.step(g.backward(total))
        ema_update(self.pair, cfg.ema_decay)
        return losses


def loss_sup(params: dict[str, Param], images, labels) -> float:
    g = Graph()
    node = g.softmax_cross_entropy(_forward_logits(g, params, g.leaf(images)), labels)
    return float(node.value)


def loss_cl(params: dict[str, Param], view_a: np.ndarray, view_b: np.ndarray,
            pseudo: PseudoLabel, lam: float) -> float:
    """lam * CE(view a, pseudo) + (1 - lam) * CE(view b, pseudo), averaged
    over kept pixels; 0 when every pixel is dropped."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    g = Graph()
    ce_a = g.softmax_cross_entropy(
        _forward_logits(g, params, g.leaf(view_a)), pseudo.classes, pseudo.keep)
    ce_b = g.softmax_cross_entropy(
        _forward_logits(g, params, g.leaf(view_b)), pseudo.classes, pseudo.keep)
    return lam * float(ce_a.value) + (1.0 - lam) * float(ce_b.value)


def loss_cm(probs_a: np.ndarray, probs_b: np.ndarray) -> float:
    """Mean squared distance between the two view probability maps."""
    probs_a = np.asarray(probs_a, dtype=np.float64)
    probs_b = np.asarray(probs_b, dtype=np.float64)
    if probs_a.shape != probs_b.shape:
        raise ValueError("probability maps must share a shape")
    return float(np.mean((probs_a - probs_b) ** 2))


def evaluate(params: dict[str, Param], samples: list[datagen.SegSample],
             num_classes: int) -> dict:
    """Confusion-based IoU / F1 / MCC per class plus foreground mAP.

    Classes absent from both prediction and truth are excluded from the
    mean IoU; mAP averages one-vs-rest APs over classes with positives.
    """
    images = np.stack([s.image for s in samples])
    truth = np.stack([s.label for s in samples])
    probs = forward_segment(params, images)
    pred = probs.argmax(axis=1)
    counts = metrics.confusion(pred, truth, num_classes)
    per_iou = metrics.iou(counts)
    per_f1 = metrics.f1(counts)
    per_mcc = metrics.mcc(counts)
    present = (counts.tp + counts.fp + counts.fn) > 0
    miou = float(per_iou[present].mean()) if present.any() else 0.0
    aps = [metrics.average_precision(np.clip(probs[:, c], 0.0, 1.0), truth == c)
           for c in range(1, num_classes) if np.any(truth == c)]
    return {"iou": per_iou, "f1": per_f1, "mcc": per_mcc,
            "miou": miou, "map": float(np.mean(aps)) if aps else 0.0}


@dataclass
class RunResult:
    config: TrainConfig
    source_metrics: dict
    target_metrics: dict
    loss_log: list[dict] = field(repr=False)
    params: dict[str, Param] = field(repr=False)

    def summary(self) -> dict:
        return {"config": asdict(self.config),
                "source_miou": self.source_metrics["miou"],
                "target_miou": self.target_metrics["miou"]}


DATASET_SIZES = {"source_train": 64, "target_train": 64,
                 "source_val": 32, "target_val": 32}


def make_datasets(source_spec: datagen.DomainSpec, target_spec: datagen.DomainSpec):
    n = DATASET_SIZES
    return {
        "source_train": datagen.gen_domain(source_spec, n["source_train"], start=0),
        "target_train": datagen.gen_domain(target_spec, n["target_train"], start=1000),
        "source_val": datagen.gen_domain(source_spec, n["source_val"], start=2000),
        "target_val": datagen.gen_domain(target_spec, n["target_val"], start=3000),
    }


def train_run(config: TrainConfig, source_spec: datagen.DomainSpec | None = None,
              target_spec: datagen.DomainSpec | None = None,
              log_every: int = 10) -> RunResult:
    """Full training run on the synthetic shift pair; returns final metrics."""
    if source_spec is None or target_spec is None:
        base = datagen.DomainSpec()
        source_spec, target_spec = datagen.make_shift_pair(base)
    if source_spec.classes != target_spec.classes:
        raise ValueError("source and target must share the label space")
    data = make_datasets(source_spec, target_spec)
    trainer = Trainer(config, source_spec.classes)
    rng = child_rng(config.seed, 1)
    src_imgs = np.stack([s.image for s in data["source_train"]])
    src_lbls = np.stack([s.label for s in data["source_train"]])
    tgt_imgs = np.stack([s.image for s in data["target_train"]])
    log = []
    for step in range(config.iterations):
        si = rng.integers(0, len(src_imgs), size=config.batch_size)
        ti = rng.integers(0, len(tgt_imgs), size=config.batch_size)
        losses = trainer.train_step(src_imgs[si], src_lbls[si], tgt_imgs[ti], step)
        if step % log_every == 0 or step == config.iterations - 1:
            log.append({"step": step, **losses})
    return RunResult(
        config,
        evaluate(trainer.pair.student, data["source_val"], source_spec.classes),
        evaluate(trainer.pair.student, data["target_val"], target_spec.classes),
        log, trainer.pair.student)
