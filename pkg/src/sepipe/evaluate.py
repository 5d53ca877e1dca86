"""Preprocessing pipeline, per-example probability records and the rate-of-reduction metric.

The confidence aggregate behind ``diff`` has two modes:

* ``interpreted`` (default): mean probability of the *true* class, taken
  per class and then averaged over the classes present.
* ``literal``: ``(sum P_A + sum P_B) / 2`` over the kept examples. With
  complementary probabilities this is always N/2, so its diff is zero up
  to rounding; it is kept for comparison only.

By default each model keeps only the examples whose attack succeeded on
that same model. ``keep_ids`` lets a caller impose another model's set.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, craft, predicted_class
from .enhance import EnhanceConfig, enhance
from .errors import ConfigError, DataError
from .image import Image
from .segment import apply_mask_real, heuristic_segment

log = logging.getLogger(__name__)

MASK_SOURCES = ("auto", "provided", "heuristic")
METRIC_MODES = ("interpreted", "literal")


@dataclass(frozen=True)
class Pipeline:
    """Optional masking, then one enhancement."""

    segmentation: bool = False
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    mask_source: str = "auto"

    def __post_init__(self):
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}, got {self.mask_source!r}")

    @property
    def is_identity(self):
        return not self.segmentation and self.enhance.option == "none"

    @property
    def tag(self):
        return self.enhance.tag + ("+seg" if self.segmentation else "")

    def mask_for(self, x, mask=None):
        if self.mask_source == "heuristic" or (mask is None and self.mask_source == "auto"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                return heuristic_segment(Image.from_real(x))
        if mask is None:
            raise DataError("pipeline needs a provided mask but the sample has none")
        return mask

    def apply(self, x, mask=None):
        """Run one float image in [0, 1] through the pipeline.

        Masking stays in the float domain; an enhancement step works on the
        8-bit image, so only then is the input quantized.
        """
        x = np.asarray(x, dtype=np.float64)
        if self.segmentation:
            x = apply_mask_real(x, self.mask_for(x, mask))
        if self.enhance.option != "none":
            x = enhance(Image.from_real(x), self.enhance).to_real()
        return x

    def apply_batch(self, xb, masks=None):
        if self.is_identity:
            return np.asarray(xb, dtype=np.float64)
        masks = masks if masks is not None else [None] * len(xb)
        return np.stack([self.apply(x, m) for x, m in zip(xb, masks)])

    def to_dict(self):
        return {"segmentation": self.segmentation, "mask_source": self.mask_source, **self.enhance.relevant()}

    @classmethod
    def from_dict(cls, d):
        return cls(segmentation=bool(d.get("segmentation", d.get("segment", False))),
                   enhance=EnhanceConfig.from_dict(d),
                   mask_source=d.get("mask_source", "auto"))


@dataclass(frozen=True)
class ProbRecord:
    example_id: str
    true_label: int
    p_a: float
    p_b: float
    p_a_adv: float
    p_b_adv: float
    attack_successful: bool

    def correct_prob(self, adversarial=False):
        if adversarial:
            return self.p_a_adv if self.true_label == 0 else self.p_b_adv
        return self.p_a if self.true_label == 0 else self.p_b


@dataclass(frozen=True)
class Aggregate:
    n_total: int
    n_filtered: int
    mean_clean_conf: float | None
    mean_adv_conf: float | None

    @property
    def diff(self):
        if self.mean_clean_conf is None or self.mean_adv_conf is None:
            return None
        return abs(self.mean_clean_conf - self.mean_adv_conf)


def _class_balanced_mean(values, labels):
    per_class = [np.mean([v for v, l in zip(values, labels) if l == c])
                 for c in (0, 1) if any(l == c for l in labels)]
    return float(np.mean(per_class))


def aggregate(records, mode="interpreted", keep_ids=None, filtered=True):
    """Clean/adversarial confidence over the kept records.

    ``filtered`` keeps only successful attacks (or ``keep_ids`` when given).
    """
    if mode not in METRIC_MODES:
        raise ConfigError(f"mode must be one of {METRIC_MODES}, got {mode!r}")
    if not filtered:
        kept = list(records)
    elif keep_ids is not None:
        keep_ids = set(keep_ids)
        kept = [r for r in records if r.example_id in keep_ids]
    else:
        kept = [r for r in records if r.attack_successful]
    if not kept:
        return Aggregate(len(records), 0, None, None)
    if mode == "literal":
        clean = (math.fsum(r.p_a for r in kept) + math.fsum(r.p_b for r in kept)) / 2
        adv = (math.fsum(r.p_a_adv for r in kept) + math.fsum(r.p_b_adv for r in kept)) / 2
    else:
        labels = [r.true_label for r in kept]
        clean = _class_balanced_mean([r.correct_prob() for r in kept], labels)
        adv = _class_balanced_mean([r.correct_prob(True) for r in kept], labels)
    return Aggregate(len(records), len(kept), clean, adv)


@dataclass
class EvalReport:
    model_tag: str
    attack: AttackConfig
    pipeline: Pipeline
    n_total: int
    n_filtered: int
    mean_clean_conf: float | None
    mean_adv_conf: float | None
    diff: float | None
    # unfiltered view, over every test example
    mean_clean_conf_all: float
    mean_adv_conf_all: float
    clean_accuracy: float
    mode: str = "interpreted"

    @property
    def segmented(self):
        return self.pipeline.segmentation

    @property
    def diff_all(self):
        return abs(self.mean_clean_conf_all - self.mean_adv_conf_all)


def build_report(model_tag, attack, pipeline, records, mode="interpreted", keep_ids=None):
    agg = aggregate(records, mode, keep_ids)
    full = aggregate(records, mode, filtered=False)
    acc = float(np.mean([(r.p_b > r.p_a) == bool(r.true_label) for r in records])) if records else 0.0
    return EvalReport(model_tag, attack, pipeline, agg.n_total, agg.n_filtered, agg.mean_clean_conf,
                      agg.mean_adv_conf, agg.diff, full.mean_clean_conf, full.mean_adv_conf, acc, mode)


def rate_of_reduction(base, defended):
    """``(diff_base - diff_defended) / diff_base``; None when the base diff is zero or undefined.

    A defended model with no successful attacks has no attack effect and
    counts as diff 0.
    """
    if base.diff is None or base.diff == 0:
        log.warning("rate of reduction undefined for %s: attack ineffective on base model (diff=%s)",
                    base.attack.tag, base.diff)
        return None
    d = 0.0 if defended.diff is None else defended.diff
    return (base.diff - d) / base.diff


def stack_samples(samples):
    x = np.stack([s.image.to_real() for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y, [s.mask for s in samples]


def make_records(ids, labels, clean_probs, adv_probs):
    clean_pred = predicted_class(clean_probs)
    adv_pred = predicted_class(adv_probs)
    return [ProbRecord(str(i), int(l), float(c[0]), float(c[1]), float(a[0]), float(a[1]),
                       bool(cp == l and ap != l))
            for i, l, c, a, cp, ap in zip(ids, labels, clean_probs, adv_probs, clean_pred, adv_pred)]


def craft_adversarial(model, x, y, masks, attack, pipeline, base_model=None):
    """Adversarial inputs (before preprocessing) under the attack's threat mode."""
    if attack.threat_mode == "transfer":
        if base_model is None:
            raise ConfigError("threat_mode 'transfer' needs the undefended base model")
        return craft(base_model, x, y, attack)
    if attack.threat_mode == "bpda_identity" and not pipeline.is_identity:
        return craft(model, x, y, attack, preprocess=lambda xb: pipeline.apply_batch(xb, masks))
    return craft(model, x, y, attack)


def evaluate(model, samples, attack, pipeline=None, base_model=None, model_tag="",
             mode="interpreted", keep_ids=None, adversarial=None):
    """Clean vs adversarial probabilities on ``samples`` through ``pipeline``.

    ``adversarial`` short-circuits crafting with precomputed inputs.
    Returns ``(records, report)``.
    """
    pipeline = pipeline or Pipeline()
    if not samples:
        raise DataError("evaluate needs at least one test sample")
    x, y, masks = stack_samples(samples)
    clean_probs = model.class_probs(pipeline.apply_batch(x, masks))
    adv = adversarial if adversarial is not None else craft_adversarial(model, x, y, masks, attack,
                                                                          pipeline, base_model)
    adv_probs = model.class_probs(pipeline.apply_batch(adv, masks))
    ids = [f"{i}:{s.path}" for i, s in enumerate(samples)]
    records = make_records(ids, y, clean_probs, adv_probs)
    return records, build_report(model_tag, attack, pipeline, records, mode, keep_ids)
