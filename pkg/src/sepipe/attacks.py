"""White-box FGSM and PGD under an L-infinity budget, in [0, 1] pixel units.

Attacks work on float arrays (S x S or N x S x S) and return float arrays,
before 8-bit quantization. Any object with ``trained``, ``dtype``,
``loss(x, labels)`` and ``class_probs(x)`` can be attacked; the classifiers
in :mod:`sepipe.models` qualify.

``preprocess`` (a batch -> batch function) implements the straight-through
(BPDA-identity) threat model: the gradient is taken at ``preprocess(x)``
and applied to ``x``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, StateError
from .image import Image

KINDS = ("fgsm", "pgd")
THREAT_MODES = ("direct", "bpda_identity", "transfer")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.001
    step_size: float = 2 / 255
    iterations: int = 7
    threat_mode: str = "bpda_identity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.threat_mode not in THREAT_MODES:
            raise ConfigError(f"threat_mode must be one of {THREAT_MODES}, got {self.threat_mode!r}")
        if not 0 < self.epsilon <= 1:
            raise ConfigError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.kind == "pgd" and (not self.step_size > 0 or self.iterations < 1):
            raise ConfigError(f"pgd needs step_size > 0 and iterations >= 1, got "
                              f"{self.step_size}, {self.iterations}")

    @property
    def tag(self):
        if self.kind == "fgsm":
            return f"fgsm-e{self.epsilon:g}"
        return f"pgd-e{self.epsilon:.6g}-a{self.step_size:.6g}-t{self.iterations}"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _as_real(x):
    if isinstance(x, Image):
        return x.to_real()
    return np.asarray(x, dtype=np.float64)


def _require_trained(model):
    if not getattr(model, "trained", False):
        raise StateError("attacks need a trained model")


def input_gradient(model, x, labels, preprocess=None):
    """d loss / d input for a batch ``x`` of shape N x S x S."""
    x_eval = x if preprocess is None else preprocess(x)
    xt = T.Tensor(np.asarray(x_eval, dtype=model.dtype)[:, None], requires_grad=True)
    model.loss(xt, labels).backward()
    return xt.grad[:, 0].astype(np.float64)


def _batched(x, label):
    single = x.ndim == 2
    xb = x[None] if single else x
    labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (xb.shape[0],))
    return xb, labels, single


def _project(adv, x, epsilon):
    """Clip onto [0, 1] and the eps-box around ``x`` so that ``|adv - x| <= eps`` holds exactly.

    ``(x + eps) - x`` can round to slightly more than ``eps``; such entries are
    stepped one ulp towards ``x`` until the bound holds.
    """
    adv = np.clip(np.clip(adv, x - epsilon, x + epsilon), 0.0, 1.0)
    over = np.abs(adv - x) > epsilon
    while over.any():
        adv[over] = np.nextafter(adv[over], x[over])
        over = np.abs(adv - x) > epsilon
    return adv


def fgsm(model, x, label, epsilon, preprocess=None):
    """``clamp01(x + eps * sign(grad))``."""
    _require_trained(model)
    x = _as_real(x)
    xb, labels, single = _batched(x, label)
    g = input_gradient(model, xb, labels, preprocess)
    adv = _project(xb + epsilon * np.sign(g), xb, epsilon)
    return adv[0] if single else adv


def pgd(model, x, label, epsilon, step_size, iterations, preprocess=None, return_iterates=False):
    """Iterated signed-gradient steps, each projected onto the eps-ball and [0, 1]. No random start."""
    _require_trained(model)
    x = _as_real(x)
    xb, labels, single = _batched(x, label)
    cur = xb
    iterates = []
    for _ in range(iterations):
        g = input_gradient(model, cur, labels, preprocess)
        cur = _project(cur + step_size * np.sign(g), xb, epsilon)
        if return_iterates:
            iterates.append(cur[0] if single else cur)
    out = cur[0] if single else cur
    return (out, iterates) if return_iterates else out


def craft(model, x, label, cfg, preprocess=None):
    if cfg.kind == "fgsm":
        return fgsm(model, x, label, cfg.epsilon, preprocess)
    return pgd(model, x, label, cfg.epsilon, cfg.step_size, cfg.iterations, preprocess)


def predicted_class(probs):
    """Argmax over (P_A, P_B) rows; ties go to class A."""
    probs = np.atleast_2d(probs)
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def attack_success(model, img, adv_img, label):
    """Clean prediction correct and adversarial prediction wrong."""
    _require_trained(model)
    clean = predicted_class(model.class_probs(_as_real(img)[None, None]))[0]
    adv = predicted_class(model.class_probs(_as_real(adv_img)[None, None]))[0]
    return bool(clean == label and adv != label)
