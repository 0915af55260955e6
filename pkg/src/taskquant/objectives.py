"""Training objectives built from the autodiff primitives.

Divergences use the natural log with ``EPS`` added inside every log and are
averaged over pixels (all leading axes); the class axis is last.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .vq import vq_losses

EPS = 1e-8

# term lists per composite, in summation order
SCHEMES: dict[str, tuple[str, ...]] = {
    "Lv": ("mse", "codebook", "commitment"),
    "Ls": ("perceptual", "jsd", "codebook", "commitment"),
    "Lsc": ("ce", "codebook", "commitment"),
    "Lvk": ("mse", "kld", "codebook", "commitment"),
    "Lvp": ("perceptual", "codebook", "commitment"),
    # task-divergence ablations that the five named composites do not cover
    "Lk": ("kld", "codebook", "commitment"),
    "Lkp": ("perceptual", "kld", "codebook", "commitment"),
}


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _pixel_mean(per_pixel: Tensor) -> Tensor:
    return ad.mean(per_pixel, axis=tuple(range(per_pixel.data.ndim)))


def mse(x, x_hat) -> Tensor:
    x, x_hat = _t(x), _t(x_hat)
    _same_shape(x, x_hat, "mse")
    return ad.mean(ad.square(x_hat - x))


def _kl_per_pixel(P: Tensor, Q: Tensor) -> Tensor:
    return ad.sum(P * (ad.log(P + EPS) - ad.log(Q + EPS)), axis=-1)


def kld_map(P, Q) -> Tensor:
    """Per-position KL(P || Q) over the last axis."""
    P, Q = _t(P), _t(Q)
    _same_shape(P, Q, "kld")
    return _kl_per_pixel(P, Q)


def jsd_map(S, S_hat) -> Tensor:
    """Per-position Jensen-Shannon divergence, in nats."""
    S, S_hat = _t(S), _t(S_hat)
    _same_shape(S, S_hat, "jsd")
    M = (S + S_hat) * 0.5
    return (_kl_per_pixel(S, M) + _kl_per_pixel(S_hat, M)) * 0.5


def kld(P, Q) -> Tensor:
    return _pixel_mean(kld_map(P, Q))


def jsd(S, S_hat) -> Tensor:
    return _pixel_mean(jsd_map(S, S_hat))


def ce(S, S_hat) -> Tensor:
    """Cross-entropy of the student against the teacher's hard (argmax) labels."""
    S, S_hat = _t(S), _t(S_hat)
    _same_shape(S, S_hat, "ce")
    m = S.shape[-1]
    onehot = np.eye(m, dtype=S_hat.dtype)[np.argmax(S.data, axis=-1)]
    picked = ad.sum(S_hat * onehot, axis=-1)
    return -_pixel_mean(ad.log(picked + EPS))


def perceptual(x, x_hat, extractor) -> Tensor:
    """Sum over scales of the mean squared difference of unit-normalised features."""
    x, x_hat = _t(x), _t(x_hat)
    _same_shape(x, x_hat, "perceptual")
    total = None
    for fa, fb in zip(extractor(x), extractor(x_hat)):
        d = ad.mean(ad.square(ad.normalize_channels(fa) - ad.normalize_channels(fb)))
        total = d if total is None else total + d
    return total


@dataclass
class LossBreakdown:
    terms: dict[str, Tensor] = field(default_factory=dict)
    total: Tensor | None = None

    def values(self) -> dict[str, float]:
        out = {k: v.item() for k, v in self.terms.items()}
        out["total"] = self.total.item()
        return out


def composite(scheme: str, x=None, x_hat=None, S=None, S_hat=None, z_e=None, z_q=None,
              beta: float = 0.25, extractor=None) -> LossBreakdown:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {sorted(SCHEMES)}")
    needed = set(SCHEMES[scheme])

    def require(**kw):
        missing = [k for k, v in kw.items() if v is None]
        if missing:
            raise ValueError(f"scheme {scheme} needs {', '.join(missing)}")

    require(z_e=z_e, z_q=z_q)
    if needed & {"mse", "perceptual"}:
        require(x=x, x_hat=x_hat)
    if "perceptual" in needed:
        require(extractor=extractor)
    if needed & {"jsd", "kld", "ce"}:
        require(S=S, S_hat=S_hat)
        S = ad.sg(_t(S))

    terms: dict[str, Tensor] = {}
    for name in SCHEMES[scheme]:
        if name == "mse":
            terms[name] = mse(x, x_hat)
        elif name == "perceptual":
            terms[name] = perceptual(x, x_hat, extractor)
        elif name == "jsd":
            terms[name] = jsd(S, S_hat)
        elif name == "kld":
            terms[name] = kld(S, S_hat)
        elif name == "ce":
            terms[name] = ce(S, S_hat)
    terms["codebook"], terms["commitment"] = vq_losses(z_e, z_q, beta)

    total = None
    for name in SCHEMES[scheme]:
        total = terms[name] if total is None else total + terms[name]
    return LossBreakdown({k: terms[k] for k in SCHEMES[scheme]}, total)
