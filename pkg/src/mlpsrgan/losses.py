"""Generator and discriminator objectives.

The adversarial terms use a relativistic-average discriminator: an image's
probability of being real is ``sigmoid(c - mean(c_other))`` where ``c`` is
its raw logit and ``c_other`` are the logits of the opposing batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    perceptual: float = 1.0
    content: float = 0.01
    adversarial: float = 0.005

    def __post_init__(self):
        if min(self.perceptual, self.content, self.adversarial) < 0:
            raise ConfigError("loss weights must be nonnegative")


class FeatureExtractor(Protocol):
    def __call__(self, img: Tensor) -> Tensor: ...


def identity_extractor(img: Tensor) -> Tensor:
    return img


class RandomConvExtractor:
    """Frozen stack of three stride-2 3x3 convolutions with leaky ReLU.

    Weights are drawn once from ``seed`` and never tracked, so the map is a
    fixed deterministic function of its input.
    """

    def __init__(self, widths=(8, 16, 32), seed: int = 20220, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.kernels = []
        cin = 1
        for cout in widths:
            std = np.sqrt(2.0 / (cin * 9))
            self.kernels.append(rng.normal(0.0, std, size=(cout, cin, 3, 3)))
            cin = cout
        self.dtype = np.dtype(dtype)

    def __call__(self, img: Tensor) -> Tensor:
        x = img if img.ndim == 4 else T.reshape(img, (1,) + img.shape)
        n = len(self.kernels)
        for i, k in enumerate(self.kernels):
            x = T.conv2d(x, Tensor(k.astype(x.dtype)), (2, 2), (1, 1))
            if i < n - 1:
                x = T.leaky_relu(x)
        return x


def content_loss(sr: Tensor, hr: Tensor) -> Tensor:
    """Mean absolute pixel error."""
    if sr.shape != hr.shape:
        raise ContractError(f"content loss shapes differ: {sr.shape} vs {hr.shape}")
    return T.reduce(T.absolute(sr - hr), "mean")


def perceptual_loss(sr: Tensor, hr: Tensor, fe: Callable[[Tensor], Tensor]) -> Tensor:
    """Mean absolute error between extracted features of ``hr`` and ``sr``."""
    if sr.shape != hr.shape:
        raise ContractError(f"perceptual loss shapes differ: {sr.shape} vs {hr.shape}")
    f_sr = fe(sr)
    with T.no_grad():
        f_hr = fe(hr.detach())
    if f_sr.shape != f_hr.shape:
        raise ContractError(f"feature extractor output shapes differ: {f_sr.shape} vs {f_hr.shape}")
    return T.reduce(T.absolute(f_hr - f_sr), "mean")


def relativistic_D(c_real, c_fake_mean) -> Tensor:
    return T.sigmoid(T.sub(c_real, c_fake_mean))


def _as_logits(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_1d(np.asarray(x, dtype=np.float64)))
    return T.reshape(x, (-1,))


def _relativistic_pair(logits_hr, logits_sr) -> tuple[Tensor, Tensor]:
    hr = _as_logits(logits_hr)
    sr = _as_logits(logits_sr)
    d_hr = T.clip(relativistic_D(hr, T.reduce(sr, "mean")), PROB_EPS, 1.0 - PROB_EPS)
    d_sr = T.clip(relativistic_D(sr, T.reduce(hr, "mean")), PROB_EPS, 1.0 - PROB_EPS)
    return d_hr, d_sr


def adversarial_g_loss(logits_hr, logits_sr) -> Tensor:
    """``-log(1 - D(hr, sr)) - log(D(sr, hr))`` averaged over the batch."""
    d_hr, d_sr = _relativistic_pair(logits_hr, logits_sr)
    return (T.reduce(-T.log(1.0 - d_hr), "mean")
            + T.reduce(-T.log(d_sr), "mean"))


def adversarial_d_loss(logits_hr, logits_sr) -> Tensor:
    """``-log(D(hr, sr)) - log(1 - D(sr, hr))`` averaged over the batch."""
    d_hr, d_sr = _relativistic_pair(logits_hr, logits_sr)
    return (T.reduce(-T.log(d_hr), "mean")
            + T.reduce(-T.log(1.0 - d_sr), "mean"))


def generator_total_loss(sr: Tensor, hr: Tensor, logits_hr, logits_sr,
                         fe: Callable[[Tensor], Tensor],
                         w: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Weighted perceptual + content + adversarial loss.

    Pass ``logits_hr=logits_sr=None`` to drop the adversarial term entirely.
    Returns the total and a component breakdown (unweighted values).
    """
    parts: dict[str, Tensor] = {}
    terms = []
    if w.perceptual:
        parts["perceptual"] = perceptual_loss(sr, hr, fe)
        terms.append(parts["perceptual"] * w.perceptual)
    parts["content"] = content_loss(sr, hr)
    terms.append(parts["content"] * w.content)
    if logits_hr is not None and logits_sr is not None:
        parts["adversarial_g"] = adversarial_g_loss(logits_hr, logits_sr)
        terms.append(parts["adversarial_g"] * w.adversarial)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, {k: float(v.data) for k, v in parts.items()}
