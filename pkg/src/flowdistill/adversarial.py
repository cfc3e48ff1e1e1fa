"""Discriminator machinery: frozen-model feature extraction, per-key-
timestep projection heads, and the GAN losses.

The discriminator never owns a feature extractor of its own: features
are hidden activations of the frozen teacher, tapped at one block for
noisy inputs (t > 0) and an earlier block for clean inputs (t = 0).
Each projection head maps a feature vector to a single logit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .nn import ParamSet, VelocityModel, forward_velocity

PROB_EPS = 1e-7


@dataclass(frozen=True)
class FeatureTapConfig:
    """Which residual-block outputs serve as discriminator features.

    Block index 0 is the input projection's output; R is the last block.
    """

    noisy_block: int
    clean_block: int

    def block_for(self, t: float) -> int:
        return self.noisy_block if t > 0.0 else self.clean_block


def default_taps(model: VelocityModel) -> FeatureTapConfig:
    # deep features for noisy inputs, a mid-depth block for clean ones
    return FeatureTapConfig(noisy_block=model.R, clean_block=max(1, model.R // 2))


def features_node(teacher: VelocityModel, x, t: float, tap: FeatureTapConfig) -> Tensor:
    """Hidden activation of the frozen teacher at the tap for time t.

    `x` may be a Tensor so that gradients can flow through the input
    back to whatever produced it; the teacher parameters themselves are
    constants here and never receive gradients.
    """
    block = tap.block_for(t)
    if not 0 <= block <= teacher.R:
        raise ConfigError(
            f"feature tap {block} out of range for a model with R={teacher.R} blocks"
        )
    X = x if isinstance(x, Tensor) else np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, hidden = forward_velocity(teacher.params, X, t, teacher.R, want_hidden=True)
    return hidden[block]


def extract_features(teacher: VelocityModel, x, t: float, tap: FeatureTapConfig):
    """Feature vector(s) for discrimination; teacher left unmodified."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = features_node(teacher, x, t, tap).data
    return out[0] if single else out


@dataclass
class ProjectionHead:
    """Small MLP (H -> H/2 -> 1) producing a real/fake logit for the key
    timestep it serves. The output layer starts at zero, so a fresh head
    reports probability exactly 0.5 everywhere."""

    index: int
    params: ParamSet

    @property
    def in_width(self) -> int:
        return self.params.tensors[0].shape[0]

    def with_params(self, params: ParamSet) -> "ProjectionHead":
        return ProjectionHead(self.index, params)


def build_projection_head(feature_width: int, index: int, seed: int) -> ProjectionHead:
    if feature_width < 2:
        raise ConfigError(f"feature width must be at least 2, got {feature_width}")
    rng = np.random.default_rng(seed)
    mid = feature_width // 2
    params = ParamSet(
        ("w1", "b1", "w2", "b2"),
        (
            rng.normal(0.0, 1.0 / np.sqrt(feature_width), size=(feature_width, mid)),
            np.zeros(mid),
            np.zeros((mid, 1)),
            np.zeros(1),
        ),
    )
    return ProjectionHead(index, params)


def head_logit_node(params, features) -> Tensor:
    """Logit of a head on (B, H) features; either side may carry grads."""
    w1, b1, w2, b2 = (params.tensors if isinstance(params, ParamSet) else params)
    h = ad.silu(ad.add(ad.matmul(ad.as_tensor(features), w1), b1))
    return ad.add(ad.matmul(h, w2), b2)


def discriminate(head: ProjectionHead, features) -> float:
    """Probability that `features` came from a real (stored) latent."""
    feats = np.asarray(features, dtype=np.float64)
    single = feats.ndim == 1
    feats = np.atleast_2d(feats)
    if feats.shape[1] != head.in_width:
        raise ValueError(
            f"feature width {feats.shape[1]} does not match head input {head.in_width}"
        )
    logit = head_logit_node(head.params, feats).data
    prob = ad.stable_sigmoid(logit[:, 0])
    return float(prob[0]) if single else prob


def adv_losses(p_real: float, p_fake: float):
    """Standard GAN losses from discriminator probabilities.

    d_loss is the negated discriminator objective (to minimize);
    g_loss is the non-saturating generator loss -log p_fake.
    Probabilities are clamped away from {0, 1} before the logs.
    """
    pr = min(max(float(p_real), PROB_EPS), 1.0 - PROB_EPS)
    pf = min(max(float(p_fake), PROB_EPS), 1.0 - PROB_EPS)
    d_loss = -(np.log(pr) + np.log(1.0 - pf))
    g_loss = -np.log(pf)
    return float(d_loss), float(g_loss)


def d_loss_node(p_real: Tensor, p_fake: Tensor) -> Tensor:
    pr = ad.clip(p_real, PROB_EPS, 1.0 - PROB_EPS)
    pf = ad.clip(p_fake, PROB_EPS, 1.0 - PROB_EPS)
    return ad.neg(ad.add(ad.mean(ad.log(pr)), ad.mean(ad.log(1.0 - pf))))


def g_loss_node(p_fake: Tensor, variant: str = "non_saturating") -> Tensor:
    pf = ad.clip(p_fake, PROB_EPS, 1.0 - PROB_EPS)
    if variant == "non_saturating":
        return ad.neg(ad.mean(ad.log(pf)))
    if variant == "minimax":
        return ad.mean(ad.log(1.0 - pf))
    raise ConfigError(f"unknown generator loss variant {variant!r}")
