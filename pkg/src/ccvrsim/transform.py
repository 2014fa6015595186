"""ReLU followed by Tukey's power transform, used to Gaussianize features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError


@dataclass(frozen=True)
class TransformCfg:
    apply_relu: bool = True
    tukey_lambda: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.tukey_lambda <= 1:
            raise ArgumentError("tukey_lambda must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {"apply_relu": self.apply_relu, "tukey_lambda": self.tukey_lambda}


def transform_features(z: np.ndarray, cfg: TransformCfg) -> np.ndarray:
    """Elementwise ``max(z, 0) ** lambda``.

    With ``apply_relu`` off the power is applied sign-preservingly,
    ``sign(z) * |z| ** lambda``.
    """
    z = np.asarray(z, dtype=np.float64)
    if cfg.apply_relu:
        out = np.maximum(z, 0.0)
        return out if cfg.tukey_lambda == 1.0 else np.power(out, cfg.tukey_lambda)
    if cfg.tukey_lambda == 1.0:
        return z.copy()
    return np.sign(z) * np.power(np.abs(z), cfg.tukey_lambda)
