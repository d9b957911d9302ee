"""Synthetic data generators for simulation studies.

Two templates mirror the usual settings for matrix-covariate studies:

* ``psqi``: gene-gene interactions.  Genotypes ``G`` (15 markers) and ``E``
  (7 markers) are Binomial(2, maf) with a per-marker maf drawn from
  ``U[0.2, 0.5]``; ``Z = (G, E)``, ``M = G E'`` and the response is normal
  with ``gamma = 10`` and ``xi = (1_5, 0_10, 1_3, 0_4)``.
* ``eeg``: 6 x 6 Gaussian matrices with AR(1) correlation 0.5 along rows
  and columns, standardized cell by cell; binary response with
  ``gamma = 0`` and no confounders.

Both are synthetic stand-ins; no real data are involved.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .model import CoefVector, Family, MatrixDataset


class Template(str, enum.Enum):
    PSQI_NORMAL = "psqi"
    EEG_LOGISTIC = "eeg"


class EtaPattern(str, enum.Enum):
    FIXED_CORNER = "fixed-corner"
    SPARSE2 = "sparse2"
    LOW_RANK_COLS2 = "lowrank-cols2"


TEMPLATE_DIMS = {
    Template.PSQI_NORMAL: dict(p=15, q=7, m=22, n=400, rank=3, family=Family.NORMAL),
    Template.EEG_LOGISTIC: dict(p=6, q=6, m=0, n=150, rank=2, family=Family.LOGISTIC),
}

PSQI_GAMMA = 10.0
MAF_RANGE = (0.2, 0.5)
EEG_AR1 = 0.5


def _parse(enum_cls, value):
    if isinstance(value, enum_cls):
        return value
    key = str(value).lower().replace("_", "-")
    aliases = {"psqinormal": "psqi", "psqi-normal": "psqi", "eeglogistic": "eeg",
               "eeg-logistic": "eeg", "fixedcorner": "fixed-corner", "lowrankcols2": "lowrank-cols2",
               "low-rank": "lowrank-cols2", "lowrank": "lowrank-cols2", "sparse": "sparse2"}
    try:
        return enum_cls(aliases.get(key, key))
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise ValidationError(f"unknown value {value!r}; choose from {choices}") from None


@dataclass(frozen=True)
class ScenarioConfig:
    template: Template
    eta_pattern: EtaPattern = EtaPattern.FIXED_CORNER
    effect_size: float = 1.0
    n: Optional[int] = None
    replicates: int = 100
    seed: int = 0
    noise_sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "template", _parse(Template, self.template))
        object.__setattr__(self, "eta_pattern", _parse(EtaPattern, self.eta_pattern))
        if self.n is None:
            object.__setattr__(self, "n", TEMPLATE_DIMS[self.template]["n"])
        if self.effect_size < 0:
            raise ValidationError("effect size must be >= 0")
        if self.noise_sigma <= 0:
            raise ValidationError("noise_sigma must be positive")
        if self.n < 2 or self.replicates < 1:
            raise ValidationError("need n >= 2 and replicates >= 1")

    @property
    def dims(self) -> dict:
        return TEMPLATE_DIMS[self.template]

    @property
    def family(self) -> Family:
        return self.dims["family"]

    def with_effect(self, c: float) -> "ScenarioConfig":
        return ScenarioConfig(self.template, self.eta_pattern, c, self.n, self.replicates,
                              self.seed, self.noise_sigma)


def make_eta(pattern, c: float, p: int, q: int, rng: np.random.Generator) -> np.ndarray:
    """Coefficient matrix for a pattern with Frobenius norm ``c``.

    ``fixed-corner`` puts ``c / sqrt(2)`` at cells (1,1) and (2,1).
    ``sparse2`` puts ``c U`` on two random cells, ``U`` uniform on the circle.
    ``lowrank-cols2`` fills the first two columns with ``c U``, ``U``
    uniform on the unit sphere of dimension ``2p``.
    """
    pattern = _parse(EtaPattern, pattern)
    eta = np.zeros((p, q))
    if pattern is EtaPattern.FIXED_CORNER:
        eta[0, 0] = eta[1, 0] = c / np.sqrt(2.0)
        return eta
    if pattern is EtaPattern.SPARSE2:
        cells = rng.choice(p * q, size=2, replace=False)
        u = rng.standard_normal(2)
        flat = eta.reshape(-1, order="F")
        flat[cells] = c * u / np.linalg.norm(u)
        return flat.reshape((p, q), order="F")
    u = rng.standard_normal(2 * p)
    eta[:, :2] = (c * u / np.linalg.norm(u)).reshape((p, 2), order="F")
    return eta


def _ar1_chol(k: int, rho: float) -> np.ndarray:
    idx = np.arange(k)
    return np.linalg.cholesky(rho ** np.abs(idx[:, None] - idx[None, :]))


def psqi_design(n: int, rng: np.random.Generator, p: int = 15, q: int = 7):
    """Genotype-like ``G`` (n x p), ``E`` (n x q) with entries in {0, 1, 2}."""
    maf_g = rng.uniform(*MAF_RANGE, size=p)
    maf_e = rng.uniform(*MAF_RANGE, size=q)
    g = rng.binomial(2, maf_g, size=(n, p)).astype(float)
    e = rng.binomial(2, maf_e, size=(n, q)).astype(float)
    return g, e


def eeg_mats(n: int, rng: np.random.Generator, p: int = 6, q: int = 6) -> np.ndarray:
    lp, lq = _ar1_chol(p, EEG_AR1), _ar1_chol(q, EEG_AR1)
    w = rng.standard_normal((n, p, q))
    mats = lp @ w @ lq.T
    sd = mats.std(axis=0, ddof=1)
    sd[sd == 0] = 1.0
    return (mats - mats.mean(axis=0)) / sd


def psqi_xi(p: int = 15, q: int = 7) -> np.ndarray:
    return np.concatenate([np.ones(5), np.zeros(p - 5), np.ones(3), np.zeros(q - 3)])


def generate_scenario(config: ScenarioConfig, replicate: int = 0):
    """Draw one dataset and its true coefficients.

    Replicate ``i`` of a study uses ``numpy.random.default_rng([seed, i])``;
    the effect size only scales ``eta``, so different effect sizes share the
    same designs, noise and random directions.
    """
    rng = np.random.default_rng([config.seed, replicate])
    d = config.dims
    p, q, n = d["p"], d["q"], config.n
    if config.template is Template.PSQI_NORMAL:
        g, e = psqi_design(n, rng, p, q)
        z = np.hstack([g, e])
        mats = g[:, :, None] * e[:, None, :]
        noise = rng.standard_normal(n)
        eta = make_eta(config.eta_pattern, config.effect_size, p, q, rng)
        xi = psqi_xi(p, q)
        mean = PSQI_GAMMA + z @ xi + np.einsum("ipq,pq->i", mats, eta)
        y = mean + config.noise_sigma * noise
        truth = CoefVector.from_parts(PSQI_GAMMA, xi, eta)
        return MatrixDataset(y=y, mats=mats, z=z), truth
    mats = eeg_mats(n, rng, p, q)
    unif = rng.random(n)
    eta = make_eta(config.eta_pattern, config.effect_size, p, q, rng)
    y = (unif < expit(np.einsum("ipq,pq->i", mats, eta))).astype(float)
    truth = CoefVector.from_parts(0.0, np.zeros(0), eta)
    return MatrixDataset(y=y, mats=mats), truth
