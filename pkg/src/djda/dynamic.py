"""Proxy A-distances from discriminator error rates and the balance factor w.

    d_A(err)  = clamp(2 * (1 - 2 * err), 0, 2)
    w         = 1 - d_md / (d_md + sum_m d_cd[m])      (0.5 when all distances are 0)

Speaker discriminators are k-way, so their error is rescaled with
``err * k / (k - 1) / 2`` before being averaged with a binary domain error:
chance level (1 - 1/k) maps to 0.5, a perfect discriminator to 0.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

INITIAL_W = 0.5


def a_distance(err):
    err = float(err)
    if not 0.0 <= err <= 1.0:
        raise ContractError(f"error rate must lie in [0, 1], got {err}")
    return min(max(2.0 * (1.0 - 2.0 * err), 0.0), 2.0)


def normalize_speaker_error(err, k):
    return min(max(err * (k / (k - 1.0)) / 2.0, 0.0), 1.0)


@dataclass
class EpochStats:
    """Misclassification tallies pooled over the batches of one epoch.

    Class-wise tallies are probability mass: a sample contributes ``p_m`` to
    class ``m``'s total and ``p_m`` to its wrong mass when misclassified.
    ``use_st`` / ``use_sp`` say which discriminator families were active.
    """

    c: int
    k: int
    use_st: bool = True
    use_sp: bool = True
    batches: int = 0
    st_wrong: float = 0.0
    st_n: float = 0.0
    sp_wrong: float = 0.0
    sp_n: float = 0.0
    cst_wrong: np.ndarray = None
    cst_mass: np.ndarray = None
    csp_wrong: np.ndarray = None
    csp_mass: np.ndarray = None

    def __post_init__(self):
        for name in ("cst_wrong", "cst_mass", "csp_wrong", "csp_mass"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.c))

    def add_batch(self, err_st, n_st, err_sp, n_sp, cda_domain=None, cda_speaker=None):
        self.batches += 1
        self.st_wrong += err_st * n_st
        self.st_n += n_st
        self.sp_wrong += err_sp * n_sp
        self.sp_n += n_sp
        if cda_domain is not None:
            self.cst_wrong += cda_domain.wrong
            self.cst_mass += cda_domain.mass
        if cda_speaker is not None:
            self.csp_wrong += cda_speaker.wrong
            self.csp_mass += cda_speaker.mass

    @property
    def err_st(self):
        return self.st_wrong / self.st_n if self.st_n else 0.0

    @property
    def err_sp(self):
        return self.sp_wrong / self.sp_n if self.sp_n else 0.0


def _combine(parts):
    return sum(parts) / len(parts)


def marginal_distance(stats: EpochStats):
    """A-distance of the marginal discriminators over one epoch."""
    if stats.batches < 1:
        raise ContractError("epoch statistics cover no batches")
    parts = []
    if stats.use_st:
        parts.append(stats.err_st)
    if stats.use_sp:
        parts.append(normalize_speaker_error(stats.err_sp, stats.k))
    if not parts:
        return 0.0
    return a_distance(min(max(_combine(parts), 0.0), 1.0))


def conditional_distance(stats: EpochStats, m):
    """A-distance of class ``m``'s discriminator pair; 0 for a class with no mass."""
    parts = []
    if stats.use_st and stats.cst_mass[m] > 0:
        parts.append(stats.cst_wrong[m] / stats.cst_mass[m])
    if stats.use_sp and stats.csp_mass[m] > 0:
        parts.append(normalize_speaker_error(stats.csp_wrong[m] / stats.csp_mass[m], stats.k))
    if not parts:
        return 0.0
    return a_distance(min(max(_combine(parts), 0.0), 1.0))


def balance_factor(d_md, d_cd):
    """``w = 1 - d_md / (d_md + sum(d_cd))``, clamped to [0, 1]."""
    denom = d_md + float(np.sum(d_cd))
    if denom <= 0.0:
        return INITIAL_W
    return min(max(1.0 - d_md / denom, 0.0), 1.0)


@dataclass
class DistanceEstimate:
    d_md: float
    d_cd: list = field(default_factory=list)
    source_epoch: int = 0

    @property
    def sum_d_cd(self):
        return float(np.sum(self.d_cd))


def estimate_distances(stats: EpochStats, epoch):
    d_cd = [conditional_distance(stats, m) for m in range(stats.c)]
    return DistanceEstimate(marginal_distance(stats), d_cd, epoch)
