"""Inversion-recovery signal model, derivatives, polarity handling, synthesis.

The signed signal at a voxel with relaxation time T1 and proton density PD,
acquired with inversion time TI and repetition time TR (all times in ms), is

    I = PD * (1 - 2*exp(-TI/T1) + exp(-TR/T1))

All exponentials are evaluated in double precision regardless of how volumes
are stored, because the fit is poorly conditioned near the null point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .volume import ScalarVolume

if TYPE_CHECKING:
    from .qmapfit import QuantMaps

DEFAULT_TR = 4000.0
DEFAULT_TI_MPRAGE = 1400.0
DEFAULT_TI_FGATIR = 400.0


@dataclass(frozen=True)
class AcquisitionParams:
    """Timing of one inversion-recovery acquisition, in milliseconds.

    ``te`` and ``flip_angle_deg`` are carried as metadata only; the signal
    model does not use them.
    """

    tr: float
    ti: float
    te: float = 0.0
    flip_angle_deg: float = 0.0

    def __post_init__(self):
        if not self.tr > 0:
            raise ValueError(f"tr must be positive, got {self.tr}")
        if not self.ti > 0:
            raise ValueError(f"ti must be positive, got {self.ti}")
        if not self.ti < self.tr:
            raise ValueError(f"ti must be below tr, got ti={self.ti}, tr={self.tr}")


@dataclass(frozen=True)
class TissueParams:
    """Per-voxel tissue parameters: T1 in ms, PD in normalized units."""

    t1: float
    pd: float

    def __post_init__(self):
        if not self.t1 > 0:
            raise ValueError(f"t1 must be positive, got {self.t1}")
        if self.pd < 0:
            raise ValueError(f"pd must be nonnegative, got {self.pd}")


def ir_factor(t1, ti, tr):
    """The PD-free part of the signal: 1 - 2*exp(-TI/T1) + exp(-TR/T1).

    Accepts scalars or arrays of T1 (must be > 0).
    """
    t1 = np.asarray(t1, dtype=np.float64)
    return 1.0 - 2.0 * np.exp(-ti / t1) + np.exp(-tr / t1)


def ir_factor_dt1(t1, ti, tr):
    """Derivative of :func:`ir_factor` with respect to T1."""
    t1 = np.asarray(t1, dtype=np.float64)
    return (-2.0 * ti * np.exp(-ti / t1) + tr * np.exp(-tr / t1)) / (t1 * t1)


def ir_signal(tissue: TissueParams, acq: AcquisitionParams) -> float:
    """Signed signal of the inversion-recovery model; no magnitude is taken."""
    return float(tissue.pd * ir_factor(tissue.t1, acq.ti, acq.tr))


def ir_jacobian(tissue: TissueParams, acq: AcquisitionParams):
    """Partial derivatives (dI/dPD, dI/dT1) of :func:`ir_signal`.

    The signal is linear in PD, so dI/dPD is the PD-free factor; dI/dT1
    follows by direct differentiation and matches central finite differences.
    """
    d_pd = float(ir_factor(tissue.t1, acq.ti, acq.tr))
    d_t1 = float(tissue.pd * ir_factor_dt1(tissue.t1, acq.ti, acq.tr))
    return d_pd, d_t1


def null_ti(t1: float, tr: float) -> float:
    """Inversion time at which the signal crosses zero: T1*ln(2/(1+exp(-TR/T1)))."""
    if not t1 > 0 or not tr > 0:
        raise ValueError("t1 and tr must be positive")
    return float(t1 * np.log(2.0 / (1.0 + np.exp(-tr / t1))))


def negate_fgatir(volume: ScalarVolume) -> ScalarVolume:
    """Negate a magnitude image elementwise.

    Scanners store magnitude images; the short-TI acquisition leaves tissue
    with long T1 in negative longitudinal magnetization, so negating the
    magnitude recovers the signed signal the model expects.  Valid only when
    the signed signal is negative throughout the region of interest.
    """
    return volume.with_data(-volume.data)


def default_ti_list():
    """Inversion times 400..1400 ms in 20 ms steps (51 values)."""
    return [float(ti) for ti in range(400, 1401, 20)]


def synthesize_multi_ti(maps: "QuantMaps", tr: float, ti_list=None):
    """Simulate magnitude images from fitted maps over a sweep of TI values.

    Each output voxel is ``|ir_signal(T1(v), PD(v), TI, TR)|``; voxels with
    T1 = 0 (skipped in the fit) synthesize to 0.  Returns one ScalarVolume
    per TI in ``ti_list`` (default :func:`default_ti_list`).
    """
    if ti_list is None:
        ti_list = default_ti_list()
    t1 = maps.t1_map.data
    pd = maps.pd_map.data
    valid = t1 > 0
    safe_t1 = np.where(valid, t1, 1.0)
    out = []
    for ti in ti_list:
        if not 0 < ti < tr:
            raise ValueError(f"ti {ti} outside (0, tr={tr})")
        signal = np.where(valid, np.abs(pd * ir_factor(safe_t1, ti, tr)), 0.0)
        out.append(maps.t1_map.with_data(signal))
    return out
