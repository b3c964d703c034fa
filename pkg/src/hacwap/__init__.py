"""Weighted-average-power tests for the coefficient of a single endogenous
regressor with heteroskedastic and autocorrelated errors."""

from .critical import (
    CriticalSolution,
    SimBank,
    TestReport,
    ar_test,
    cqlr_test,
    lm_test,
    lu_multipliers,
    posu_test,
    power_envelope,
    su_solve,
    wap_lu_test,
    wap_similar_test,
    wap_su_test,
)
from .harness import DesignSpec, PowerCurve, build_sigma, run_power, run_size_audit
from .model import DataError, IVData, ReducedForm, STPair, compute_st, reduced_form
from .numerics import DegeneracyError, DomainError, KroneckerFactors, nearest_kronecker
from .simplex import SolverError
from .statistics import WeightSpec, h1_density, h2_density, wap_statistic

__version__ = "0.1.0"
