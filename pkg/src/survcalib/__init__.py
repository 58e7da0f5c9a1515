"""Two-stage calibration estimation for Cox models with a sparsely
observed monotone binary covariate.

The package fits a change-time ("calibration") model from interval-censored
measurement data (NPMLE, Weibull, or proportional hazards with a monotone
I-spline cumulative baseline hazard), plugs the implied conditional exposure
probabilities into the Cox partial likelihood (ordinary or risk-set
calibration), and provides sandwich standard errors, naive baselines (LVCF,
midpoint imputation), a Monte-Carlo study harness, and a CLI.
"""

from .data_model import (CensoringInterval, ColumnRoles, Dataset, History,
                         InvalidSubjectError, Subject, build_interval,
                         dataset_from_csv, history_at, midpoint_impute)
from .splines import SplineBasis, equally_spaced_basis, ispline_eval, mspline_eval
from .icfit import (CollinearityError, NpmleFit, PhSplineFit, WeibullFit,
                    fit_npmle, fit_ph_spline, fit_weibull, select_knots,
                    survival_at)
from .calibration import (InconsistentModelError, RiskSetCalibration,
                          mgf_expectation, prob_exposed, rsc_prob_exposed)
from .estimators import (CoxEngineInput, MainFit, cox_fit, fit_lvcf, fit_midi,
                         fit_oc, fit_rsc)
from .inference import (SandwichComponents, a_vector, b_vectors,
                        confidence_interval, sandwich, score_u)
from .simulate import (Scenario, StudySummary, censoring_rate, draw_change_time,
                       draw_covariates, draw_event_time, draw_questionnaires,
                       gen_dataset, run_study)

__version__ = "0.1.0"
