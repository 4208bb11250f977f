"""Monte Carlo studies of EnKF bias, fluctuations, stability and ergodicity."""
from enkf_lab.harness.core import (STUDIES, HypothesisError, StudyConfig, StudyReport,
                                   config_from_dict, default_config)
from enkf_lab.harness.stats import fit_loglog_slope
from enkf_lab.harness.studies import run_study
