"""Experiment runner, variant switchboard, reports and metrics."""

from vbcls.harness.config import PRIOR_MODES, VARIANTS, DataSource, ExperimentConfig, load_config
from vbcls.harness.metrics import (
    aggregate_posterior_gaussian,
    cross_domain_code_divergence,
    fitted_code_gaussian,
)
from vbcls.harness.report import RunReport, TargetResult, emit_report, read_report, summarize
from vbcls.harness.runner import (
    EvalResult,
    SeedResult,
    evaluate,
    load_domains,
    make_predictor,
    run_ablation,
    run_leave_one_out,
    run_variant,
    unused_parameters,
    variant_settings,
)

__all__ = [
    "DataSource", "EvalResult", "ExperimentConfig", "PRIOR_MODES", "RunReport", "SeedResult",
    "TargetResult", "VARIANTS", "aggregate_posterior_gaussian", "cross_domain_code_divergence", "emit_report", "evaluate",
    "fitted_code_gaussian", "load_config", "load_domains", "make_predictor", "read_report",
    "run_ablation", "run_leave_one_out", "run_variant", "summarize", "unused_parameters",
    "variant_settings",
]
