"""Synthetic corpora, end-to-end experiments and comparison reports."""

from .corpus import Corpus, CorpusSpec, generate_corpus, speaker_distortion
from .experiment import (OUTPUT_ROOT_ENV, SERIES_HEADER, EvalReport, ExperimentError, build_network_spec,
                         config_hash, default_config, evaluate, load_config, prepare, resolve_config,
                         run_experiment, train_network, with_overrides)
from .pipeline import FeatureOptions, FeaturePipeline
from .drivers import DRIVERS, driver_arms, run_driver
from .report import IncomparableReports, comparison_table, emit_report, read_plot_data, write_plot_data
