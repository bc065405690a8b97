"""Shared, session-cached fixtures: default data, trained models and benchmark runs."""
import logging
import warnings

import pytest

from ssmpc import bench


@pytest.fixture(scope="session")
def bench_cfg():
    return bench.BenchConfig()


@pytest.fixture(scope="session")
def datasets(bench_cfg):
    return bench.generate_datasets(bench_cfg)


@pytest.fixture(scope="session")
def models(bench_cfg, datasets):
    return bench.train_models(bench_cfg, datasets)


@pytest.fixture(scope="session")
def ssm_model(models):
    return models["SSM-MPC"]


@pytest.fixture(scope="session")
def bench_report(bench_cfg):
    """The full default benchmark, data generation and training included."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        logging.disable(logging.WARNING)
        try:
            return bench.run_benchmark(bench_cfg)
        finally:
            logging.disable(logging.NOTSET)


@pytest.fixture(scope="session")
def design_reports(bench_cfg):
    return bench.run_design_agnostic(bench_cfg)
