import numpy as np
import pytest

from gstransform.config import PipelineConfig
from gstransform.pipeline import Pipeline
from gstransform.synthetic import write_fixture

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def load_fixture_config(fixture_dir, output_dir, seed=None, **sections):
    """Fixture config with ``section={field: value}`` overrides applied."""
    cfg = PipelineConfig.load(fixture_dir / "config.toml")
    cfg.output_dir = str(output_dir)
    for section, values in sections.items():
        if isinstance(values, dict):
            for k, v in values.items():
                setattr(getattr(cfg, section), k, v)
        else:
            setattr(cfg, section, values)
    if seed is not None:
        cfg.apply_seed(seed)
    return PipelineConfig.from_dict(cfg.to_dict())


def run_pipeline(fixture_dir, output_dir, **overrides):
    pipe = Pipeline(load_fixture_config(fixture_dir, output_dir, **overrides), echo=None)
    manifest = pipe.run()
    return pipe, manifest


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """600-record two-aspect corpus with store and config (sample_size 300)."""
    d = tmp_path_factory.mktemp("small_fixture")
    cfg = write_fixture(d, n=600, seed=0)
    cfg.write_text(cfg.read_text().replace("sample_size = 600", "sample_size = 300"))
    return d


@pytest.fixture(scope="session")
def acceptance_fixture(tmp_path_factory):
    d = tmp_path_factory.mktemp("acceptance_fixture")
    write_fixture(d, n=2000, seed=0)
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
