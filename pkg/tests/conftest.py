import pytest

from mr2ct import (
    BoostConfig,
    EmConfig,
    PipelineConfig,
    TreeConfig,
    default_phantom_spec,
    generate_phantom,
)


def fast_config(**overrides) -> PipelineConfig:
    """Small-but-real configuration for pipeline-level tests."""
    base = dict(
        neighborhood_order="first",
        j_candidates=((1, 2), (1, 2)),
        em=EmConfig(n_restarts=2, max_iter=150),
        tree=TreeConfig(max_splits=16, min_leaf=5),
        boost=BoostConfig(n_learners=5),
    )
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture(scope="session")
def small_spec():
    return default_phantom_spec(dims=(14, 14, 14))


@pytest.fixture(scope="session")
def small_cohort(small_spec):
    return generate_phantom(small_spec, n_patients=3, seed=42)


@pytest.fixture(scope="session")
def small_datasets(small_cohort):
    return [item.dataset for item in small_cohort]
