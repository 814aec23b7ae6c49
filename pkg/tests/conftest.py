import pytest

from metastack import _kernels
from metastack.features import SynthSpec, generate_synthetic, impute_marker, partition_by_unit


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    _kernels.warm_up()


@pytest.fixture(scope="session")
def small_plant():
    """3-unit planted dataset, imputed, with partitions."""
    spec = SynthSpec(
        unit_feature_counts=(6, 6, 6),
        n_items=900,
        visit_probabilities=(1.0, 0.5, 0.8),
        signal_strength=0.9,
        class_prior=0.3,
        seed=13,
    )
    ds = impute_marker(generate_synthetic(spec))
    return spec, ds, partition_by_unit(ds)


@pytest.fixture(scope="session")
def full_visit_plant():
    spec = SynthSpec(
        unit_feature_counts=(5, 7),
        n_items=120,
        visit_probabilities=(1.0, 1.0),
        signal_strength=1.0,
        class_prior=0.4,
        seed=3,
    )
    ds = impute_marker(generate_synthetic(spec))
    return spec, ds, partition_by_unit(ds)
