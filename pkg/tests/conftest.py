import numpy as np
import pytest

from viewset.data import SyntheticConfig, generate_synthetic, split
from viewset.encoder import EncoderConfig
from viewset.head import HeadConfig
from viewset.initializer import InitializerConfig
from viewset.model import ViewSetModel


def tiny_model(feature_dim=6, dim=8, heads=2, blocks=1, classes=3, seed=0, dropout=0.0, hidden=8, **enc):
    return ViewSetModel(InitializerConfig("precomputed", dim, feature_dim),
                        EncoderConfig(blocks, heads, dim, dropout_rate=dropout, **enc),
                        HeadConfig(classes, decoder_hidden=(hidden,)), np.random.default_rng(seed))


@pytest.fixture
def small_data():
    ds = generate_synthetic(SyntheticConfig(num_classes=3, subclasses=2, shapes_per_class=10, views=6,
                                          feature_dim=6, seed=1))
    return ds, split(ds, (0.6, 0.2, 0.2), seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
