"""Shared fixtures: small synthetic scans and their filtered versions are
expensive, so they are built once per session."""

import numpy as np
import pytest

from boltpipe.geomfilter import geometry_sensitive_filter
from boltpipe.synth import SynthConfig, generate_scan


@pytest.fixture(scope="session")
def small_scan():
    """~90k point labeled tunnel scan with 6 bolts (plus ground-truth info)."""
    cfg = SynthConfig(length=3.0, point_spacing=0.012, bolt_count=6, seed=11)
    cloud, info = generate_scan(cfg, with_info=True)
    return cfg, cloud, info


@pytest.fixture(scope="session")
def filtered_scan(small_scan):
    """Stage-one output of the small scan, with its stats dict."""
    _, cloud, _ = small_scan
    filtered, stats = geometry_sensitive_filter(cloud)
    return filtered, stats


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
