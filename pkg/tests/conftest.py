import logging

import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _quiet_root_logger():
    # keep setup_logging from attaching handlers to pytest's capture streams
    root = logging.getLogger()
    prev = getattr(root, "_fimlab_logging_configured", False)
    setattr(root, "_fimlab_logging_configured", True)
    yield
    setattr(root, "_fimlab_logging_configured", prev)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
