import os
import sys

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")
torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@pytest.fixture(scope="session")
def desk_small():
    from doeforge.optics import CameraConfig

    return CameraConfig.desk(features=32, crop=17)
