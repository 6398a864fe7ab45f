import os
import shutil

import pytest


@pytest.fixture(scope="session")
def cli():
    path = os.environ.get("JOINTSEG_CLI") or shutil.which("jointseg")
    if not path:
        pytest.skip("jointseg CLI not available")
    return path
