import os

import pytest


def pytest_collection_modifyitems(config, items):
    if os.getenv('NEUROTEXT_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason="desk-scale run; set NEUROTEXT_SLOW=1")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def quiet_progress(monkeypatch):
    monkeypatch.setenv('NEUROTEXT_PROGRESS', '0')
