import numpy as np
import pytest

import pushrank.model as model_mod

TRACES: list[list[float]] = []

_descend = model_mod._descend


def _checked_descend(*args, **kwargs):
    U, V, trace = _descend(*args, **kwargs)
    TRACES.append(list(trace))
    diffs = np.diff(trace)
    assert np.all(diffs <= 0), f"loss trace increased: max step {diffs.max()}"
    return U, V, trace


@pytest.fixture(autouse=True)
def monotone_traces(monkeypatch):
    """Every optimizer run inside a test must leave a non-increasing loss trace."""
    monkeypatch.setattr(model_mod, "_descend", _checked_descend)
    yield



def pytest_collection_modifyitems(items):
    # the trace audit must see every training run of the session
    last = [i for i in items if i.name == "test_c9_monotone_traces"]
    items[:] = [i for i in items if i.name != "test_c9_monotone_traces"] + last
