"""Shared fixtures.

Two converged runs back the suite: a reduced-window smoke run for unit
and property tests (about a minute and a half) and the full acceptance
configuration shared by the acceptance criteria (tens of minutes).  Both
are session-scoped; nothing mutates them.
"""

import numpy as np
import pytest

from rvmret.core import InitialData, p_hat
from rvmret import picard


def free_streaming_batch(init):
    def f_batch(ts, Y, P):
        ts = np.asarray(ts, dtype=float)
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        P = np.atleast_2d(np.asarray(P, dtype=float))
        shift = ts[..., None] if ts.ndim else ts
        return init.value(Y - shift * p_hat(P), P)
    return f_batch


def smoke_spec(**overrides):
    base = dict(t_min=-1.5, t_max=1.5, half_width=3.0, n_t=9, n_x=13,
                history_depth=8.0, table_floor=5.0, outer_floor=8.0,
                cloud_x_nodes=10, cloud_p_nodes=6, max_iterations=3,
                ds_near=0.4, ds_growth=0.2)
    base.update(overrides)
    return picard.QuadratureSpec(**base)


def smoke_init(amplitude=0.10):
    return InitialData(amplitude=amplitude, profile="cubic-bump-drift",
                       core_radius=0.65, drift=(0.0, 0.0, 0.35))


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke_run")
    result = picard.run(smoke_init(), smoke_spec(), out_dir=str(out))
    return result, out


def acceptance_init():
    # outer phase-space radius R = 1; the amplitude puts the first
    # iterate's weighted norm at about 1e-2
    return InitialData(amplitude=0.025, profile="cubic-bump-drift",
                       core_radius=0.65, drift=(0.0, 0.0, 0.35))


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_run")
    result = picard.run(acceptance_init(), picard.QuadratureSpec(),
                        out_dir=str(out))
    return result, out
