from __future__ import annotations

import numpy as np
import pytest

from ddfunnel.config import ExperimentConfig
from ddfunnel.dynamics import PLANT_PARAMETERS, TWIN_PARAMETERS, DiscreteLinearModel, DiscreteModel
from ddfunnel.experiment import cmd_run
from ddfunnel.geometry import step_envelopes
from ddfunnel.nominal import BoundConstants, estimate_B_bar, plan_nominal_lqr
from ddfunnel.runtime import RunConfig, run_online


def pytest_configure(config):
    config._criteria = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion and print it immediately."""

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config._criteria.append(line)
        print(line)
        return ok

    return record


@pytest.fixture(scope="session")
def plant():
    return DiscreteModel(PLANT_PARAMETERS, 0.01)


@pytest.fixture(scope="session")
def twin():
    return DiscreteModel(TWIN_PARAMETERS, 0.01)


@pytest.fixture(scope="session")
def case_config():
    return RunConfig()


@pytest.fixture(scope="session")
def case_nominal(twin, case_config):
    return plan_nominal_lqr(
        twin,
        [0.28, -0.22, 0.0, 0.0],
        [4.0, -1.0, 0.0, 0.0],
        None,
        600,
        np.diag([10.0, 10.0, 1.0, 1.0]),
        0.1 * np.eye(2),
        state_box=case_config.state_box,
        input_box=case_config.input_box,
    )


@pytest.fixture(scope="session")
def case_envelopes(case_nominal, case_config):
    return step_envelopes(case_nominal.states[:600], case_nominal.inputs, case_config.state_box, case_config.input_box)


@pytest.fixture(scope="session")
def paper_run(plant, twin, case_nominal, case_config, case_envelopes):
    """Arm case study with the reference constants, through the Python API."""
    rep = run_online(plant, twin, case_nominal, case_config, BoundConstants.from_paper(), case_envelopes)
    return rep


@pytest.fixture(scope="session")
def case_B_bar(plant, case_nominal):
    return estimate_B_bar(plant, case_nominal)


# Scalar linear plant with a constant one-step offset: every segment SDP is feasible.
SCALAR_TWIN = dict(A=[[1.02]], B=[[0.1]])
SCALAR_OFFSET = 1e-3


def scalar_models():
    twin = DiscreteLinearModel(SCALAR_TWIN["A"], SCALAR_TWIN["B"])
    plant = DiscreteLinearModel(SCALAR_TWIN["A"], SCALAR_TWIN["B"], offset=lambda x, u: np.array([SCALAR_OFFSET]))
    return plant, twin


def scalar_config(**kw) -> RunConfig:
    base = dict(
        N=300,
        T=100,
        L=60,
        eps_bar=1.0,
        alpha=0.9,
        mu=1.02,
        dt=1.0,
        x0=[1.5],
        state_box=([-5.0], [5.0]),
        input_box=([-20.0], [20.0]),
        Q0=np.eye(1),
        R0=np.eye(1),
        alpha0=0.95,
    )
    base.update(kw)
    return RunConfig(**base)


SCALAR_YAML = {
    "schema_version": 1,
    "seed": 0,
    "model": {
        "kind": "linear",
        "dt": 1.0,
        "plant": {"A": [[1.02]], "B": [[0.1]], "offset": [SCALAR_OFFSET]},
        "twin": {"A": [[1.02]], "B": [[0.1]]},
    },
    "nominal": {"x0": [1.0], "x_goal": [0.0], "u_goal": [0.0], "Q": [1.0], "R": [1.0], "reference": "goal"},
    "run": {"N": 300, "T": 100, "L": 60, "x0": [1.5], "eps_bar": 1.0, "alpha": 0.9, "mu": 1.02, "alpha0": 0.95, "Q0": [1.0], "R0": [1.0]},
    "constraints": {"state_lo": [-5.0], "state_hi": [5.0], "input_lo": [-20.0], "input_hi": [20.0]},
    "constants": {"source": "estimated", "inflation": 1.2},
    "verification": {"samples": 1000, "disturbance": 1.2e-3},
}


@pytest.fixture(scope="session")
def scalar_run():
    from ddfunnel.nominal import estimate_constants

    plant, twin = scalar_models()
    cfg = scalar_config()
    nom = plan_nominal_lqr(twin, [1.0], [0.0], [0.0], 300, np.eye(1), np.eye(1), reference="goal")
    const = estimate_constants(plant, twin, nom, cfg.streams()["estimation"])
    rep = run_online(plant, twin, nom, cfg, const)
    return {"plant": plant, "twin": twin, "cfg": cfg, "nom": nom, "constants": const, "report": rep}


@pytest.fixture(scope="session")
def cli_paper_runs(tmp_path_factory):
    """Two independent CLI runs of the case study with the reference constants (with baseline)."""
    import time

    out = []
    for tag in ("a", "b"):
        d = tmp_path_factory.mktemp(f"paper_{tag}")
        cfg = ExperimentConfig.load(None, paper_constants=True, seed=0)
        t0 = time.perf_counter()
        code = cmd_run(cfg, d, baseline=True)
        out.append({"dir": d, "code": code, "seconds": time.perf_counter() - t0})
    return out
