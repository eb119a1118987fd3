"""YAML experiment configuration: schema validation, defaults and model construction."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .dynamics import PLANT_PARAMETERS, TWIN_PARAMETERS, ArmParameters, DiscreteLinearModel, DiscreteModel
from .nominal import BoundConstants
from .runtime import ConfigError, RunConfig

SCHEMA_VERSION = 1

# Case-study defaults; every key may be overridden from the config file.
DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "model": {
        "kind": "arm",
        "dt": 0.01,
        "plant": PLANT_PARAMETERS.as_dict(),
        "twin": TWIN_PARAMETERS.as_dict(),
    },
    "nominal": {
        "x0": [0.28, -0.22, 0.0, 0.0],
        "x_goal": [4.0, -1.0, 0.0, 0.0],
        "u_goal": None,
        "Q": [10.0, 10.0, 1.0, 1.0],
        "R": [0.1, 0.1],
        "reference": "quintic",
        "ramp_time": 4.0,
    },
    "run": {
        "N": 600,
        "T": 100,
        "L": 60,
        "x0": [2.28, 1.78, 1.0, -1.0],
        "eps_bar": 0.15,
        "alpha": 0.98,
        "mu": 1.02,
        "alpha0": 0.99,
        "Q0": [10.0, 10.0, 1.0, 1.0],
        "R0": [1.0, 1.0],
        "baseline_mode": "open_loop",
    },
    "constraints": {
        "state_lo": [-5.0, -8.0, -8.0, -7.0],
        "state_hi": [9.0, 8.0, 8.0, 7.0],
        "input_lo": [-40.0, -40.0],
        "input_hi": [40.0, 40.0],
        "x_max": 1e3,
    },
    "constants": {"source": "estimated", "inflation": 1.2, "probe_radius": 0.1, "samples": 200},
    "synthesis": {"cap": 1e3, "rank_tol": 1e-8, "solvers": ["CLARABEL", "SCS"]},
    "verification": {"samples": 1000, "disturbance": 0.0},
    "output": {"dir": "out"},
}

PAPER_OVERRIDES: dict = {
    "model": {"dt": 0.01},
    "run": {"N": 600, "T": 100, "L": 60, "eps_bar": 0.15, "alpha": 0.98, "mu": 1.02},
    "constants": {"source": "paper", "inflation": 1.0},
}


def load_schema() -> dict:
    text = resources.files("ddfunnel").joinpath("schemas/config.schema.json").read_text()
    return json.loads(text)


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("plant", "twin", "values"):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def weight_matrix(w) -> np.ndarray:
    a = np.asarray(w, dtype=float)
    return np.diag(a) if a.ndim == 1 else a


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, user: dict | None = None, paper_constants: bool = False, seed: int | None = None) -> "ExperimentConfig":
        user = user or {}
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
        validate({"schema_version": SCHEMA_VERSION, **user})
        base = DEFAULTS
        if user.get("model", {}).get("kind") == "linear":
            base = {k: v for k, v in DEFAULTS.items() if k != "model"} | {"model": {"kind": "linear", "dt": 1.0}}
        raw = deep_merge(base, user)
        if paper_constants:
            raw = deep_merge(raw, PAPER_OVERRIDES)
        if seed is not None:
            raw["seed"] = int(seed)
        validate(raw)
        cfg = cls(raw)
        cfg.run_config(check_schedule=False)
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, paper_constants: bool = False, seed: int | None = None) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({}, paper_constants, seed)
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(user, paper_constants, seed)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def kind(self) -> str:
        return self.raw["model"]["kind"]

    def models(self):
        mdl = self.raw["model"]
        dt = float(mdl["dt"])
        if self.kind == "arm":
            try:
                plant = DiscreteModel(ArmParameters(**mdl["plant"]), dt)
                twin = DiscreteModel(ArmParameters(**mdl["twin"]), dt)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad arm parameters: {exc}") from None
            return plant, twin
        return self._linear(mdl["plant"], dt), self._linear(mdl["twin"], dt)

    @staticmethod
    def _linear(spec: dict, dt: float) -> DiscreteLinearModel:
        if "A" not in spec or "B" not in spec:
            raise ConfigError("linear model needs A and B")
        offset = spec.get("offset")
        w = None if offset is None else np.asarray(offset, dtype=float)
        return DiscreteLinearModel(spec["A"], spec["B"], (lambda x, u: w) if w is not None else None, dt)

    def nominal_args(self) -> dict:
        nm = self.raw["nominal"]
        return {
            "x0": np.asarray(nm["x0"], dtype=float),
            "x_goal": np.asarray(nm["x_goal"], dtype=float),
            "u_goal": None if nm["u_goal"] is None else np.asarray(nm["u_goal"], dtype=float),
            "N": int(self.raw["run"]["N"]),
            "Q": weight_matrix(nm["Q"]),
            "R": weight_matrix(nm["R"]),
            "reference": nm["reference"] if self.kind == "arm" else "goal",
            "ramp_time": float(nm["ramp_time"]),
        }

    def boxes(self):
        c = self.raw["constraints"]
        arr = lambda key: np.asarray(c[key], dtype=float)  # noqa: E731
        return (arr("state_lo"), arr("state_hi")), (arr("input_lo"), arr("input_hi"))

    def run_config(self, check_schedule: bool = True) -> RunConfig:
        r, s = self.raw["run"], self.raw["synthesis"]
        state_box, input_box = self.boxes()
        kwargs = dict(
            N=int(r["N"]),
            T=int(r["T"]),
            L=int(r["L"]),
            eps_bar=float(r["eps_bar"]),
            alpha=float(r["alpha"]),
            mu=float(r["mu"]),
            dt=float(self.raw["model"]["dt"]),
            seed=self.seed,
            x0=np.asarray(r["x0"], dtype=float),
            state_box=state_box,
            input_box=input_box,
            alpha0=float(r["alpha0"]),
            Q0=weight_matrix(r["Q0"]),
            R0=weight_matrix(r["R0"]),
            x_max=float(self.raw["constraints"]["x_max"]),
            cap=float(s["cap"]),
            rank_tol=float(s["rank_tol"]),
            solvers=tuple(s["solvers"]),
            baseline_mode=r["baseline_mode"],
        )
        if not check_schedule:
            # the nominal command may use horizons shorter than one segment
            kwargs["T"] = min(kwargs["T"], kwargs["N"])
            kwargs["L"] = min(kwargs["L"], kwargs["T"])
        return RunConfig(**kwargs)

    def constants_mode(self) -> str:
        return self.raw["constants"]["source"]

    def fixed_constants(self) -> BoundConstants | None:
        c = self.raw["constants"]
        if c["source"] == "paper":
            return BoundConstants.from_paper()
        if c["source"] == "fixed":
            if "values" not in c:
                raise ConfigError("constants.source = fixed needs constants.values")
            return BoundConstants(**{k: float(v) for k, v in c["values"].items()})
        return None

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output"]["dir"])
