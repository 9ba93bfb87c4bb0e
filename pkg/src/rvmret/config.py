"""Run configuration: nested YAML in, validated objects out.

Unknown keys are hard errors so a typo cannot silently fall back to a
default.  The snapshot writer emits exactly the keys the parser accepts,
so a saved run directory re-runs as-is.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import yaml

from .core import InitialData
from .errors import ConfigError
from .picard import QuadratureSpec
from .quad import QuadratureSpec as ConeQuadrature

_CONE_KEYS = {
    "p_nodes", "theta_nodes", "phi_nodes", "radial_panel_width",
    "radial_panel_nodes", "fd_source_step", "ode_step", "ode_step_bulk",
    "support_pad", "angular_max_factor",
}
_GRID_KEYS = {"t_min", "t_max", "half_width", "n_t", "n_x"}
_ITER_KEYS = {"tolerance", "max_iterations", "history_depth", "ds_near",
              "ds_growth", "table_floor", "outer_floor", "core_margin",
              "coarse_stride", "cloud_x_nodes", "cloud_p_nodes",
              "flow_step", "support_pad", "memory_cap_gb"}
_INIT_KEYS = {"amplitude", "profile", "core_radius", "drift"}
_DIAG_KEYS = {"decay_probe_count", "decay_probe_reach", "radii",
              "v_window", "sample_count"}
_TOP_KEYS = {"initial_data", "grid", "quadrature", "iteration",
             "diagnostics", "output_dir", "seed", "threads"}


@dataclass
class DiagnosticsPlan:
    decay_probe_count: int = 48
    decay_probe_reach: float = 12.0
    radii: Tuple[float, ...] = (6.0, 8.0, 10.0)
    v_window: Tuple[float, float] = (0.5, 2.5)
    sample_count: int = 200


@dataclass
class RunConfig:
    init: InitialData
    spec: QuadratureSpec
    diagnostics: DiagnosticsPlan = field(default_factory=DiagnosticsPlan)
    output_dir: Optional[str] = None
    seed: int = 0
    threads: int = 1


def _reject_unknown(block: Dict, allowed: set, where: str) -> None:
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _require_mapping(obj, where: str) -> Dict:
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a mapping")
    return obj


def parse_config(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    raw = _require_mapping(raw, "top level")
    _reject_unknown(raw, _TOP_KEYS, "top level")

    init_block = _require_mapping(raw.get("initial_data"), "initial_data")
    _reject_unknown(init_block, _INIT_KEYS, "initial_data")
    if "amplitude" not in init_block:
        raise ConfigError("initial_data.amplitude is required")
    try:
        init = InitialData(
            amplitude=float(init_block["amplitude"]),
            profile=str(init_block.get("profile", "cubic-bump")),
            core_radius=float(init_block.get("core_radius", 1.0)),
            drift=tuple(init_block.get("drift", (0.0, 0.0, 0.0))))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad initial_data: {exc}") from exc

    cone_block = _require_mapping(raw.get("quadrature"), "quadrature")
    _reject_unknown(cone_block, _CONE_KEYS, "quadrature")
    spec = QuadratureSpec()
    try:
        if cone_block:
            base = spec.cone
            cone = ConeQuadrature(**{**{k: getattr(base, k)
                                        for k in _CONE_KEYS}, **cone_block})
            spec.cone = cone
        grid_block = _require_mapping(raw.get("grid"), "grid")
        _reject_unknown(grid_block, _GRID_KEYS, "grid")
        for k, v in grid_block.items():
            setattr(spec, k, type(getattr(spec, k))(v))
        iter_block = _require_mapping(raw.get("iteration"), "iteration")
        _reject_unknown(iter_block, _ITER_KEYS, "iteration")
        for k, v in iter_block.items():
            setattr(spec, k, type(getattr(spec, k))(v))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad numeric block: {exc}") from exc

    diag_block = _require_mapping(raw.get("diagnostics"), "diagnostics")
    _reject_unknown(diag_block, _DIAG_KEYS, "diagnostics")
    plan = DiagnosticsPlan()
    for k, v in diag_block.items():
        if k in ("radii", "v_window"):
            setattr(plan, k, tuple(float(u) for u in v))
        else:
            setattr(plan, k, type(getattr(plan, k))(v))

    seed = int(raw.get("seed", 0))
    spec.seed = seed
    cfg = RunConfig(init=init, spec=spec, diagnostics=plan,
                    output_dir=raw.get("output_dir"),
                    seed=seed, threads=int(raw.get("threads", 1)))
    spec.validate(init)
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r") as fh:
        return parse_config(fh.read())


def config_dict(init: InitialData, spec: QuadratureSpec,
                plan: Optional[DiagnosticsPlan] = None,
                output_dir: Optional[str] = None, seed: int = 0,
                threads: int = 1) -> Dict:
    out = {
        "initial_data": {
            "amplitude": float(init.amplitude),
            "profile": init.profile,
            "core_radius": float(init.core_radius),
            "drift": [float(v) for v in init.drift],
        },
        "grid": {k: getattr(spec, k) for k in sorted(_GRID_KEYS)},
        "quadrature": {k: getattr(spec.cone, k) for k in sorted(_CONE_KEYS)},
        "iteration": {k: getattr(spec, k) for k in sorted(_ITER_KEYS)},
        "seed": seed,
        "threads": threads,
    }
    if plan is not None:
        out["diagnostics"] = {
            "decay_probe_count": plan.decay_probe_count,
            "decay_probe_reach": plan.decay_probe_reach,
            "radii": list(plan.radii),
            "v_window": list(plan.v_window),
            "sample_count": plan.sample_count,
        }
    if output_dir is not None:
        out["output_dir"] = output_dir
    return out


def save_snapshot(path: str, init: InitialData, spec: QuadratureSpec,
                  plan: Optional[DiagnosticsPlan] = None, seed: int = 0,
                  threads: int = 1) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_dict(init, spec, plan, None, seed, threads),
                       fh, sort_keys=False)
