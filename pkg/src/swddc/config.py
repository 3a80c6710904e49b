"""Experiment configuration: a flat YAML mapping validated into ``ExperimentConfig``.

Missing problem-level keys (grid, initial state, noise, prior box, true
parameter) fall back to the registered problem's defaults. Unknown keys are
rejected so that typos do not silently run the wrong experiment.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .benchmarks import PROBLEMS

FILTERS = ("direct", "augpf", "augenkf")
SOLVERS = ("samplewise", "fullgrid")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    problem: str
    name: str = ""
    # grid and truth
    horizon: float | None = None
    n_steps: int | None = None
    x0: list | None = None
    obs_noise_cov: list | None = None
    alpha_true: list | None = None
    alpha_switch_time: float | None = None
    alpha_after_switch: list | None = None
    drone_sigma: float | None = None
    # filter
    filter: str = "direct"
    particles: int = 200
    prior_lower: list | None = None
    prior_upper: list | None = None
    jitter_scale: float = 0.1
    jitter_decay: float = 0.98
    # solver
    solver: str = "samplewise"
    sgd_iterations: int = 2000
    sgd_rho0: float = 0.1
    sgd_l0: float | None = None
    batch_size: int = 1
    sgd_grad_clip: float | None = 100.0
    terminal_increment: bool = False
    mesh_spacing: float = 0.4
    mesh_lower: list | None = None
    mesh_upper: list | None = None
    mc_P: int = 100
    mc_Q: int = 100
    # trials
    trials: int = 20
    seed: int = 0

    def resolved(self) -> "ExperimentConfig":
        """Copy with problem defaults filled in and every field validated."""
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {', '.join(PROBLEMS)}")
        cfg = dataclasses.replace(self)
        for key, value in PROBLEMS[self.problem].defaults.items():
            if getattr(cfg, key) is None:
                setattr(cfg, key, value)
        if not cfg.name:
            cfg.name = self.problem
        _validate(cfg)
        return cfg

    def as_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
        return out

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.as_dict(), sort_keys=False))


_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of keys to values")
    unknown = sorted(set(data) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "problem" not in data:
        raise ConfigError("config is missing the required key 'problem'")
    return ExperimentConfig(**data).resolved()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if data is None:
        raise ConfigError(f"{path} is empty")
    return config_from_dict(data)


def _vec(cfg, key, size=None, positive=False):
    v = getattr(cfg, key)
    try:
        arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be a list of numbers") from exc
    if arr.ndim != 1 or (size is not None and arr.size != size):
        raise ConfigError(f"{key} must be a list of {size} numbers, got {v!r}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{key} must be finite")
    if positive and np.any(arr <= 0):
        raise ConfigError(f"{key} must be positive")
    setattr(cfg, key, arr.tolist())
    return arr


def _validate(cfg: ExperimentConfig) -> None:
    from .benchmarks import get_problem

    prob = get_problem(cfg.problem)
    lq, drone = prob.lq, prob.drone
    d = lq.dim_state if lq is not None else 4
    q = lq.dim_param if lq is not None else 1

    if cfg.filter not in FILTERS:
        raise ConfigError(f"filter must be one of {FILTERS}, got {cfg.filter!r}")
    if cfg.solver not in SOLVERS:
        raise ConfigError(f"solver must be one of {SOLVERS}, got {cfg.solver!r}")
    if cfg.solver == "fullgrid" and d > 2:
        raise ConfigError(f"the fullgrid solver supports d <= 2; {cfg.problem} has d={d}")
    for key in ("particles", "n_steps", "sgd_iterations", "batch_size", "mc_P", "mc_Q", "trials"):
        v = getattr(cfg, key)
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
            raise ConfigError(f"{key} must be a positive integer, got {v!r}")
    if cfg.filter == "augenkf" and cfg.particles < 2:
        raise ConfigError("augenkf needs at least 2 ensemble members")
    if not isinstance(cfg.seed, (int, np.integer)) or isinstance(cfg.seed, bool) or cfg.seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {cfg.seed!r}")
    for key in ("horizon", "sgd_rho0", "mesh_spacing"):
        v = getattr(cfg, key)
        if not isinstance(v, (int, float)) or not v > 0:
            raise ConfigError(f"{key} must be a positive number, got {v!r}")
    if cfg.sgd_l0 is not None and not cfg.sgd_l0 > 0:
        raise ConfigError("sgd_l0 must be positive")
    if cfg.sgd_grad_clip is not None and not cfg.sgd_grad_clip > 0:
        raise ConfigError("sgd_grad_clip must be positive (or null to disable)")
    if not cfg.jitter_scale >= 0:
        raise ConfigError("jitter_scale must be >= 0")
    if not 0 < cfg.jitter_decay <= 1:
        raise ConfigError("jitter_decay must lie in (0, 1]")
    if not isinstance(cfg.terminal_increment, bool):
        raise ConfigError("terminal_increment must be true or false")

    _vec(cfg, "x0", d)
    _vec(cfg, "alpha_true", q)
    lo = _vec(cfg, "prior_lower", q)
    hi = _vec(cfg, "prior_upper", q)
    if np.any(hi <= lo):
        raise ConfigError("prior_upper must exceed prior_lower")
    S = np.asarray(cfg.obs_noise_cov, dtype=np.float64)
    if S.ndim == 0 or S.ndim == 1:
        S = np.diag(np.broadcast_to(np.atleast_1d(S), (d,)))
    if S.shape != (d, d) or not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() < -1e-15:
        raise ConfigError(f"obs_noise_cov must be a symmetric PSD {d}x{d} matrix")
    cfg.obs_noise_cov = S.tolist()
    if cfg.filter == "augpf" and np.linalg.eigvalsh(S).min() <= 0:
        raise ConfigError("augpf needs a positive definite obs_noise_cov")

    dt = cfg.horizon / cfg.n_steps
    if cfg.alpha_switch_time is not None:
        k = cfg.alpha_switch_time / dt
        if abs(k - round(k)) > 1e-9 or not 0 < round(k) < cfg.n_steps:
            raise ConfigError(f"alpha_switch_time {cfg.alpha_switch_time} is not an interior grid point (dt={dt})")
        if cfg.alpha_after_switch is None:
            raise ConfigError("alpha_switch_time needs alpha_after_switch")
        _vec(cfg, "alpha_after_switch", q)
    elif cfg.alpha_after_switch is not None:
        raise ConfigError("alpha_after_switch needs alpha_switch_time")
    if cfg.mesh_lower is not None or cfg.mesh_upper is not None:
        if cfg.mesh_lower is None or cfg.mesh_upper is None:
            raise ConfigError("mesh_lower and mesh_upper must be given together")
        ml, mu = _vec(cfg, "mesh_lower", d), _vec(cfg, "mesh_upper", d)
        if np.any(mu <= ml):
            raise ConfigError("mesh_upper must exceed mesh_lower")
    if cfg.drone_sigma is not None:
        if drone is None:
            raise ConfigError("drone_sigma only applies to the drone problem")
        if not cfg.drone_sigma >= 0:
            raise ConfigError("drone_sigma must be >= 0")
