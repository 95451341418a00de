"""Flat ``key = value`` configuration with per-voxel-size defaults."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


# Reference parameter sets keyed by voxel size in meters.
TABLE_3D = {0.10: {"lambda_3d": 0.8, "mu_3d": 1.0}, 0.20: {"lambda_3d": 0.4, "mu_3d": 1.6}}


def default_lambda_3d(voxel_size: float) -> float:
    """0.8 at 10 cm and 0.4 at 20 cm; scales as 1/voxel_size in between and beyond."""
    for size, row in TABLE_3D.items():
        if math.isclose(voxel_size, size, rel_tol=1e-9):
            return row["lambda_3d"]
    return 0.08 / voxel_size


def default_mu_3d(voxel_size: float) -> float:
    """1.0 m at 10 cm and 1.6 m at 20 cm; linear in voxel size otherwise (never below 2 voxels)."""
    for size, row in TABLE_3D.items():
        if math.isclose(voxel_size, size, rel_tol=1e-9):
            return row["mu_3d"]
    return max(0.4 + 6.0 * voxel_size, 2.0 * voxel_size)


@dataclass
class Config:
    voxel_size: float = 0.10
    lambda_3d: Optional[float] = None
    mu_3d: Optional[float] = None
    sigma_p: float = 0.5
    tau: float = 1.0 / 6.0
    theta: float = 1.0
    iters_3d: int = 200
    reg_init: str = "data"
    relaxation: str = "standard"
    max_weight: float = 100.0
    max_range: float = 25.0
    min_weight: float = 1.0
    table_size: int = 1 << 16
    memory_cap: Optional[int] = None
    lambda_2d: float = 0.5
    alpha1: float = 1.0
    alpha2: float = 5.0
    beta: float = 1.0
    gamma: float = 4.0
    census_window: int = 5
    d_min: int = 0
    d_max: int = 128
    iters_2d: int = 200
    warps_2d: int = 10
    coupling_start: float = 10.0
    coupling_end: float = 0.001
    fx: Optional[float] = None
    fy: Optional[float] = None
    cx: Optional[float] = None
    cy: Optional[float] = None
    width: Optional[int] = None
    height: Optional[int] = None
    baseline: Optional[float] = None
    seed: int = 0
    threads: int = 1
    sample_surface: bool = False
    data_dir: Optional[str] = None
    output_dir: Optional[str] = None
    reference: Optional[str] = None

    @property
    def effective_lambda_3d(self) -> float:
        return self.lambda_3d if self.lambda_3d is not None else default_lambda_3d(self.voxel_size)

    @property
    def effective_mu_3d(self) -> float:
        return self.mu_3d if self.mu_3d is not None else default_mu_3d(self.voxel_size)

    def validate(self) -> "Config":
        positive = ["voxel_size", "sigma_p", "tau", "max_weight", "max_range", "lambda_2d",
                    "alpha1", "alpha2", "beta", "gamma", "table_size", "threads",
                    "coupling_start", "coupling_end"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive (got {getattr(self, name)!r})")
        for name in ("lambda_3d", "mu_3d", "memory_cap", "fx", "fy", "baseline"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"{name} must be positive (got {value!r})")
        if self.theta < 0 or self.iters_3d < 0 or self.iters_2d < 0 or self.min_weight < 0:
            raise ConfigError("theta, iteration counts and min_weight must be non-negative")
        if self.max_weight < 1:
            raise ConfigError("max_weight must be >= 1")
        if self.census_window < 3 or self.census_window % 2 == 0:
            raise ConfigError("census_window must be an odd integer >= 3")
        if self.d_max < self.d_min:
            raise ConfigError("d_max must be >= d_min")
        if self.reg_init not in ("data", "zero"):
            raise ConfigError("reg_init must be 'data' or 'zero'")
        if self.relaxation not in ("standard", "literal"):
            raise ConfigError("relaxation must be 'standard' or 'literal'")
        return self

    def reg_params(self):
        from .regularizer import RegParams

        return RegParams(lam=self.effective_lambda_3d, sigma_p=self.sigma_p, tau=self.tau, theta=self.theta,
                         iterations=self.iters_3d, init=self.reg_init, relaxation=self.relaxation)

    def fusion_params(self):
        from .fusion import FusionParams

        return FusionParams(mu=self.effective_mu_3d, max_weight=self.max_weight, max_range=self.max_range)

    def stereo_params(self):
        from .stereo import StereoParams

        return StereoParams(lambda_2d=self.lambda_2d, alpha1=self.alpha1, alpha2=self.alpha2, beta=self.beta,
                            gamma=self.gamma, window=self.census_window, d_min=self.d_min, d_max=self.d_max,
                            iterations=self.iters_2d, warps=self.warps_2d,
                            theta_start=self.coupling_start, theta_end=self.coupling_end)

    def camera(self):
        from .camera import CameraModel

        missing = [k for k in ("fx", "fy", "cx", "cy", "width", "height") if getattr(self, k) is None]
        if missing:
            raise ConfigError(f"camera intrinsics missing from config: {', '.join(missing)}")
        return CameraModel(self.fx, self.fy, self.cx, self.cy, int(self.width), int(self.height),
                           self.baseline or 0.0)

    def updated(self, **changes) -> "Config":
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes).validate()


_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(name: str, raw: str):
    kind = str(_TYPES[name])
    if raw.lower() in ("none", ""):
        if "Optional" not in kind:
            raise ConfigError(f"{name} cannot be empty")
        return None
    try:
        if "bool" in kind:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return Config(**values).validate()


def emit_config(config: Config) -> str:
    lines = []
    for f in fields(Config):
        value = getattr(config, f.name)
        lines.append(f"{f.name} = {'none' if value is None else repr(value) if isinstance(value, float) else value}")
    return "\n".join(lines) + "\n"


def load_config(path) -> Config:
    return parse_config(Path(path).read_text(), str(path))
