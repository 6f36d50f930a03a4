"""Strict run configuration with per-field error messages.

A config file (YAML or JSON) has five sections::

    environment:  variant, alpha, C, H, physics
    kernel:       family, lengthscale, smoothness, degree, rescale_bounds
    data:         n1, n2, noise_sigma, behavior, seed
    algorithm:    nu, lam, norm_bound, delta, B, c_B, R_Q, beta_scale, fold_scheme
    evaluation:   M, grid_resolution, n1_grid, n2_grid, seeds, master_seed

Unknown keys anywhere are an error. ``nu`` and ``lam`` left unset resolve to
``1 + 1/N1`` and ``1 + 1/N`` once the data size is known.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

from udskernel.envs import CARTPOLE_BOUNDS, make_env
from udskernel.exceptions import InputError
from udskernel.experiment import PipelineSettings
from udskernel.kernels import KernelSpec


class ConfigError(InputError):
    """Configuration failed validation; the message names the offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Physics(_Strict):
    gravity: Optional[PositiveFloat] = None
    masscart: Optional[PositiveFloat] = None
    masspole: Optional[PositiveFloat] = None
    length: Optional[PositiveFloat] = None
    force_mag: Optional[PositiveFloat] = None
    tau: Optional[PositiveFloat] = None


class EnvironmentSection(_Strict):
    variant: Literal["ring-gaussian", "cart-pole"] = "ring-gaussian"
    alpha: Optional[PositiveFloat] = None
    C: Optional[PositiveInt] = None
    H: Optional[PositiveInt] = None
    physics: Optional[Physics] = None

    @model_validator(mode="after")
    def _variant_fields(self):
        if self.variant == "ring-gaussian" and self.physics is not None:
            raise ValueError("physics overrides apply to cart-pole only")
        if self.variant == "cart-pole" and (self.alpha is not None or self.C is not None):
            raise ValueError("alpha and C apply to ring-gaussian only")
        return self


class KernelSection(_Strict):
    family: Literal["squared-exponential", "matern", "explicit-features"] = "squared-exponential"
    lengthscale: PositiveFloat = 1.0
    smoothness: Literal[0.5, 1.5, 2.5] = 2.5
    degree: Literal[1, 2, 3] = 1
    rescale_bounds: Optional[tuple[PositiveFloat, PositiveFloat, PositiveFloat, PositiveFloat]] = None


class DataSection(_Strict):
    n1: PositiveInt = 10
    n2: int = Field(10, ge=0)
    noise_sigma: float = Field(0.0, ge=0)
    behavior: Literal["uniform"] = "uniform"
    seed: int = Field(0, ge=0)


class AlgorithmSection(_Strict):
    nu: Optional[PositiveFloat] = None
    lam: Optional[PositiveFloat] = None
    norm_bound: float = Field(1.0, ge=0)
    delta: float = Field(0.1, gt=0, lt=1)
    B: Optional[PositiveFloat] = None
    c_B: PositiveFloat = 1.0
    R_Q: PositiveFloat = 2.0
    beta_scale: float = Field(1.0, ge=0)
    fold_scheme: Literal["shuffled", "contiguous"] = "shuffled"


class EvaluationSection(_Strict):
    M: PositiveInt = 1000
    grid_resolution: int = Field(512, ge=2)
    n1_grid: list[PositiveInt] = Field(default_factory=lambda: [10, 20, 50, 100], min_length=1)
    n2_grid: list[PositiveInt] = Field(default_factory=lambda: [10, 20, 50, 100, 200, 500], min_length=1)
    seeds: PositiveInt = 5
    master_seed: int = Field(0, ge=0)


class RunConfig(_Strict):
    environment: EnvironmentSection = EnvironmentSection()
    kernel: KernelSection = KernelSection()
    data: DataSection = DataSection()
    algorithm: AlgorithmSection = AlgorithmSection()
    evaluation: EvaluationSection = EvaluationSection()

    @model_validator(mode="after")
    def _cross_section(self):
        if self.kernel.rescale_bounds is not None and self.environment.variant != "cart-pole":
            raise ValueError("kernel.rescale_bounds applies to cart-pole only")
        return self

    # -- construction ---------------------------------------------------

    @classmethod
    def from_mapping(cls, data) -> "RunConfig":
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping of sections")
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(_format_errors(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from None
        return cls.from_mapping(data)

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Override both the data seed and the sweep master seed."""
        if seed is None:
            return self
        data = self.model_dump()
        data["data"]["seed"] = seed
        data["evaluation"]["master_seed"] = seed
        return RunConfig.from_mapping(data)

    # -- resolved objects -------------------------------------------------

    def env_dict(self) -> dict:
        e = self.environment
        if e.variant == "ring-gaussian":
            C = e.C or 8
            cfg = {"variant": e.variant, "alpha": e.alpha or 3.0, "C": C, "H": e.H or C}
        else:
            cfg = {"variant": e.variant, "H": e.H or 20}
            if e.physics is not None:
                cfg.update(e.physics.model_dump(exclude_none=True))
            cfg["bounds"] = list(self.kernel.rescale_bounds or CARTPOLE_BOUNDS)
        return cfg

    def make_env(self):
        return make_env(self.env_dict())

    def kernel_spec(self, ambient_dim: Optional[int] = None) -> KernelSpec:
        k = self.kernel
        dim = ambient_dim if ambient_dim is not None else self.make_env().embed_dim
        return KernelSpec(k.family, ambient_dim=dim, lengthscale=k.lengthscale, smoothness=k.smoothness, degree=k.degree)

    def pipeline_settings(self) -> PipelineSettings:
        a = self.algorithm
        return PipelineSettings(
            env_cfg=self.env_dict(),
            kernel=self.kernel_spec(),
            noise_sigma=self.data.noise_sigma,
            nu=a.nu,
            lam=a.lam,
            norm_bound=a.norm_bound,
            delta=a.delta,
            beta_scale=a.beta_scale,
            B=a.B,
            c_B=a.c_B,
            R_Q=a.R_Q,
            fold_scheme=a.fold_scheme,
            M=self.evaluation.M,
        )

    def fingerprint(self) -> str:
        """SHA-256 of the resolved environment, kernel and algorithm sections."""
        payload = {
            "environment": self.env_dict(),
            "kernel": self.kernel_spec().to_dict(),
            "algorithm": self.algorithm.model_dump(),
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)
