from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from fimlab.expfam import FamilyModel
from fimlab.network import NetworkSpec, ParamSet, init_params, pin_output, resolve_subset


class FamilyConfig(BaseModel):
    family: str = Field(min_length=1, description="bernoulli | normal | poisson | gaussian2 | categorical")
    dim: Optional[int] = Field(default=None, ge=1)

    def build(self) -> FamilyModel:
        return FamilyModel.from_config(self.family, self.dim)


class NetworkConfig(BaseModel):
    layers: List[int] = Field(min_length=2, description="[n0, ..., nL]")
    activation: str = Field(default="tanh")
    family: FamilyConfig
    seed: int = Field(default=0, ge=0, description="weight initialization seed when weights are not given")
    weights: Optional[List[List[List[float]]]] = Field(default=None, description="W_l matrices, bias in the last column")
    x: Optional[List[float]] = Field(default=None, description="input; defaults to a vector of ones")
    p: Optional[List[float]] = Field(default=None, description="pin the head at these mean parameters at x")

    def build(self) -> Tuple[NetworkSpec, ParamSet, np.ndarray]:
        spec = NetworkSpec(layer_sizes=tuple(self.layers), activation=self.activation, family=self.family.build())
        if self.weights is not None:
            params = ParamSet.from_arrays(spec, self.weights)
        else:
            params = init_params(spec, self.seed)
        x = np.ones(spec.layer_sizes[0]) if self.x is None else np.asarray(self.x, dtype=float)
        if self.p is not None:
            params = pin_output(spec, params, x, self.p)
        return spec, params, x


class MCConfig(BaseModel):
    network: NetworkConfig
    estimator: Literal["1", "2", "combined"] = "1"
    alpha: float = 0.5
    N: int = Field(default=10, ge=1, description="samples per estimate")
    R: int = Field(default=1000, ge=1, description="trials")
    seed: int = Field(default=0, ge=0, description="master seed of the sampling streams")
    subset: Optional[List[int]] = None
    eps: List[float] = Field(default_factory=lambda: [0.1, 0.5])

    def build(self) -> Tuple[NetworkSpec, ParamSet, np.ndarray, np.ndarray]:
        spec, params, x = self.network.build()
        return spec, params, x, resolve_subset(spec, self.subset)


class RunOptions(BaseModel):
    seed: int = Field(default=0, ge=0)
    estimator: Literal["1", "2", "combined"] = "1"
    alpha: float = 0.5
    trials: int = Field(default=1000, ge=1)
    samples: int = Field(default=10, ge=1)
    subset: Optional[str] = None
    eps: List[float] = Field(default_factory=lambda: [0.1, 0.5])
    n_list: List[int] = Field(default_factory=lambda: [10, 100, 1000])
    layer: Optional[int] = None
    grid: Optional[List[float]] = None
    target: Optional[List[float]] = None
    reparam: Optional[str] = Field(default=None, description="identity | exp | scale:C, for estimate and variance")
    family: Optional[str] = None
    dim: Optional[int] = Field(default=None, ge=1)
    format: Literal["csv", "json"] = "csv"


class RunManifest(BaseModel):
    tool: str = "fimlab"
    version: str
    command: str
    config: Optional[Dict[str, Any]] = None
    options: Dict[str, Any] = Field(default_factory=dict)
    seed: int = 0
    outputs: List[str] = Field(default_factory=list)
    wall_clock_seconds: float = 0.0
