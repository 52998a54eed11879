import cmath
import math

from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Any, Dict, List, Literal, Optional

BasisName = Literal["energy", "x", "y"]
RunMode = Literal["enumerate", "sample", "integrate", "unravel"]
OutputName = Literal["histogram", "ft_report", "rates", "sweep", "ledger"]


class CnotParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(ge=0.0, le=1.0)  # coherence of rho_S = (I + alpha sigma_x) / 2
    beta_eps: float = Field(ge=0.0)
    epsilon: float = Field(default=1.0, gt=0.0)
    final_basis_s: BasisName = "energy"
    final_basis_e: BasisName = "energy"
    initial_basis_s: Optional[BasisName] = None  # required at alpha = 0

    @property
    def beta(self) -> float:
        return self.beta_eps / self.epsilon

    @property
    def kappa(self) -> float:
        return math.tanh(self.beta_eps / 2)


class MachineParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hw1: float = Field(gt=0.0)
    hw2: float = Field(gt=0.0)
    beta1: float = Field(gt=0.0)
    beta2: float = Field(gt=0.0)
    beta3: float = Field(gt=0.0)
    gamma1: float = Field(default=1.0, gt=0.0)
    gamma2: float = Field(default=1.0, gt=0.0)
    gamma3: float = Field(default=1.0, gt=0.0)

    @property
    def hw3(self) -> float:
        return self.hw1 + self.hw2

    @property
    def equal_rates(self) -> bool:
        return self.gamma1 == self.gamma2 == self.gamma3

    @model_validator(mode="after")
    def check_ordering(self):
        if not (self.beta1 >= self.beta3 >= self.beta2):
            raise ValueError("inverse temperatures must satisfy beta1 >= beta3 >= beta2")
        return self


class CavityParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    omega: float = Field(default=1.0, gt=0.0)
    eps_abs: float = Field(ge=0.0)
    eps_phase: float = 0.0
    gamma0: float = Field(gt=0.0)
    beta: float = Field(gt=0.0)
    n_max: Optional[int] = Field(default=None, ge=1)  # auto-selected from the leakage bound when omitted

    @property
    def epsilon(self) -> complex:
        return cmath.rect(self.eps_abs, self.eps_phase)

    @property
    def alpha(self) -> complex:
        return 2 * self.epsilon / self.gamma0

    @property
    def n_thermal(self) -> float:
        return 1.0 / math.expm1(self.beta * self.omega)


PARAMS_BY_MODEL = {
    "cnot": CnotParams,
    "three_level": MachineParams,
    "cavity": CavityParams,
}

MODES_BY_MODEL = {
    "cnot": ("enumerate", "sample"),
    "three_level": ("integrate", "unravel", "enumerate"),
    "cavity": ("integrate", "unravel"),
}


class SweepSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta1_min: float = Field(default=0.5, gt=0.0)
    beta1_max: float = Field(default=14.0, gt=0.0)
    points: int = Field(default=200, ge=2)


class RunSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: RunMode
    trajectories: int = Field(default=0, ge=0)
    seed: int = Field(default=0, ge=0)
    dt: Optional[float] = Field(default=None, gt=0.0)
    t_final: Optional[float] = Field(default=None, gt=0.0)
    backward_init: Literal["correlated", "product", "reset", "custom"] = "product"
    custom_p_tilde: Optional[List[float]] = None
    custom_q_tilde: Optional[List[float]] = None
    steps: int = Field(default=2, ge=1)  # concatenated one-step maps in three_level enumerate mode
    sweep: Optional[SweepSettings] = None
    method: Literal["step", "waiting_time"] = "step"
    bin_width: Optional[float] = Field(default=None, gt=0.0)
    grid_points: int = Field(default=201, ge=2)
    initial_state: Optional[Literal["ground", "gibbs", "steady"]] = None  # per model and mode, see experiment_service


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: Literal["cnot", "three_level", "cavity"]
    params: Dict[str, Any]
    run: RunSettings
    outputs: List[OutputName] = ["ft_report"]

    def resolved_params(self):
        return PARAMS_BY_MODEL[self.model].model_validate(self.params)
