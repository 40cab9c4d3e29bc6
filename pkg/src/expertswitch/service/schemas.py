from typing import Literal, Optional, Union

from pydantic import BaseModel, Field, model_validator

Scalar = Union[str, int, float, bool, None]


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class SessionCreate(BaseModel):
    """A live learner fed batch by batch. Inputs are flat feature vectors
    unless ``input_shape`` says otherwise."""
    input_shape: list[int] = Field(..., min_length=1)
    n_classes: int = Field(2, ge=2)
    expert_arch: Literal["auto", "mlp", "conv"] = "auto"
    expert_hidden: int = Field(100, ge=1)
    alpha: float = Field(0.2, ge=0, le=1)
    window_size: int = Field(100, ge=2)
    selector_capacity: int = Field(2500, ge=0)
    prune_capacity: int = Field(1000, ge=0)
    lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    seed: int = 0


class BatchRequest(BaseModel):
    x: list[list[float]]
    y: list[int]

    @model_validator(mode="after")
    def _same_length(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have the same number of rows")
        if not self.x:
            raise ValueError("empty batch")
        return self


class StepResponse(BaseModel):
    step: int
    active_expert: int
    raw_loss: float
    smoothed_loss: float
    threshold: Optional[float]
    fired: bool
    event: Literal["none", "switch", "create"]


class SessionState(BaseModel):
    session_id: str
    steps: int
    n_experts: int
    active_expert: int
    smoothed_losses: list[Optional[float]]
    selector_buffer: int
    prune_buffers: dict[int, int]
    finalized: bool


class FinalizeRequest(BaseModel):
    selector_hidden: int = Field(256, ge=1)
    selector_epochs: int = Field(10, ge=0)
    expert_prune_rate: float = Field(0.98, ge=0, lt=1)
    selector_prune_rate: float = Field(0.5, ge=0, lt=1)
    retrain_epochs: int = Field(10, ge=0)


class PredictRequest(BaseModel):
    x: list[list[float]]


class PredictResponse(BaseModel):
    # local class index within the routed expert's head; without task labels
    # the session cannot name global classes
    expert_ids: list[int]
    local_predictions: list[int]


class ExperimentRequest(BaseModel):
    config: dict[str, Scalar] = Field(default_factory=dict)
    sweep_param: Optional[str] = None
    sweep_values: Optional[list[Scalar]] = None


class ExperimentStatus(BaseModel):
    experiment_id: str
    state: Literal["queued", "running", "done", "failed"]
    summary: Optional[dict] = None
    rows: Optional[list[dict]] = None
    out_dir: Optional[str] = None
    error: Optional[str] = None
