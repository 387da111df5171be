"""This module contains the schemas invtrain reads and writes as JSON."""

from enum import StrEnum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

MAX_DAG_NODES = 10
MAX_CARDINALITY = 4


class AblationMode(StrEnum):
    """Loss configurations compared by the ablation runner."""

    V1 = "V1"
    V2 = "V2"
    V3 = "V3"
    FULL = "FULL"


class Split(StrEnum):
    """Dataset splits."""

    TRAIN = "train"
    TEST = "test"


class StrictModel(BaseModel):
    """Base schema: unknown keys are errors."""

    model_config = ConfigDict(extra="forbid")


# Synthetic data


class ChipSpec(StrictModel):
    """Schema describing a synthetic chip dataset."""

    side: int = Field(32, description="Chip side length in pixels (even, >= 16)")
    num_classes: int = Field(10, ge=2, description="Number of classes C; also the number of clutter environments")
    shots_per_class: int = Field(10, ge=1, description="Training chips per class K")
    test_per_class: int = Field(50, ge=1, description="Test chips per class")
    confound_strength: float = Field(
        0.95, ge=0.0, le=1.0, description="Probability that a training chip uses its class's home environment"
    )
    speckle_looks: Optional[float] = Field(
        4.0, description="Gamma speckle shape L (>= 1); null disables speckle (the L -> infinity limit)"
    )
    clutter_amplitude: float = Field(1.5, ge=0.0, description="Peak intensity of the clutter patch")
    noise_floor: float = Field(0.05, ge=0.0, description="Mean of the exponential additive noise floor")
    jitter: int = Field(1, ge=0, description="Maximum template placement offset in pixels")
    seed: int = Field(0, ge=0, description="Root seed of every random stream")

    @field_validator("side")
    @classmethod
    def validate_side(cls, value: int) -> int:
        """The network halves the chip once, so the side must be even."""
        if value < 16 or value % 2:
            raise ValueError("side must be an even number >= 16")
        return value

    @field_validator("speckle_looks")
    @classmethod
    def validate_looks(cls, value: Optional[float]) -> Optional[float]:
        """Validate the speckle shape parameter."""
        if value is not None and value < 1:
            raise ValueError("speckle_looks must be >= 1 (or null to disable speckle)")
        return value


class SampleRecord(StrictModel):
    """One chip in the tensor file."""

    sample_id: int = Field(..., ge=0)
    split: Split
    label: int = Field(..., ge=0)
    offset: int = Field(..., ge=0, description="Byte offset of the chip in the tensor file")


class Diagnostics(StrictModel):
    """Ground truth that training never reads."""

    home_environments: list[int] = Field(..., description="Home environment of each class")
    environments: list[int] = Field(..., description="Environment drawn for each sample id")


class DatasetManifest(StrictModel):
    """Description of a generated dataset and its tensor file."""

    spec: ChipSpec
    splits: dict[Split, int]
    records: list[SampleRecord]
    tensor_file: str = Field("chips.f32", description="Raw little-endian float32 [N, 1, side, side], C order")
    checksum: int = Field(..., description="CRC-32 of the tensor file")
    diagnostics: Diagnostics

    @model_validator(mode="after")
    def validate_records(self):
        """Check id contiguity, offset ordering and per-class shot counts."""
        ids = [record.sample_id for record in self.records]
        if ids != list(range(len(ids))):
            raise ValueError("sample ids must be unique and contiguous from 0")
        offsets = [record.offset for record in self.records]
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValueError("record offsets must be strictly increasing")
        for label in range(self.spec.num_classes):
            shots = sum(1 for r in self.records if r.split == Split.TRAIN and r.label == label)
            if shots != self.spec.shots_per_class:
                raise ValueError(f"class {label} has {shots} training records, expected {self.spec.shots_per_class}")
        for split, count in self.splits.items():
            if count != sum(1 for r in self.records if r.split == split):
                raise ValueError(f"split size of {split} does not match its records")
        if len(self.diagnostics.environments) != len(self.records):
            raise ValueError("diagnostics must hold one environment per record")
        return self


# Training


class TrainConfig(StrictModel):
    """Schema for a training run."""

    epochs: int = Field(60, ge=1, description="Total epochs")
    warmup_epochs: int = Field(10, ge=0, description="Cross-entropy-only epochs before proxies exist")
    batch_size: int = Field(32, ge=2)
    lr0: float = Field(0.01, gt=0.0, description="Initial learning rate")
    lr_decay: float = Field(0.1, gt=0.0, le=1.0, description="Multiplicative decay per lr_step epochs")
    lr_step: int = Field(25, ge=1)
    k_n: int = Field(3, ge=1, description="Number of noise environments per anchor class")
    rho: float = Field(2.0, ge=0.0, description="Instance-weight exponent")
    epsilon: float = Field(0.05, gt=0.0, description="Relative-change threshold of the instance-weight gate")
    alpha: float = Field(1.0, ge=0.0, le=1.0, description="Spatial reweighting strength for correct predictions")
    margin: float = Field(0.3, description="Carried for completeness; no loss term reads it")
    supcon_temperature: float = Field(0.5, gt=0.0, description="Temperature of the V3 contrastive loss")
    hidden_channels: int = Field(8, ge=1)
    c_feat: int = Field(16, ge=1, description="Channels of the final feature map")
    mode: AblationMode = AblationMode.FULL
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def validate_schedule(self):
        """Warmup must fit inside the run."""
        if self.epochs < self.warmup_epochs:
            raise ValueError("epochs must be >= warmup_epochs")
        return self


class FeatureSeparation(StrictModel):
    """Numeric summary of how the learned features cluster."""

    intra_class_cosine: float = Field(..., description="Mean cosine between a feature and its class mean")
    inter_class_cosine: float = Field(..., description="Mean cosine between distinct class means")


class Metrics(StrictModel):
    """Classification metrics derived from a confusion matrix."""

    accuracy: float
    recall: list[float]
    precision: list[float]
    f1: list[float]
    macro_recall: float
    macro_precision: float
    macro_f1: float
    per_class_accuracy: list[float]
    confusion: list[list[int]] = Field(..., description="Rows are true labels, columns predictions")
    feature_separation: Optional[FeatureSeparation] = None


# Causal graphs


class NodeSpec(StrictModel):
    """A discrete variable."""

    name: str = Field(..., min_length=1)
    cardinality: int = Field(..., ge=1, le=MAX_CARDINALITY)


class DagDocument(StrictModel):
    """JSON description of a discrete causal DAG.

    CPT axes are the node's parents, in the order their edges appear in ``edges``,
    followed by the node itself.
    """

    nodes: list[NodeSpec] = Field(..., min_length=1, max_length=MAX_DAG_NODES)
    edges: list[tuple[str, str]] = Field(default_factory=list)
    cpts: dict[str, list] = Field(..., description="Conditional probability table per node, as nested arrays")

    @model_validator(mode="after")
    def validate_names(self):
        """Node names are unique and every edge and CPT refers to a declared node."""
        names = [node.name for node in self.nodes]
        if len(set(names)) != len(names):
            raise ValueError("node names must be unique")
        for parent, child in self.edges:
            if parent not in names or child not in names:
                raise ValueError(f"edge {parent}->{child} names an undeclared node")
        if set(self.cpts) != set(names):
            raise ValueError("exactly one CPT per node is required")
        return self


class StateReport(StrictModel):
    """Distributions of the outcome for one treatment state."""

    value: int
    adjusted: Optional[list[float]] = Field(None, description="Backdoor estimate; null when the criterion fails")
    interventional: list[float]
    observational: list[float]


class ScmReport(StrictModel):
    """Result of a causal check."""

    treatment: str
    outcome: str
    adjust: list[str]
    backdoor_criterion: bool
    confounding_gap: float
    states: list[StateReport]


class ScmCheckRequest(StrictModel):
    """Body of POST /scm/check."""

    graph: DagDocument
    treatment: str = Field(..., examples=["X"])
    outcome: str = Field(..., examples=["Y"])
    adjust: list[str] = Field(default_factory=list, examples=[["N"]])
    value: Optional[int] = Field(None, ge=0, description="Treatment state; every state when omitted")


# Inference


class CheckpointHeader(StrictModel):
    """JSON header line of a checkpoint file."""

    format: str = "invtrain-checkpoint-1"
    side: int
    num_classes: int
    hidden_channels: int
    c_feat: int
    parameters: list[tuple[str, list[int]]] = Field(..., description="Registry order: name and shape")
    config: Optional[TrainConfig] = None


class PredictRequest(StrictModel):
    """Body of POST /predict."""

    image: list[list[float]] = Field(..., description="Single-channel chip, side x side")


class PredictResponse(StrictModel):
    """Prediction with its class activation mask."""

    label: int
    logits: list[float]
    mask: list[list[float]]
