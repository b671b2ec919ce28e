from pydantic import BaseModel, Field, model_validator
from typing import Optional, List, Dict, Any
from enum import Enum

from rfgnn.config import (
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    DEFAULT_WEIGHT_DECAY,
    DEFAULT_DROPOUT,
    DEFAULT_LAYERS,
    DEFAULT_HIDDEN,
    DEFAULT_SGC_POWER,
    DEFAULT_BRANCHES,
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_GAMMA,
    ADAMW_BETA1,
    ADAMW_BETA2,
    ADAMW_EPS,
    SYNTH_NODES,
    SYNTH_CLASSES,
    SYNTH_P_IN,
    SYNTH_P_OUT,
    SYNTH_INFORMATIVE,
    SYNTH_REDUNDANT,
    SYNTH_NOISE,
    SYNTH_CLASS_SEPARATION,
    SYNTH_REDUNDANT_NOISE,
    SYNTH_RELATIONS,
    DEFAULT_CLASS_NAMES,
    FEATURES_FILE,
    EDGES_FILE,
    LABELS_FILE,
    SPLITS_FILE,
    OUTPUT_DIR,
    CHECKPOINT_VERSION,
)


class RunStatus(str, Enum):
    COMPLETED = "completed"
    FAILED = "failed"


class BackboneKind(str, Enum):
    GCN = "gcn"
    SGC = "sgc"
    RGCN = "rgcn"


class Variant(str, Enum):
    """Ensemble variants: E (ensembling only), ES (+ subgraph construction), FULL (+ aligning)"""
    E = "e"
    ES = "es"
    FULL = "full"


class BackboneConfig(BaseModel):
    kind: BackboneKind = BackboneKind.GCN
    layers: int = Field(DEFAULT_LAYERS, ge=1, description="Number of propagation layers")
    hidden: int = Field(DEFAULT_HIDDEN, ge=1, description="Hidden width")
    out_dim: int = Field(DEFAULT_HIDDEN, ge=1, description="Embedding width d")
    dropout: float = Field(DEFAULT_DROPOUT, ge=0.0, lt=1.0)
    sgc_power: int = Field(DEFAULT_SGC_POWER, ge=1, description="Propagation power k for SGC")


class TrainConfig(BaseModel):
    """Hyperparameters of one ensemble training run"""
    alpha: float = Field(DEFAULT_ALPHA, gt=0.0, le=1.0, description="Node sampling rate")
    beta: float = Field(DEFAULT_BETA, gt=0.0, le=1.0, description="Feature selection rate")
    gamma: float = Field(DEFAULT_GAMMA, gt=0.0, le=1.0, description="Edge keeping rate")
    branches: int = Field(DEFAULT_BRANCHES, ge=1, description="Number of base classifiers S")
    epochs: int = Field(DEFAULT_EPOCHS, ge=1)
    lr: float = Field(DEFAULT_LR, gt=0.0)
    weight_decay: float = Field(DEFAULT_WEIGHT_DECAY, ge=0.0)
    dropout: float = Field(DEFAULT_DROPOUT, ge=0.0, lt=1.0)
    beta1: float = Field(ADAMW_BETA1, ge=0.0, lt=1.0)
    beta2: float = Field(ADAMW_BETA2, ge=0.0, lt=1.0)
    eps: float = Field(ADAMW_EPS, gt=0.0)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    select_best_val: bool = False
    master_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _sync_dropout(self):
        # TrainConfig.dropout governs every layer of the branch; an explicit
        # backbone.dropout must agree with it
        if self.backbone.dropout != self.dropout:
            if "dropout" in self.backbone.model_fields_set:
                raise ValueError(
                    f"backbone.dropout={self.backbone.dropout} conflicts with dropout={self.dropout}"
                )
            self.backbone = self.backbone.model_copy(update={"dropout": self.dropout})
        return self


class SyntheticParams(BaseModel):
    """Contextual SBM generator parameters"""
    n: int = Field(SYNTH_NODES, ge=1)
    classes: int = Field(SYNTH_CLASSES, ge=2)
    p_in: float = Field(SYNTH_P_IN, ge=0.0, le=1.0)
    p_out: float = Field(SYNTH_P_OUT, ge=0.0, le=1.0)
    informative_dims: int = Field(SYNTH_INFORMATIVE, ge=0)
    redundant_dims: int = Field(SYNTH_REDUNDANT, ge=0)
    noise_dims: int = Field(SYNTH_NOISE, ge=0)
    class_separation: float = Field(SYNTH_CLASS_SEPARATION, ge=0.0)
    redundant_noise: float = Field(SYNTH_REDUNDANT_NOISE, ge=0.0)
    relations: int = Field(SYNTH_RELATIONS, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_sizes(self):
        if self.n < self.classes:
            raise ValueError(f"n={self.n} must be at least classes={self.classes}")
        if self.redundant_dims > 0 and self.informative_dims == 0:
            raise ValueError("redundant_dims requires informative_dims > 0")
        if self.informative_dims + self.redundant_dims + self.noise_dims == 0:
            raise ValueError("at least one feature dimension is required")
        return self


class DatasetFiles(BaseModel):
    features: str = FEATURES_FILE
    edges: str = EDGES_FILE
    labels: str = LABELS_FILE
    splits: str = SPLITS_FILE


class DatasetManifest(BaseModel):
    """manifest.json of a dataset directory"""
    name: str = "dataset"
    num_nodes: int = Field(..., ge=1)
    num_features: int = Field(..., ge=1)
    num_relations: int = Field(..., ge=1)
    num_classes: int = Field(..., ge=2)
    class_names: List[str] = Field(default_factory=lambda: list(DEFAULT_CLASS_NAMES))
    files: DatasetFiles = Field(default_factory=DatasetFiles)
    source: Optional[Dict[str, Any]] = None  # generator parameters for synthetic data

    @model_validator(mode="after")
    def _check_class_names(self):
        if len(self.class_names) != self.num_classes:
            raise ValueError(
                f"class_names has {len(self.class_names)} entries, num_classes is {self.num_classes}"
            )
        return self


class RunConfig(BaseModel):
    """Everything one CLI invocation needs"""
    dataset: Optional[str] = Field(None, description="Dataset directory")
    synthetic: Optional[SyntheticParams] = Field(None, description="Synthetic generator parameters")
    train: TrainConfig = Field(default_factory=TrainConfig)
    variant: Variant = Variant.FULL
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    out: str = str(OUTPUT_DIR)
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_source(self):
        if (self.dataset is None) == (self.synthetic is None):
            raise ValueError("exactly one of dataset or synthetic must be given")
        return self


class BranchSpecRecord(BaseModel):
    """Serialized BranchSpec with explicit index lists"""
    index: int = Field(..., ge=0)
    seed: int
    aligned: bool
    sampled_nodes: List[int]
    selected_features: List[int]
    remaining_features: List[int]
    kept_edges: List[List[List[int]]] = Field(..., description="Per relation, [src, dst] pairs")


class EnsembleManifest(BaseModel):
    """ensemble.json of an ensemble checkpoint directory"""
    format: str = "rfgnn-ensemble"
    version: int = CHECKPOINT_VERSION
    variant: Variant
    config: TrainConfig
    num_nodes: int
    num_features: int
    num_relations: int
    num_classes: int
    branches: List[BranchSpecRecord]


class Confusion(BaseModel):
    tp: int = Field(0, ge=0)
    tn: int = Field(0, ge=0)
    fp: int = Field(0, ge=0)
    fn: int = Field(0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


class ClassMetrics(BaseModel):
    """One-vs-rest metrics of a single class"""
    label: int
    precision: float = Field(..., ge=0.0, le=1.0)
    recall: float = Field(..., ge=0.0, le=1.0)
    f1: float = Field(..., ge=0.0, le=1.0)


class MetricsReport(BaseModel):
    accuracy: float = Field(..., ge=0.0, le=1.0)
    precision: float = Field(..., ge=0.0, le=1.0)
    recall: float = Field(..., ge=0.0, le=1.0)
    f1: float = Field(..., ge=0.0, le=1.0)
    confusion: Confusion
    per_class: List[ClassMetrics] = Field(default_factory=list)
    branch_accuracies: List[float] = Field(default_factory=list)
    branch_similarity: List[List[float]] = Field(default_factory=list)
    config: Optional[Dict[str, Any]] = None
    variant: Optional[str] = None
    seed: Optional[int] = None


class MetricSummary(BaseModel):
    mean: float
    std: float
    n: int


class RunRecord(BaseModel):
    """Outcome of one seeded run"""
    seed: int
    status: RunStatus
    message: Optional[str] = None
    report: Optional[MetricsReport] = None
