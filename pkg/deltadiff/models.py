"""Pydantic Models for Variants, Records and Reports"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .tensor import Tensor


class OpKind(str, Enum):
    """Operator kinds of the model graph"""
    CONV2D = "Conv2D"
    DENSE = "Dense"
    BATCH_MATMUL = "BatchMatmul"
    BATCH_NORM = "BatchNorm"
    RELU = "ReLU"
    SOFTMAX = "Softmax"
    ADD = "Add"
    MAX_POOL = "MaxPool"
    AVG_POOL = "AvgPool"
    GLOBAL_AVG_POOL = "GlobalAvgPool"
    RESHAPE = "Reshape"
    CONCAT = "Concat"
    CONSTANT = "Constant"
    SCALE_CHANNELS = "ScaleChannels"
    SLICE = "Slice"
    FUSED_CONV_RELU = "FusedConvReLU"
    FUSED_DENSE_RELU = "FusedDenseReLU"

    @property
    def is_fused(self) -> bool:
        return self in (OpKind.FUSED_CONV_RELU, OpKind.FUSED_DENSE_RELU)


class OptLevel(str, Enum):
    """Optimization bundles (o0 / o2 / o4)"""
    BASIC = "basic"
    DEFAULT = "default"
    EXTENDED = "extended"


class PassId(str, Enum):
    """Individually toggleable graph passes"""
    SIMPLIFY_INFERENCE = "SimplifyInference"
    FUSE_OPS = "FuseOps"
    FOLD_CONSTANTS = "FoldConstants"
    FOLD_SCALE_AXIS = "FoldScaleAxis"
    ELIMINATE_COMMON_SUBEXPR = "EliminateCommonSubexpr"
    CANONICALIZE_OPS = "CanonicalizeOps"
    COMBINE_PARALLEL_OPS = "CombineParallelOps"
    FAST_MATH = "FastMath"

    @classmethod
    def parse(cls, value: str) -> "PassId":
        """Accept the canonical name or its snake_case spelling"""
        key = value.replace("_", "").replace("-", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"Unknown pass: {value}")


class Dialect(str, Enum):
    """Simulated framework dialects a model can be converted into"""
    NATIVE = "native"
    DENSE_AS_BATCH_MATMUL = "dense_as_batch_matmul"
    PRE_FUSED_BATCH_NORM = "pre_fused_batch_norm"


class Backend(str, Enum):
    """Interpreter backends"""
    REFERENCE = "reference"
    OPTIMIZED_LAYOUT = "optimized_layout"


class Verdict(str, Enum):
    """Localization verdicts"""
    NO_DIVERGENCE = "NoDivergence"
    PARAMETER = "ParameterDivergence"
    GRAPH_STRUCTURE = "GraphStructureDivergence"
    ACTIVATION_ONLY = "ActivationOnlyDivergence"


class NoiseSpec(BaseModel):
    """Gaussian parameter noise, clamped, from a counter-based generator"""
    sigma: float = Field(..., ge=0)
    clamp: float = Field(0.011, ge=0)
    seed: int = Field(0, ge=0)
    overrides: Dict[str, float] = Field(default_factory=dict)

    @field_validator("overrides")
    @classmethod
    def _non_negative(cls, v: Dict[str, float]) -> Dict[str, float]:
        for name, sigma in v.items():
            if sigma < 0:
                raise ValueError(f"sigma override for {name} must be >= 0")
        return v

    @property
    def tag(self) -> str:
        if self.sigma == 0 and not self.overrides:
            return "clean"
        return f"noise{self.sigma:g}s{self.seed}"


class VariantSpec(BaseModel):
    """Recipe mapping one source model to one variant model"""
    variant_id: str
    model: str
    dialect: Dialect = Dialect.NATIVE
    noise: Optional[NoiseSpec] = None
    opt_level: OptLevel = OptLevel.BASIC
    enable: List[PassId] = Field(default_factory=list)
    disable: List[PassId] = Field(default_factory=list)
    backend: Backend = Backend.REFERENCE

    @classmethod
    def make_id(
        cls,
        model: str,
        dialect: Dialect,
        noise: Optional[NoiseSpec],
        opt_level: OptLevel,
        backend: Backend,
    ) -> str:
        noise_tag = noise.tag if noise is not None else "clean"
        return ".".join([model, dialect.value, noise_tag, opt_level.value, backend.value])


class FailedVariant(BaseModel):
    """A variant that could not be materialized; a finding, not an error"""
    variant_id: str
    spec: VariantSpec
    error: str
    message: str


class PreprocessSpec(BaseModel):
    """Input normalization: resize, then (x * scale - mean) / std per channel"""
    scale: float = 1.0
    mean: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    std: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    size: Optional[Tuple[int, int]] = None


class RankedLabel(BaseModel):
    label: int = Field(..., ge=0)
    score: float


class ImageResult(BaseModel):
    """One image of one variant's run"""
    variant_id: str
    image_id: str
    topk: List[RankedLabel]
    logits: List[float]
    durations_ns: List[int] = Field(default_factory=list)
    cold_ns: Optional[int] = None

    @property
    def top1(self) -> int:
        return self.topk[0].label

    @property
    def ranking(self) -> List[int]:
        return [r.label for r in self.topk]


@dataclass(frozen=True)
class TraceEntry:
    """Activation of one layer during a debug run"""
    layer_index: int
    node_id: str
    op: str
    activation: Tensor
    duration_ns: int


class ExecutionRecord(BaseModel):
    """Per-image results and timing of one variant over a corpus"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    variant_id: str
    top_k: int = Field(5, ge=1)
    repeats: int = Field(10, ge=1)
    warmup: int = Field(1, ge=0)
    images: List[ImageResult] = Field(default_factory=list)
    traces: Optional[Dict[str, List[TraceEntry]]] = Field(default=None, exclude=True)

    def by_image(self) -> Dict[str, ImageResult]:
        return {image.image_id: image for image in self.images}

    def pooled_durations(self) -> List[int]:
        return [d for image in self.images for d in image.durations_ns]


class ImageTiming(BaseModel):
    cold_ns: Optional[int] = None
    durations_ns: List[int]


class TimingBlock(BaseModel):
    """Contents of a variant's timings.json"""
    variant_id: str
    repeats: int
    warmup: int
    mean_ns: float
    cold_mean_ns: Optional[float] = None
    per_image: Dict[str, ImageTiming]


class ClassBreakdown(BaseModel):
    label: str
    affected: int = Field(..., ge=0)
    total: int = Field(..., ge=0)
    pct: float = Field(..., ge=0, le=100)


class LayerDiff(BaseModel):
    layer_index: int
    node_id: str
    mean: float = Field(..., ge=0)
    max: float = Field(..., ge=0)
    std: float = Field(..., ge=0)


class ParamLayerDiff(BaseModel):
    layer_index: int
    node_id: str
    mean: float = Field(..., ge=0)
    max: float = Field(..., ge=0)


class ParamDiff(BaseModel):
    mean: float = Field(0.0, ge=0)
    max: float = Field(0.0, ge=0)
    count: int = Field(0, ge=0)


class LabelDiffRow(BaseModel):
    image_id: str
    top1_a: int
    top1_b: int
    rbo: float = Field(..., ge=0, le=1)


class TimingComparison(BaseModel):
    """One-way ANOVA over duration groups"""
    group_means_ns: List[float]
    pct_diff: Optional[float] = None
    f_statistic: float = Field(..., ge=0)
    p_value: float = Field(..., ge=0, le=1)
    significant: bool


class DiffReport(BaseModel):
    """Pairwise comparison of two variants"""
    variant_a: str
    variant_b: str
    dissimilarity_pct: float = Field(..., ge=0, le=100)
    mean_rbo: float = Field(..., ge=0, le=1)
    per_class: List[ClassBreakdown] = Field(default_factory=list)
    per_layer: List[LayerDiff] = Field(default_factory=list)
    worst_image_id: Optional[str] = None
    worst_image_layers: List[LayerDiff] = Field(default_factory=list)
    param_diff: Optional[ParamDiff] = None
    param_layers: List[ParamLayerDiff] = Field(default_factory=list)
    structural_differences: List[str] = Field(default_factory=list)
    verdict: Verdict
    onset_layer: Optional[int] = None
    timing: Optional[TimingComparison] = None
    rows: List[LabelDiffRow] = Field(default_factory=list)


class HopVerdict(BaseModel):
    source: str
    target: str
    verdict: Verdict
    dissimilarity_pct: float


class TriangulationResult(BaseModel):
    """Which hop of a source -> intermediate -> target chain diverges first"""
    hops: List[HopVerdict]
    faulty_hop: Optional[int] = None


class PassTiming(BaseModel):
    """One row of the single-pass sweep"""
    pass_id: PassId
    changed: bool
    dissimilarity_pct: float
    comparison: Optional[TimingComparison] = None
