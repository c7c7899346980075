from .ablation import (
    AblationCell,
    AblationContext,
    AblationGrid,
    evaluate,
    spatial_ablation,
    temporal_ablation,
    temporal_windows,
)
from .templates import (
    BuildError,
    RetrievalResult,
    TemplateBank,
    TopKReport,
    build_templates,
    classify,
    cosine_rank,
    retrieve,
    topk_accuracy,
)
