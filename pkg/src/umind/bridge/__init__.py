from .bundle import (
    ConditionBundle,
    dumps_bundles,
    export_conditions,
    load_bridge_model,
    loads_bundles,
    read_bundles,
    save_bridge_model,
    write_bundles,
)
from .prior import DiffusionPrior, PriorConfig, cosine_alpha_bar, init_prior, prior_loss, prior_predict, train_prior
from .qformer import (
    FitConfig,
    QFormer,
    QFormerConfig,
    init_qformer,
    qformer_cross_attention,
    qformer_ffn,
    qformer_forward,
    qformer_loss,
    qformer_self_attention,
    tokenize,
    train_qformer,
)
