from .losses import (
    LossBreakdown,
    alignment_objective,
    clip_text_loss,
    contrastive_loss,
    mse_loss_text,
    mse_loss_visual,
    overall_loss,
)
from .training import (
    AlignmentConfig,
    Targets,
    TrainState,
    compute_targets,
    load_train_state,
    new_train_state,
    save_train_state,
    split_validation,
    train,
)
