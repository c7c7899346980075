from .features import (
    BUILTIN_EXTRACTORS,
    FeatureExtractorHandle,
    correlation_matrix,
    feature_distance,
    get_extractor,
    random_projection_extractor,
    rank_generations,
    two_way_identification,
)
from .images import check_pair, list_images, load_image, save_image, to_gray
from .lowlevel import pixcorr, ssim
from .report import TABLE_COLUMNS, MetricReport, compute_report, ranked_reports, write_metric_table, write_pair_dump
