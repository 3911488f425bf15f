"""Benchmark toolkit for remote-sensing scene classification baselines:
image-statistics and random-convolutional-feature extractors, preprocessing
variants (bilinear resize, four normalization schemes), and KNN evaluation.
"""

__version__ = "0.1.0"

from .raster import (  # noqa: F401
    DatasetManifest,
    Label,
    RasterImage,
    Sample,
    load_raster,
    save_raster,
    select_bands,
)
from .preprocess import (  # noqa: F401
    MinMaxNormalize,
    PercentileClip,
    Reflectance,
    ResizeSpec,
    Standardize,
    apply_pipeline,
    normalize,
    percentile,
    resize_bilinear,
)
from .extractors import (  # noqa: F401
    FeatureMatrix,
    PatchSet,
    RcfBank,
    ZcaModel,
    extract_features,
    image_statistics,
    import_embeddings,
    rcf_extract,
    rcf_init_empirical,
    rcf_init_random,
    sample_patches,
    write_embeddings,
    zca_apply,
    zca_fit,
)
from .evaluation import (  # noqa: F401
    FeatureScaler,
    KnnModel,
    MetricReport,
    apply_scaler,
    evaluate,
    fit_scaler,
    knn_predict_multiclass,
    knn_scores_multilabel,
    mean_average_precision,
    micro_f1,
    overall_accuracy,
)
from .datasets import (  # noqa: F401
    AdapterSpec,
    SyntheticSpec,
    build_manifest,
    compute_channel_stats,
    generate_synthetic,
)
