"""Split classifier: frozen feature extractor plus trainable feed-forward head."""
from .backend import (
    BackendError,
    FeatureExtractor,
    FeatureStore,
    OnnxExtractor,
    PooledPixelExtractor,
    RandomConvExtractor,
    StoreExtractor,
    extract_features,
    make_extractor,
    preprocess,
)
from .head import (
    Head,
    ShapeError,
    StaleCacheError,
    build_head,
    head_backward,
    head_forward,
    load_head,
    save_head,
    softmax,
    softmax_xent,
    vgg_template,
)
from .model import SplitModel
from .train import TrainConfig, TrainingError, calibrated_f1, evaluate_head, train_head
