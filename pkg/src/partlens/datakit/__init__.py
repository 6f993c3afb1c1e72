"""Per-part image datasets: cropping, scraping, cleaning, splitting."""
from .augment import augment_once, balance_augment
from .crop import FILL, crop_part, square_extent
from .dataset import (
    BBox,
    DatasetError,
    ImageSample,
    PartDataset,
    load_rgb,
    read_manifest,
    save_png,
    write_manifest,
)
from .hashing import dedupe, hamming, phash
from .ingest import crops_from_annotations, ingest, samples_from_folders
from .outliers import pca_scores, remove_outliers
from .pipeline import BuildConfig, build_and_write, build_dataset, flag_outliers, pooled_features
from .scrape import DEFAULT_LIMITS, EngineClient, LocalFolderEngine, ScrapeError, scrape_part
from .split import DEFAULT_RATIOS, split
