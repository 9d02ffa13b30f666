from .dataset import Dataset, Sample, dataset_to_csv, load_dataset, save_dataset
from .sampling import Batch, FoldAssignment, augment_features, make_batches, stratified_kfold
from .synthetic import SyntheticSpec, appendix_template, generate_synthetic, load_spec, parse_spec_text

__all__ = [
    "Batch",
    "Dataset",
    "FoldAssignment",
    "Sample",
    "SyntheticSpec",
    "appendix_template",
    "augment_features",
    "dataset_to_csv",
    "generate_synthetic",
    "load_dataset",
    "load_spec",
    "make_batches",
    "parse_spec_text",
    "save_dataset",
    "stratified_kfold",
]
