"""Experiment harness: synthetic data, training, benchmarking, fixtures and the CLI."""

from .bench import BenchConfig, bench_route, write_bench_csv
from .config import DataSpec, ExperimentConfig, ModelConfig, OptimConfig
from .data import Dataset, generate_synthetic_task
from .golden import compare_golden, golden_instance, golden_outputs, write_golden
from .gradcheck import gradient_checks
from .train import TrainingDiverged, TrainResult, ablate_softmax_combine, load_checkpoint, train
