"""Open-world semantic and panoptic segmentation: losses, post-processing and metrics."""

from .core import LossWeights
from .descriptors import DescriptorBank
from .errors import OWSegError
from .evaluate import EvalConfig, Sample, Task, evaluate_task
from .postprocess import DiscoveryConfig, DiscoveryState, PipelineConfig, run_pipeline

__all__ = [
    "DescriptorBank",
    "DiscoveryConfig",
    "DiscoveryState",
    "EvalConfig",
    "LossWeights",
    "OWSegError",
    "PipelineConfig",
    "Sample",
    "Task",
    "evaluate_task",
    "run_pipeline",
]

__version__ = "0.1.0"
