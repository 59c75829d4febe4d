from .datagen import GridDataset, generate
from .partitioner import ConnectivityGraph, partition

__all__ = ["ConnectivityGraph", "GridDataset", "generate", "partition"]
