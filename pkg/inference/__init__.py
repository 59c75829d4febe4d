from .factor_graph import FactorGraph, InferenceResult, run_inference, schedule, validate

__all__ = ["FactorGraph", "InferenceResult", "run_inference", "schedule", "validate"]
