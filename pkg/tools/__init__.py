from .dataset_tool import DatasetTool
from .graph_tool import GraphTool
from .report_tool import ReportTool

__all__ = ["DatasetTool", "GraphTool", "ReportTool"]
