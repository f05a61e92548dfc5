"""Services for cfgpilot."""

from .pipeline_service import PipelineService

__all__ = ['PipelineService']
