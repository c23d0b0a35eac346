"""MCP tool groups."""

from mobile_portrait.tools.analysis import register_analysis_tools
from mobile_portrait.tools.rendering import register_rendering_tools

__all__ = [
    "register_analysis_tools",
    "register_rendering_tools",
]
