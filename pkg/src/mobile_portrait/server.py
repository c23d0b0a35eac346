"""FastMCP server exposing cost analysis, metrics and rendering tools."""

from mcp.server.fastmcp import FastMCP

from mobile_portrait.config import get_settings


def create_server() -> FastMCP:
    """Create and configure the MCP server with all tools.

    Returns:
        Configured FastMCP server instance.
    """
    from mobile_portrait.tools.analysis import register_analysis_tools
    from mobile_portrait.tools.rendering import register_rendering_tools

    mcp = FastMCP(name=get_settings().server_name)

    # Cost and quality
    register_analysis_tools(mcp)

    # Rendering, bank precompute and benchmarks
    register_rendering_tools(mcp)

    return mcp
