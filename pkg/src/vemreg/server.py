"""vemreg MCP Server.

Exposes scan inspection, visibility error evaluation and registration as
MCP tools. Scans are read from paths on the server's filesystem.
"""

import asyncio
import json
from typing import Any

import numpy as np
from mcp.server import Server
from mcp.server.stdio import stdio_server
from mcp.types import TextContent, Tool

from .config import GlobalConfig, config_from_dict, load_config
from .errors import ValidationError, VemregError, format_exception
from .geometry import RigidTransform
from .multiview import TransformSet, register_multiview
from .pairwise import register_pair
from .scan import load_scan
from .synth import overlap_ratio
from .vem import vem

server = Server("vemreg")


def format_result(data: Any) -> list[TextContent]:
    """Format result as MCP TextContent."""
    if isinstance(data, dict):
        return [TextContent(type="text", text=json.dumps(data, indent=2))]
    return [TextContent(type="text", text=str(data))]


def format_error(error: VemregError) -> list[TextContent]:
    """Format error as MCP TextContent."""
    return [TextContent(type="text", text=json.dumps(error.to_dict(), indent=2))]


TRANSFORM_SCHEMA = {
    "type": "object",
    "description": "Rigid transform mapping scan 2 into scan 1's frame: q = [w, x, y, z], t in mm",
    "properties": {
        "q": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
        "t": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
    },
    "required": ["q", "t"],
}

CONFIG_SCHEMA = {
    "type": "object",
    "description": "Flat config overrides, same keys as the JSON config file (e.g. n_particles, seed)",
}


# =============================================================================
# Tool Definitions
# =============================================================================


@server.list_tools()
async def list_tools() -> list[Tool]:
    """List available tools."""
    return [
        Tool(
            name="describe_scan",
            description="""Describe a partial scan stored as PLY with a camera sidecar.

Returns the point count, the camera (position, view direction, intrinsics),
the bounding box in mm and whether a depth image accompanies the scan.
Use this to check a scan loads before registering it.""",
            inputSchema={
                "type": "object",
                "properties": {
                    "path": {"type": "string", "description": "Path to the scan's .ply file"},
                },
                "required": ["path"],
            },
        ),
        Tool(
            name="compute_vem",
            description="""Compute the visibility error of a candidate alignment.

Each point of one scan, seen from the other scan's camera, is labelled
occluded (O), in front (F) or behind/beside (B). F and B points are
penalised. Returns the label counts and the F and B energies.

Omit the transform to evaluate the scans as they are (identity).""",
            inputSchema={
                "type": "object",
                "properties": {
                    "scan_1": {"type": "string", "description": "Path to the fixed scan"},
                    "scan_2": {"type": "string", "description": "Path to the moving scan"},
                    "transform": TRANSFORM_SCHEMA,
                    "config": CONFIG_SCHEMA,
                },
                "required": ["scan_1", "scan_2"],
            },
        ),
        Tool(
            name="register_pair",
            description="""Globally register scan 2 to scan 1.

Runs the guided particle swarm with Levenberg-Marquardt refinement.
No initial alignment is needed and overlap can be low.
Returns the transform, its visibility error and the per-iteration trace.

This takes seconds to minutes depending on n_particles.""",
            inputSchema={
                "type": "object",
                "properties": {
                    "scan_1": {"type": "string", "description": "Path to the fixed scan"},
                    "scan_2": {"type": "string", "description": "Path to the moving scan"},
                    "config": CONFIG_SCHEMA,
                },
                "required": ["scan_1", "scan_2"],
            },
        ),
        Tool(
            name="register_multiview",
            description="""Register 2 to 6 scans into the first scan's frame.

Registers every pair, composes a candidate for each spanning tree,
keeps the one with the lowest overall visibility error and refines
all transforms jointly. A prior transform set (e.g. from the previous
frame) is offered as one more candidate.""",
            inputSchema={
                "type": "object",
                "properties": {
                    "scans": {
                        "type": "array",
                        "items": {"type": "string"},
                        "minItems": 2,
                        "description": "Scan paths; the first is the reference frame",
                    },
                    "prior": {
                        "type": "object",
                        "description": "Transform set: {\"transforms\": [{q, t}, ...]} for scans 2..M",
                    },
                    "config": CONFIG_SCHEMA,
                },
                "required": ["scans"],
            },
        ),
        Tool(
            name="overlap_ratio",
            description="""Measure how much two scans overlap under a transform.

Returns the fraction of surface seen by both scans (0 to 1), taking the
smaller of the two directions. Omit the transform for identity.""",
            inputSchema={
                "type": "object",
                "properties": {
                    "scan_1": {"type": "string", "description": "Path to the fixed scan"},
                    "scan_2": {"type": "string", "description": "Path to the moving scan"},
                    "transform": TRANSFORM_SCHEMA,
                },
                "required": ["scan_1", "scan_2"],
            },
        ),
    ]


# =============================================================================
# Tool Implementations
# =============================================================================


@server.call_tool()
async def call_tool(name: str, arguments: dict[str, Any]) -> list[TextContent]:
    """Handle tool calls."""
    try:
        if name == "describe_scan":
            return await handle_describe_scan(arguments["path"])
        elif name == "compute_vem":
            return await handle_compute_vem(
                arguments["scan_1"], arguments["scan_2"], arguments.get("transform"), arguments.get("config")
            )
        elif name == "register_pair":
            return await handle_register_pair(arguments["scan_1"], arguments["scan_2"], arguments.get("config"))
        elif name == "register_multiview":
            return await handle_register_multiview(
                arguments["scans"], arguments.get("prior"), arguments.get("config")
            )
        elif name == "overlap_ratio":
            return await handle_overlap_ratio(arguments["scan_1"], arguments["scan_2"], arguments.get("transform"))
        else:
            raise ValidationError(f"Unknown tool: {name}")
    except KeyError as e:
        return format_error(ValidationError(f"Missing required argument: {e.args[0]}"))
    except Exception as e:
        return format_error(format_exception(e))


def _config(overrides: dict[str, Any] | None) -> GlobalConfig:
    cfg = load_config()
    return config_from_dict(overrides, cfg) if overrides else cfg


def _transform(data: dict[str, Any] | None) -> RigidTransform:
    return RigidTransform.from_dict(data) if data else RigidTransform.identity()


async def handle_describe_scan(path: str) -> list[TextContent]:
    """Handle describe_scan tool."""
    scan = await asyncio.to_thread(load_scan, path)
    return format_result(
        {
            "path": path,
            "n_points": len(scan),
            "camera": scan.camera.to_dict(),
            "bounds_min": np.min(scan.points, axis=0).tolist(),
            "bounds_max": np.max(scan.points, axis=0).tolist(),
            "has_depth_grid": scan.depth_grid is not None,
        }
    )


async def handle_compute_vem(
    scan_1: str, scan_2: str, transform: dict[str, Any] | None, config: dict[str, Any] | None
) -> list[TextContent]:
    """Handle compute_vem tool."""
    cfg = _config(config)
    T = _transform(transform)
    P1, P2 = await asyncio.gather(asyncio.to_thread(load_scan, scan_1), asyncio.to_thread(load_scan, scan_2))
    breakdown = await asyncio.to_thread(vem, T, P1, P2, cfg.swarm.f_gate_mm, cfg.swarm.bilinear_max_spread_mm)
    return format_result({"transform": T.to_dict(), **breakdown.to_dict()})


async def handle_register_pair(scan_1: str, scan_2: str, config: dict[str, Any] | None) -> list[TextContent]:
    """Handle register_pair tool."""
    cfg = _config(config)
    P1, P2 = await asyncio.gather(asyncio.to_thread(load_scan, scan_1), asyncio.to_thread(load_scan, scan_2))
    result = await asyncio.to_thread(register_pair, P1, P2, cfg.swarm, cfg.worker_count)
    return format_result(result.to_dict())


async def handle_register_multiview(
    scans: list[str], prior: dict[str, Any] | None, config: dict[str, Any] | None
) -> list[TextContent]:
    """Handle register_multiview tool."""
    if not isinstance(scans, list) or len(scans) < 2:
        raise ValidationError("scans must list at least two paths")
    cfg = _config(config)
    loaded = await asyncio.gather(*(asyncio.to_thread(load_scan, path) for path in scans))
    prior_set = TransformSet.from_dict(prior) if prior else None
    result = await asyncio.to_thread(register_multiview, list(loaded), cfg, prior_set)
    return format_result(result.to_dict())


async def handle_overlap_ratio(scan_1: str, scan_2: str, transform: dict[str, Any] | None) -> list[TextContent]:
    """Handle overlap_ratio tool."""
    T = _transform(transform)
    P1, P2 = await asyncio.gather(asyncio.to_thread(load_scan, scan_1), asyncio.to_thread(load_scan, scan_2))
    ratio = await asyncio.to_thread(overlap_ratio, P1, P2.transformed(T))
    return format_result({"transform": T.to_dict(), "overlap_ratio": ratio})


# =============================================================================
# Server Entry Point
# =============================================================================


async def main_stdio():
    """Run the MCP server over stdio."""
    async with stdio_server() as (read_stream, write_stream):
        await server.run(read_stream, write_stream, server.create_initialization_options())


def create_sse_app():
    """Create a Starlette ASGI app with SSE transport for the MCP server."""
    from starlette.applications import Starlette
    from starlette.routing import Route
    from starlette.responses import JSONResponse
    from mcp.server.sse import SseServerTransport

    sse_transport = SseServerTransport("/mcp/message")

    async def handle_sse(request):
        async with sse_transport.connect_sse(request.scope, request.receive, request._send) as streams:
            await server.run(streams[0], streams[1], server.create_initialization_options())

    async def handle_message(request):
        await sse_transport.handle_post_message(request.scope, request.receive, request._send)

    async def handle_health(request):
        return JSONResponse({"status": "ok", "server": "vemreg"})

    return Starlette(
        routes=[
            Route("/mcp/sse", endpoint=handle_sse),
            Route("/mcp/message", endpoint=handle_message, methods=["POST"]),
            Route("/health", endpoint=handle_health),
        ],
    )


def run():
    """Entry point for running the server. Uses VEMREG_MCP_TRANSPORT to select transport."""
    import os

    transport = os.getenv("VEMREG_MCP_TRANSPORT", "stdio")

    if transport == "sse":
        import uvicorn

        host = os.getenv("VEMREG_MCP_HOST", "0.0.0.0")
        port = int(os.getenv("VEMREG_MCP_PORT", "8080"))
        app = create_sse_app()
        uvicorn.run(app, host=host, port=port)
    else:
        asyncio.run(main_stdio())


if __name__ == "__main__":
    run()
