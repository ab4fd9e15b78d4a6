#!/usr/bin/env python
"""Run the DLO Shape Workbench MCP server."""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

print("Starting MCP server...", file=sys.stderr)

try:
    from src.dlo_workbench.server import mcp
    mcp.run(transport="stdio")
except Exception as e:
    print(f"Error: {e}", file=sys.stderr)
    import traceback
    traceback.print_exc(file=sys.stderr)
    sys.exit(1)
