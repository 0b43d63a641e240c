"""
Result envelope shared by the CLI and the service classes.
"""

from typing import Any, Dict, Optional


def success_response(data: Optional[Dict[str, Any]] = None, message: str = "OK") -> Dict[str, Any]:
    return {
        "ok": True,
        "data": data or {},
        "error": None,
        "message": message,
    }


def error_response(error_code: str, message: str = "An error occurred", data: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "ok": False,
        "data": data or {},
        "error": error_code,
        "message": message,
    }
