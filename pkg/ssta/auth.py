"""Optional API key for the monitor's /api routes.

The key comes from SSTA_API_KEY, or else from ``api_key`` in the runs
directory's settings.json. An empty key disables the check.
"""
import hmac
import os
from typing import Optional

from flask import jsonify, request

from ssta.services import get_services


def get_configured_api_key() -> str:
    env_key = (os.getenv("SSTA_API_KEY") or "").strip()
    if env_key:
        return env_key
    return str(get_services().settings.get("api_key") or "").strip()


def api_key_required() -> bool:
    return bool(get_configured_api_key())


def _presented_key() -> Optional[str]:
    header = request.headers.get("X-API-Key", "").strip()
    if header:
        return header
    auth = request.headers.get("Authorization", "").strip()
    if auth.lower().startswith("bearer "):
        return auth[7:].strip()
    return None


def check_api_key() -> bool:
    """True if auth is disabled or the request carries the key."""
    expected = get_configured_api_key()
    if not expected:
        return True
    presented = _presented_key()
    return presented is not None and hmac.compare_digest(presented.encode(), expected.encode())


def unauthorized_response():
    return jsonify({
        "success": False,
        "error": "Unauthorized. Provide X-API-Key or Authorization: Bearer <key>."
    }), 401
