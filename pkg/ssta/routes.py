"""HTTP API of the run monitor."""
import logging

from flask import Blueprint, jsonify, request

from ssta.auth import api_key_required, check_api_key, unauthorized_response
from ssta.services import APP_VERSION, get_services

logger = logging.getLogger(__name__)

bp = Blueprint("ssta_monitor", __name__)


def _not_found(name: str):
    return jsonify({"success": False, "error": f"Run '{name}' not found"}), 404


@bp.route("/api/health")
def health():
    """Health check endpoint."""
    s = get_services()
    ok = s.runs_dir_ok
    return jsonify({
        "status": "healthy" if ok else "degraded",
        "runs_dir": s.runs_dir,
        "runs_dir_ok": ok,
    })


@bp.route("/api/config")
def public_config():
    """Public client config (no auth)."""
    return jsonify({
        "version": APP_VERSION,
        "api_key_required": api_key_required(),
    })


@bp.route("/api/runs", methods=["GET"])
def list_runs():
    try:
        runs = get_services().list_runs()
        return jsonify({"success": True, "runs": runs, "count": len(runs)})
    except OSError as e:
        logger.exception("listing runs failed")
        return jsonify({"success": False, "error": str(e)}), 500


@bp.route("/api/runs/<name>/metrics", methods=["GET"])
def run_metrics(name):
    s = get_services()
    path = s.run_path(name)
    if path is None:
        return _not_found(name)
    try:
        rows = s.metric_rows(path, node=request.args.get("node"))
        return jsonify({"success": True, "run": name, "metrics": rows, "count": len(rows)})
    except (OSError, KeyError, ValueError) as e:
        logger.exception("reading metrics of %s failed", name)
        return jsonify({"success": False, "error": str(e)}), 500


@bp.route("/api/runs/<name>/log", methods=["GET"])
def run_log(name):
    s = get_services()
    path = s.run_path(name)
    if path is None:
        return _not_found(name)
    try:
        limit = int(request.args.get("limit", 100))
        epoch = request.args.get("epoch")
        epoch = int(epoch) if epoch is not None else None
    except ValueError:
        return jsonify({"success": False, "error": "limit and epoch must be integers"}), 400
    logs = s.run_log(path).get_logs(
        limit=limit,
        node=request.args.get("node"),
        event=request.args.get("event"),
        status=request.args.get("status"),
        epoch=epoch,
        include_debug=request.args.get("include_debug", "true").lower() == "true",
    )
    return jsonify({"success": True, "logs": logs, "count": len(logs)})


@bp.route("/api/runs/<name>/stats", methods=["GET"])
def run_stats(name):
    s = get_services()
    path = s.run_path(name)
    if path is None:
        return _not_found(name)
    return jsonify({"success": True, "run": name, "completed_epochs": s.completed_epochs(path),
                    "stats": s.run_log(path).get_stats()})


def register_routes(app):
    """Attach blueprint and optional API key check for /api/*."""
    @app.before_request
    def _require_api_key():
        p = request.path
        if not p.startswith("/api"):
            return None
        if p in ("/api/health", "/api/config"):
            return None
        if not check_api_key():
            return unauthorized_response()

    app.register_blueprint(bp)
