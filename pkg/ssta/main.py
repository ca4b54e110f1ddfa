"""Flask application for the run monitor."""
import os

from flask import Flask

from ssta.routes import register_routes
from ssta.services import init_services


def create_app(runs_dir: str) -> Flask:
    init_services(runs_dir)
    app = Flask(__name__)
    app.config["JSONIFY_PRETTYPRINT_REGULAR"] = True
    register_routes(app)
    return app


if __name__ == "__main__":
    create_app(os.environ.get("SSTA_RUNS_DIR", "runs")).run(host="127.0.0.1", port=5010)
