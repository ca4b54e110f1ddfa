"""Layered run settings: defaults, then a JSON file, then environment overrides."""
import json
import logging
import os
from typing import Dict, Optional

logger = logging.getLogger(__name__)

# Full scale for reference: 128 hidden channels, 5x5 kernels inside the
# recurrent unit, 10 evaluated prediction steps, 100 epochs.
PRESETS: Dict[str, Dict] = {
    "desk": {
        "hidden_channels": 8,
        "msg_dim": 16,
        "kernel_size": 3,
        "horizon": 5,
        "epochs": 40,
        "lr": 1e-3,
        "batch_size": 10,
    },
    "full": {
        "hidden_channels": 128,
        "msg_dim": 16,
        "kernel_size": 5,
        "horizon": 10,
        "epochs": 100,
        "lr": 1e-3,
        "batch_size": 10,
    },
}


class Settings:
    """Manages run settings."""

    def __init__(self, config_file: Optional[str] = None, preset: str = "desk"):
        """Initialize settings manager; `config_file` may be absent."""
        self.config_file = config_file
        self.default_settings = {
            "seed": 0,
            "dtype": os.getenv("SSTA_DTYPE", "f64"),
            "log_level": os.getenv("SSTA_LOG_LEVEL", "INFO"),
            # World
            "world_preset": "ladder",
            "grid_size": 64,
            "view_size": 16,
            "n_views": 8,
            "n_vehicles": 10,
            "world_steps": 400,
            "chunk_length": 100,
            # Model
            **PRESETS["desk"],
            "self_message": False,
            "rollout_msgs": "hold",
            "freeze_msg_head": False,
            # Protocol
            "k": 2,
            "msg_mode": "emerged",
            "scheduler": "serial",
            "parallel_workers": int(os.getenv("SSTA_WORKERS") or "0"),  # 0 = one per node
            # Lifelong
            "lifelong": "none",
            "buffer": 300,
            "replay_batch": 4,
            "id_eviction": "smallest",
            # Evaluation
            "holdout_fraction": 0.2,
            "max_run_log_entries": 1000,
        }
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        self.default_settings.update(PRESETS[preset])
        self.settings = self._load_settings()

    def _load_settings(self) -> Dict:
        """Load settings from config file."""
        if self.config_file and os.path.exists(self.config_file):
            try:
                with open(self.config_file, "r") as f:
                    loaded = json.load(f)
                # Merge with defaults to ensure all keys exist
                settings = self.default_settings.copy()
                settings.update(loaded)
                return settings
            except (OSError, ValueError) as e:
                logger.warning("Error loading settings from %s: %s", self.config_file, e)
                return self.default_settings.copy()
        return self.default_settings.copy()

    def _save_settings(self):
        """Save settings to config file (no-op without one)."""
        if not self.config_file:
            return
        os.makedirs(os.path.dirname(os.path.abspath(self.config_file)), exist_ok=True)
        temp_file = self.config_file + ".tmp"
        with open(temp_file, "w") as f:
            json.dump(self.settings, f, indent=2, sort_keys=True)
        os.replace(temp_file, self.config_file)

    def get(self, key: str, default=None):
        """Get a setting value."""
        return self.settings.get(key, default)

    def set(self, key: str, value):
        """Set a setting value."""
        self.settings[key] = value
        self._save_settings()

    def update(self, **kwargs):
        """Update multiple settings at once."""
        self.settings.update(kwargs)
        self._save_settings()

    def get_all(self) -> Dict:
        """Get all settings."""
        return self.settings.copy()

    def reset(self):
        """Reset settings to defaults."""
        self.settings = self.default_settings.copy()
        self._save_settings()
