from typing import Dict, Any, Optional, Iterable
import copy
import json
import logging
import os

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

ENV_PREFIX = "STABILITY_"


class SettingsManager:
    def __init__(self, settings_file: Optional[str] = None, config_file: Optional[str] = None,
                 use_env: bool = True):
        self.logger = logging.getLogger(__name__)
        self.settings_file = settings_file
        self.config_file = config_file
        self.default_settings = {
            "numerics": {
                "series_threshold": 1e-4,
                "overflow_limit": 700.0,
                "marginal_tol": 1e-9,
                "newton_max_iter": 100,
                "max_doublings": 8
            },
            "simulation": {
                "n_cells": 100,
                "t_final": 30.0,
                "scheme": "implicit"
            },
            "backstepping": {
                "mesh_size": 100,
                "kernel_tol": 1e-11,
                "kernel_max_iter": 200,
                "scheme": "characteristic",
                "feedback": "auto"
            },
            "sweep": {
                "jobs": 1,
                "exclusion_margin": 0.02,
                "method": "spectral"
            },
            "output": {
                "format": "csv",
                "history_file": ""
            },
            "logging": {
                "level": "WARNING"
            }
        }
        self.settings = self.load_settings()
        if config_file:
            self.settings = self._merge_settings(self.settings, self.load_config_file(config_file))
        if use_env:
            self.settings = self._merge_settings(self.settings, self.load_environment())

    def load_settings(self) -> Dict[str, Any]:
        """Load settings from the JSON file, merged over the defaults"""
        try:
            if self.settings_file and os.path.exists(self.settings_file):
                with open(self.settings_file, 'r') as f:
                    settings = json.load(f)
                    return self._merge_settings(self.default_settings, settings)
        except (OSError, json.JSONDecodeError) as e:
            self.logger.warning(f"Error loading settings: {e}")
        return copy.deepcopy(self.default_settings)

    def save_settings(self):
        """Save current settings to the JSON file"""
        if not self.settings_file:
            return
        try:
            with open(self.settings_file, 'w') as f:
                json.dump(self.settings, f, indent=2)
        except OSError as e:
            self.logger.error(f"Error saving settings: {e}")

    def load_config_file(self, path: str) -> Dict[str, Any]:
        """Read a key=value file; keys are ``category.key``"""
        with open(path, 'r') as f:
            return self.parse_assignments(f.read().splitlines(), source=path)

    def load_environment(self) -> Dict[str, Any]:
        """Pick up STABILITY_<CATEGORY>_<KEY> overrides for known settings"""
        overrides: Dict[str, Any] = {}
        for category, values in self.default_settings.items():
            for key in values:
                name = f"{ENV_PREFIX}{category}_{key}".upper()
                if name in os.environ:
                    overrides.setdefault(category, {})[key] = _parse_value(os.environ[name])
        return overrides

    def parse_assignments(self, lines: Iterable[str], source: str = "<config>") -> Dict[str, Any]:
        parsed: Dict[str, Any] = {}
        for lineno, raw in enumerate(lines, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                self.logger.warning(f"{source}:{lineno}: ignoring line without '='")
                continue
            name, value = (part.strip() for part in line.split('=', 1))
            if '.' in name:
                category, key = name.split('.', 1)
            else:
                category, key = self._find_category(name), name
            if category not in self.default_settings or key not in self.default_settings[category]:
                self.logger.warning(f"{source}:{lineno}: unknown setting {category}.{key}")
            parsed.setdefault(category, {})[key] = _parse_value(value)
        return parsed

    def _find_category(self, key: str) -> str:
        for category, values in self.default_settings.items():
            if key in values:
                return category
        return "extra"

    def _merge_settings(self, defaults: Dict, user_settings: Dict) -> Dict:
        """Recursively merge user settings with defaults"""
        result = copy.deepcopy(defaults)

        for key, value in user_settings.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._merge_settings(result[key], value)
            else:
                result[key] = value

        return result

    def get_setting(self, category: str, key: str) -> Optional[Any]:
        """Get a specific setting value"""
        try:
            return self.settings[category][key]
        except KeyError:
            return self.default_settings.get(category, {}).get(key)

    def update_setting(self, category: str, key: str, value: Any):
        """Update a specific setting (flags land here, above every file source)"""
        if category not in self.settings:
            self.settings[category] = {}
        self.settings[category][key] = value

    def reset_category(self, category: str):
        """Reset a category to default settings"""
        if category in self.default_settings:
            self.settings[category] = copy.deepcopy(self.default_settings[category])

    def get_category(self, category: str) -> Dict[str, Any]:
        """One category with defaults filled in for keys no source set"""
        merged = copy.deepcopy(self.default_settings.get(category, {}))
        merged.update(self.settings.get(category, {}))
        return merged

    def get_numerics_settings(self) -> Dict[str, Any]:
        return self.get_category("numerics")

    def get_simulation_settings(self) -> Dict[str, Any]:
        return self.get_category("simulation")

    def get_backstepping_settings(self) -> Dict[str, Any]:
        return self.get_category("backstepping")

    def get_sweep_settings(self) -> Dict[str, Any]:
        return self.get_category("sweep")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        lowered = text.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        return text
