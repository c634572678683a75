"""Sound source localization from microphone-array audio.

Thin wrapper around the compiled ``_beamloc`` extension. Audio arrays are
``(channels, samples)`` float64 at 48 kHz.
"""

import json as _json

from ._beamloc import *  # noqa: F401,F403
from ._beamloc import default_config as _default_config

__all__ = [name for name in dir() if not name.startswith("_")]


def config(**overrides):
    """Default pipeline configuration as a dict, with top-level overrides."""
    cfg = _json.loads(_default_config())
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg
