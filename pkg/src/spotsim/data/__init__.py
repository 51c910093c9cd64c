"""Bundled calibration profiles, traces, and scenario configs."""

from importlib import resources
from pathlib import Path

PROFILES = {
    "opt-6.7b": "profile_opt67b.json",
    "gpt-20b": "profile_gpt20b.json",
    "llama-30b": "profile_llama30b.json",
}


def bundled_path(name: str) -> Path:
    """Filesystem path of a bundled data file (by file name or model alias)."""
    fname = PROFILES.get(name, name)
    path = Path(str(resources.files(__package__) / fname))
    if not path.exists():
        raise FileNotFoundError(f"no bundled data file {name!r}")
    return path
