from pathlib import Path
from typing import List, Optional

# Shipped experiment configs, one YAML file per preset
PRESET_DIR = Path(__file__).parent


def list_presets() -> List[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))


def preset_path(name: str) -> Optional[Path]:
    """Path of a shipped preset, or None when no preset has that name"""
    candidate = PRESET_DIR / f"{name}.yaml"
    return candidate if candidate.is_file() else None
