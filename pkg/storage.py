import os
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import orjson
import pandas as pd
import xxhash
from pydantic import BaseModel

from logger import get_logger, log_artifact

logger = get_logger(__name__)

APP_VERSION = "0.1.0"
CHECKPOINT_VERSION = 1

# Artifact root used when neither --out nor output_dir is given
OUTPUT_DIR = os.environ.get("BUFFERGUARD_OUTPUT_DIR", "runs")

TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "orjson")

JSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY


def dumps(payload: Any) -> bytes:
    """Canonical JSON bytes: sorted keys, 2-space indent, trailing newline"""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return orjson.dumps(payload, option=JSON_OPTIONS) + b"\n"


def config_hash(config: Union[BaseModel, Dict[str, Any]]) -> str:
    if isinstance(config, BaseModel):
        config = config.model_dump(mode="json")
    return xxhash.xxh64(orjson.dumps(config, option=orjson.OPT_SORT_KEYS)).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {"bufferguard": APP_VERSION}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


class ArtifactStore:
    """Writes command artifacts under one output directory and tracks them in a manifest"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: List[str] = []

    def path(self, name: str) -> Path:
        target = self.root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def track(self, name: str):
        if name not in self.written:
            self.written.append(name)

    def write_json(self, name: str, payload: Any) -> Path:
        target = self.path(name)
        target.write_bytes(dumps(payload))
        self.track(name)
        log_artifact(logger, "write_json", str(target))
        return target

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        target = self.path(name)
        frame.to_csv(target, index=False, float_format="%.17g")
        self.track(name)
        log_artifact(logger, "write_frame", str(target), rows=len(frame))
        return target

    def read_json(self, name: str) -> Any:
        target = self.root / name
        return orjson.loads(target.read_bytes())

    def write_manifest(self, command: str, config: Union[BaseModel, Dict[str, Any]], seed: Optional[int] = None) -> Path:
        """Merge this command's entry into manifest.json; no timestamps here"""
        target = self.root / "manifest.json"
        manifest: Dict[str, Any] = {}
        if target.exists():
            manifest = orjson.loads(target.read_bytes())
        manifest.setdefault("commands", {})[command] = {
            "config_hash": config_hash(config),
            "seed": seed,
            "artifacts": sorted(self.written),
        }
        manifest["versions"] = package_versions()
        target.write_bytes(dumps(manifest))
        log_artifact(logger, "write_manifest", str(target))
        return target

    def write_metadata(self, command: str) -> Path:
        target = self.root / "run_metadata.json"
        payload: Dict[str, Any] = {}
        if target.exists():
            payload = orjson.loads(target.read_bytes())
        payload[command] = {"finished_at": datetime.now(timezone.utc).isoformat()}
        target.write_bytes(dumps(payload))
        return target


def read_json_file(path: Union[str, Path]) -> Any:
    return orjson.loads(Path(path).read_bytes())


def write_json_file(path: Union[str, Path], payload: Any) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(dumps(payload))
    log_artifact(logger, "write_json", str(target))
    return target
