"""
Configuration loading and result emission for the command line.
"""
import hashlib
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union

import pandas as pd
import yaml
from pydantic import ValidationError

from . import __version__
from .exceptions import ConfigError
from .schemas import ConvergenceReport, ExperimentConfig, RunManifest

logger = logging.getLogger(__name__)

CONVERGENCE_COLUMNS = [
    "method", "h", "samples", "invalid", "ms_error", "ms_stderr", "weak_obs", "weak_error", "weak_stderr",
]
FLOAT_FORMAT = "%.17g"


def _error_key(error: Dict[str, Any]) -> str:
    return ".".join(str(part) for part in error["loc"]) or "<root>"


def parse_config(data: Any, source: str = "<config>") -> ExperimentConfig:
    """Validate a mapping as an ExperimentConfig; the first failing key ends up in the ConfigError."""
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a mapping with sections problem/driver/run/methods/acceptance.")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = _error_key(first)
        details = "; ".join(f"{_error_key(err)}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{source}: invalid configuration ({details})", key=key) from e


def load_config(path: Union[str, Path], overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> ExperimentConfig:
    """
    Read a YAML experiment file and apply per-section overrides.

    Args:
        path: YAML file with the sections problem, driver, run, methods, acceptance.
        overrides: ``{section: {key: value}}``; entries with value None are ignored.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections.")
    for section, values in (overrides or {}).items():
        given = {key: value for key, value in values.items() if value is not None}
        if given:
            logger.debug(f"Overriding {section}: {given}")
            data.setdefault(section, {})
            if not isinstance(data[section], dict):
                raise ConfigError(f"{path}: section '{section}' must be a mapping.", key=section)
            data[section].update(given)
    return parse_config(data, source=str(path))


def report_frame(report: ConvergenceReport) -> pd.DataFrame:
    rows = [row.model_dump() for row in report.rows]
    return pd.DataFrame(rows, columns=CONVERGENCE_COLUMNS)


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def manifest_hash(manifest: RunManifest) -> str:
    """SHA-256 of the manifest without timestamp and hash fields."""
    payload = manifest.model_dump(mode="json", exclude={"timestamp", "config_hash"})
    text = yaml.safe_dump(payload, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def build_manifest(config: ExperimentConfig, resolved: Optional[Dict[str, Any]] = None) -> RunManifest:
    manifest = RunManifest(
        config=config,
        version=__version__,
        resolved=resolved or {},
        timestamp=datetime.now(timezone.utc),
    )
    manifest.config_hash = manifest_hash(manifest)
    return manifest


def manifest_path(csv_path: Union[str, Path]) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.name + ".manifest.yaml")


def write_manifest(manifest: RunManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(manifest.model_dump(mode="json"), f, sort_keys=False)
    logger.info(f"Wrote manifest {path} (hash {manifest.config_hash[:12]})")
    return path
