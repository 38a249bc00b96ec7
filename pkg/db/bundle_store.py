"""
Model bundle persistence.

Bundles are versioned JSON written by pydantic; floats use the shortest
round-trip representation, so save -> load -> save is byte-identical.
"""

import json
import logging
from pathlib import Path

from pydantic import ValidationError

from models.bundle import BUNDLE_FORMAT_VERSION, ModelBundle

logger = logging.getLogger(__name__)


class BundleError(Exception):
    """Bundle could not be read or written"""

    def __init__(self, message: str, field: str = ""):
        self.field = field
        super().__init__(message)


class BundleVersionError(BundleError):
    """Bundle written by an incompatible format version"""
    pass


def _first_invalid_field(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"]) or "<root>"


def dump_bundle(bundle: ModelBundle) -> str:
    return bundle.model_dump_json(indent=2) + "\n"


def save_bundle(bundle: ModelBundle, path: str) -> Path:
    """Write the bundle as JSON, creating parent directories"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(dump_bundle(bundle), encoding="utf-8", newline="\n")
    logger.info(f"Saved bundle to {target}")
    return target


def parse_bundle(text: str, source: str = "<string>") -> ModelBundle:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise BundleError(f"{source}: not valid JSON ({e.msg} at line {e.lineno})") from e
    if not isinstance(raw, dict):
        raise BundleError(f"{source}: bundle must be a JSON object")

    version = raw.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise BundleVersionError(
            f"{source}: bundle format version {version!r} is not supported (expected {BUNDLE_FORMAT_VERSION})",
            field="format_version",
        )

    try:
        return ModelBundle.model_validate(raw)
    except ValidationError as e:
        field = _first_invalid_field(e)
        raise BundleError(f"{source}: invalid field '{field}': {e.errors()[0]['msg']}", field=field) from e


def load_bundle(path: str) -> ModelBundle:
    """Read and validate a bundle; the error names the first invalid field"""
    source = Path(path)
    if not source.exists():
        raise BundleError(f"Bundle not found: {path}")
    bundle = parse_bundle(source.read_text(encoding="utf-8"), str(source))
    logger.info(f"Loaded bundle {source} (q={bundle.affine_map.q}, m={len(bundle.partition.sizes)})")
    return bundle
