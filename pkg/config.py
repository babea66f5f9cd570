"""
Configuration loader for pruneflow.
Loads environment variables from .env and validates JSON experiment configs
against config_schema.json.
"""
import copy
import json
import os
from typing import Any, Optional

from dotenv import load_dotenv

from utils import ConfigError, canonical_json, sha256_hex

# Load environment variables from .env file
load_dotenv()


def get_env(key: str, required: bool = True, default: str = "") -> str:
    """Get environment variable with validation."""
    value = os.getenv(key)
    if required and not value:
        raise ConfigError(f"Missing required environment variable: {key}")
    return value or default


# Environment
OUT_DIR = get_env("PRUNEFLOW_OUT", required=False, default="runs")
LOG_LEVEL = get_env("PRUNEFLOW_LOG_LEVEL", required=False, default="INFO").upper()
WORKERS = int(get_env("PRUNEFLOW_WORKERS", required=False, default="1"))

SCHEMA_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config_schema.json")
with open(SCHEMA_PATH, "r", encoding="utf-8") as f:
    SCHEMA = json.load(f)

DEFAULTS = {
    "seeds": [0, 1, 2],
    "data": {
        "classes": 3,
        "dims": 4,
        "samples_per_class": 40,
        "spread": 0.3,
        "seed": None,
    },
    "train": {
        "lr_schedule": [[0.1, 30], [0.01, 10], [0.001, 10]],
        "batch_size": 128,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "temperature": 5.0,
        "temperature_scope": "pruning",
        "rounds": 1,
        "target": 0.5,
        "measure": "magnitude",
        "granularity": "structured",
        "floor": 1,
        "grasp_temperature": None,
        "scoring_per_class": 2,
        "eval_fraction": 0.2,
        "keep_history": True,
        "step_history": False,
    },
    "flow": {
        "steps": [1e-2, 5e-3, 2.5e-3],
        "horizon": 0.5,
        "integrators": ["rk4", "euler"],
        "temperature": 1.0,
        "min_order": 1.8,
        "bound_tolerance": 1e-9,
        "minibatches": 4,
        "enumeration_cap": 8,
        "rates": [1e-3, 5e-4],
        "ratio_range": [1.8, 2.2],
    },
    "compare": {
        "measures": ["magnitude", "loss", "proposed"],
        "rounds": [1, 5],
        "enforce": True,
    },
    "analysis": {
        "experiments": ["grasp_loss", "ebt", "l2_distance", "layerwise"],
        "every": 1,
        "sigma_target": 0.2,
        "overlap_target": 0.5,
        "grasp_temperature": 1.0,
        "min_correlation": 0.7,
        "ebt_per_step": False,
        "enforce": True,
    },
}

_TYPES = {
    "object": dict,
    "array": list,
    "string": str,
    "boolean": bool,
    "null": type(None),
}


# =============================================================================
# SCHEMA VALIDATION
# =============================================================================

def _is_type(value: Any, name: str) -> bool:
    if name == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if name == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, _TYPES[name])


def validate(value: Any, schema: dict, path: str = "config"):
    """
    Check `value` against a JSON-Schema subset.

    Supported keywords: type, enum, properties, required,
    additionalProperties, items, minItems, minimum, maximum,
    exclusiveMinimum, exclusiveMaximum.

    Raises:
        ConfigError: Naming the dotted path of the first violation
    """
    if "type" in schema:
        types = schema["type"] if isinstance(schema["type"], list) else [schema["type"]]
        if not any(_is_type(value, t) for t in types):
            raise ConfigError(f"{path}: expected {' or '.join(types)}, got {json.dumps(value)}")
    if "enum" in schema and value not in schema["enum"]:
        raise ConfigError(f"{path}: {json.dumps(value)} is not one of {schema['enum']}")

    if isinstance(value, dict):
        for key in schema.get("required", []):
            if key not in value:
                raise ConfigError(f"{path}.{key}: required field is missing")
        properties = schema.get("properties", {})
        for key, item in value.items():
            if key in properties:
                validate(item, properties[key], f"{path}.{key}")
            elif schema.get("additionalProperties", True) is False:
                raise ConfigError(f"{path}.{key}: unknown field")

    if isinstance(value, list):
        if len(value) < schema.get("minItems", 0):
            raise ConfigError(f"{path}: needs at least {schema['minItems']} items, got {len(value)}")
        if "items" in schema:
            for i, item in enumerate(value):
                validate(item, schema["items"], f"{path}[{i}]")

    if _is_type(value, "number"):
        if "minimum" in schema and value < schema["minimum"]:
            raise ConfigError(f"{path}: {value} is below the minimum {schema['minimum']}")
        if "maximum" in schema and value > schema["maximum"]:
            raise ConfigError(f"{path}: {value} is above the maximum {schema['maximum']}")
        if "exclusiveMinimum" in schema and value <= schema["exclusiveMinimum"]:
            raise ConfigError(f"{path}: {value} must be greater than {schema['exclusiveMinimum']}")
        if "exclusiveMaximum" in schema and value >= schema["exclusiveMaximum"]:
            raise ConfigError(f"{path}: {value} must be less than {schema['exclusiveMaximum']}")


# =============================================================================
# LOADING
# =============================================================================

def merge(base: dict, update: dict) -> dict:
    """Deep merge; values from `update` win."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list, Any]:
    """
    Split 'a.b.c=value' into a key path and a value.

    The value is parsed as JSON when possible, otherwise kept as a string.
    """
    if "=" not in text:
        raise ConfigError(f"Override '{text}' must look like dotted.path=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"Override '{text}' has an empty path")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts, value


def apply_override(config: dict, text: str) -> dict:
    parts, value = parse_override(text)
    node = config
    for i, part in enumerate(parts[:-1]):
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"{'.'.join(['config'] + parts[:i + 1])}: cannot override inside a non-object")
        node = child
    node[parts[-1]] = value
    return config


def resolve(raw: dict, overrides: Optional[list] = None, seed: Optional[int] = None) -> dict:
    """Merge defaults, apply overrides and a seed pin, then validate."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    config = merge(DEFAULTS, raw)
    for text in overrides or []:
        apply_override(config, text)
    if seed is not None:
        config["seeds"] = [int(seed)]
    validate(config, SCHEMA)
    _check_model(config)
    return config


def load_config(path: str, overrides: Optional[list] = None, seed: Optional[int] = None) -> dict:
    """
    Load, resolve and validate an experiment config file.

    Raises:
        ConfigError: If the file is missing, not JSON, or fails validation
    """
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    return resolve(raw, overrides, seed)


def _check_model(config: dict):
    model = config["model"]
    needed = {"mlp": ("widths",), "cnn": ("channels",), "quadratic": ("A", "theta0")}[model["type"]]
    for key in needed:
        if key not in model:
            raise ConfigError(f"config.model.{key}: required for a {model['type']} model")
    if model["type"] == "mlp":
        if model["widths"][0] != config["data"]["dims"]:
            raise ConfigError(f"config.model.widths[0]: {model['widths'][0]} does not match data.dims "
                              f"{config['data']['dims']}")
        if model["widths"][-1] != config["data"]["classes"]:
            raise ConfigError(f"config.model.widths[-1]: {model['widths'][-1]} does not match data.classes "
                              f"{config['data']['classes']}")
    if model["type"] == "cnn":
        h, w, c = model.get("input_shape", [4, 4, 1])[:3]
        if h * w * c != config["data"]["dims"]:
            raise ConfigError(f"config.model.input_shape: {h}x{w}x{c} does not match data.dims "
                              f"{config['data']['dims']}")
    if model["type"] == "quadratic":
        n = len(model["theta0"])
        if len(model["A"]) != n or any(len(row) != n for row in model["A"]):
            raise ConfigError(f"config.model.A: expected a {n}x{n} matrix")


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON of a resolved config."""
    return sha256_hex(canonical_json(config))
