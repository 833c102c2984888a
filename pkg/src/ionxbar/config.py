"""Run configuration: JSON file + command-line overrides -> RunConfig.

Precedence is defaults < config file < overrides. Validation is strict
against ``schema/config.schema.json``.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .device import PRESETS, DeviceParams, preset
from .network import Topology
from .writes import WritePolicy

OUTPUT_DIR_ENV = "IONXBAR_OUTPUT_DIR"

DEFAULTS = {
    "schema_version": 1,
    "preset": "paper-calibrated",
    "params": {},
    "topology": {"kind": "proposed-isolated-loop", "rows": 4, "cols": 4, "wire_resistance": 0.0},
    "policy": {"kind": "full-parallel", "pulse_voltage": 3.6, "pulse_dt": 30.0, "unselected": "floating"},
    "experiment": {"name": "s1", "options": {}},
    "read_voltage": 0.2,
    "seed": 0,
}


class ConfigError(Exception):
    code = "CONFIG_INVALID"

    def __init__(self, message, pointer: str = ""):
        self.pointer = pointer
        super().__init__(message)

    @property
    def key(self) -> str:
        return self.pointer.strip("/").replace("/", ".")


class ConfigFileNotFound(ConfigError):
    code = "CONFIG_NOT_FOUND"


def load_schema() -> dict:
    text = resources.files("ionxbar").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_dotted(doc: dict, dotted: str, value):
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {p!r} is not an object", "/" + "/".join(parts))
    node[parts[-1]] = value


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else ""


@dataclass(frozen=True)
class RunConfig:
    params: DeviceParams
    topology: Topology
    policy: WritePolicy
    experiment: str
    options: dict = field(default_factory=dict)
    output_dir: Path = Path("runs")
    seed: int = 0
    read_voltage: float = 0.2
    wire_resistance: float = 0.0
    preset: str = "paper-calibrated"
    raw: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Resolved config; parsing it again yields the same RunConfig."""
        return {
            "schema_version": 1,
            "preset": self.preset,
            "params": self.params.to_dict(),
            "topology": {
                "kind": self.topology.kind.value,
                "rows": self.topology.rows,
                "cols": self.topology.cols,
                "wire_resistance": self.wire_resistance,
            },
            "policy": {
                "kind": self.policy.kind.value,
                "pulse_voltage": self.policy.pulse_voltage,
                "pulse_dt": self.policy.pulse_dt,
                "unselected": self.policy.unselected,
            },
            "experiment": {"name": self.experiment, "options": copy.deepcopy(self.options)},
            "read_voltage": self.read_voltage,
            "output_dir": str(self.output_dir),
            "seed": self.seed,
        }

    def metadata(self) -> dict:
        return {"config": self.to_dict(), "overrides": dict(self.overrides)}


def parse_config(source=None, overrides: dict | None = None) -> RunConfig:
    """Resolve a config from a JSON path (or an already-loaded dict).

    ``overrides`` maps dotted keys (``"policy.pulse_dt"``) to values and is
    applied after the file, before validation.
    """
    if source is None:
        doc = {}
    elif isinstance(source, dict):
        doc = copy.deepcopy(source)
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigFileNotFound(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    overrides = dict(overrides or {})
    for key, value in overrides.items():
        _set_dotted(doc, key, value)

    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        pointer = _pointer(err.absolute_path)
        if err.validator == "additionalProperties":
            # point at the offending key, not its parent
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            pointer = _pointer(list(err.absolute_path) + extra[:1])
        where = pointer.strip("/").replace("/", ".") or "<root>"
        raise ConfigError(f"{where}: {err.message}", pointer)

    resolved = _merge(DEFAULTS, doc)
    if "output_dir" not in resolved:
        resolved["output_dir"] = os.environ.get(OUTPUT_DIR_ENV, "runs")
    if resolved["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {resolved['preset']!r}", "/preset")

    base = preset(resolved["preset"]).to_dict()
    try:
        params = DeviceParams.from_dict({**base, **resolved["params"]})
        top = resolved["topology"]
        topology = Topology(top["kind"], top["rows"], top["cols"])
        pol = resolved["policy"]
        policy = WritePolicy(pol["kind"], pol["pulse_voltage"], pol["pulse_dt"], pol["unselected"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    output_dir = Path(resolved["output_dir"])
    if output_dir.exists() and not (output_dir.is_dir() and os.access(output_dir, os.W_OK)):
        raise ConfigError(f"output_dir is not a writable directory: {output_dir}", "/output_dir")

    return RunConfig(
        params=params,
        topology=topology,
        policy=policy,
        experiment=resolved["experiment"]["name"],
        options=resolved["experiment"].get("options", {}),
        output_dir=output_dir,
        seed=resolved["seed"],
        read_voltage=resolved["read_voltage"],
        wire_resistance=top["wire_resistance"],
        preset=resolved["preset"],
        raw=doc,
        overrides=overrides,
    )
