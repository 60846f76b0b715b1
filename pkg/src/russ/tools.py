"""Tool schemas, call validation, and canonicalization.

The registry is the single source of truth for tool names, parameter kinds,
per-parameter weights, and numeric tolerances. Validation and canonicalization
are pure; the registry is immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping

from .errors import UnknownToolError

ORGAN_CHOICES = ("gallbladder", "spine", "kidney", "carotid", "liver", "aorta")

#: string alias accepted by sweep_ref / trajectory_ref values, resolving to
#: the most recently recorded sweep / planned trajectory.
LATEST = "latest"


class ParamKind(str, Enum):
    TEXT = "text"
    ENUM = "enum"
    NUMBER = "number"
    INTEGER = "integer"
    BOOLEAN = "boolean"
    LANDMARK = "landmark"
    SWEEP_REF = "sweep_ref"
    TRAJECTORY_REF = "trajectory_ref"


#: kinds whose string values are matched exactly after canonicalization
DISCRETE_STRING_KINDS = frozenset(
    {ParamKind.ENUM, ParamKind.LANDMARK, ParamKind.SWEEP_REF, ParamKind.TRAJECTORY_REF}
)


@dataclass(frozen=True)
class ParamSpec:
    """One tool parameter: kind, requiredness, scoring weight, tolerance."""

    name: str
    kind: ParamKind
    required: bool = True
    weight: float = 1.0
    description: str = ""
    choices: tuple[str, ...] | None = None  # enum kinds only
    unit: str | None = None                 # number kinds only
    tol_rel: float | None = None            # relative numeric tolerance
    tol_abs: float | None = None            # absolute numeric tolerance

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError(f"param {self.name!r}: weight must be positive")
        if self.kind is ParamKind.ENUM and not self.choices:
            raise ValueError(f"param {self.name!r}: enum kind needs choices")
        if self.kind is ParamKind.NUMBER:
            if (self.tol_rel is None) == (self.tol_abs is None):
                raise ValueError(
                    f"param {self.name!r}: number kind needs exactly one tolerance"
                )
        if self.kind is ParamKind.INTEGER and self.tol_abs is None:
            # integers match exactly unless a tolerance is configured
            object.__setattr__(self, "tol_abs", 0.0)


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str
    params: tuple[ParamSpec, ...] = ()
    terminal: bool = False

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(names) != len(set(names)):
            raise ValueError(f"tool {self.name!r}: duplicate param names")

    def param(self, name: str) -> ParamSpec | None:
        for p in self.params:
            if p.name == name:
                return p
        return None

    @property
    def required_params(self) -> tuple[ParamSpec, ...]:
        return tuple(p for p in self.params if p.required)


@dataclass
class ToolCall:
    """A structured tool invocation: tool name plus argument map."""

    tool: str
    args: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"tool": self.tool, "args": self.args},
                          sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_obj(cls, obj: Mapping[str, Any]) -> "ToolCall":
        return cls(tool=obj["tool"], args=dict(obj["args"]))


@dataclass
class ValidationReport:
    missing_required: list[str] = field(default_factory=list)
    unknown_keys: list[str] = field(default_factory=list)
    type_errors: list[tuple[str, str]] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not (self.missing_required or self.unknown_keys or self.type_errors)

    def to_dict(self) -> dict[str, Any]:
        return {
            "valid": self.valid,
            "missing_required": list(self.missing_required),
            "unknown_keys": list(self.unknown_keys),
            "type_errors": [list(t) for t in self.type_errors],
        }


class ToolRegistry:
    """Immutable collection of tool schemas, exactly one of them terminal."""

    def __init__(self, schemas: Iterable[ToolSchema]):
        self._tools: dict[str, ToolSchema] = {}
        for s in schemas:
            if s.name in self._tools:
                raise ValueError(f"duplicate tool {s.name!r}")
            self._tools[s.name] = s
        terminals = [s.name for s in self._tools.values() if s.terminal]
        if self._tools and len(terminals) != 1:
            raise ValueError(f"registry needs exactly one terminal tool, got {terminals}")

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def __len__(self) -> int:
        return len(self._tools)

    def lookup(self, name: str) -> ToolSchema:
        try:
            return self._tools[name]
        except KeyError:
            raise UnknownToolError(f"unknown tool {name!r}") from None

    def names(self) -> list[str]:
        return sorted(self._tools)

    @property
    def terminal_tool(self) -> str:
        return next(s.name for s in self._tools.values() if s.terminal)

    def with_overrides(self, overrides: Mapping[str, Mapping[str, Mapping[str, float]]]) -> "ToolRegistry":
        """New registry with per-tool, per-param weight/tolerance overrides.

        ``overrides`` shape: {tool: {param: {"weight"|"tol_rel"|"tol_abs": value}}}.
        """
        new = []
        for name in self.names():
            schema = self._tools[name]
            per_tool = overrides.get(name, {})
            params = []
            for p in schema.params:
                fields = dict(per_tool.get(p.name, {}))
                unknown = set(fields) - {"weight", "tol_rel", "tol_abs"}
                if unknown:
                    raise ValueError(f"override {name}.{p.name}: unknown fields {sorted(unknown)}")
                if {"tol_rel", "tol_abs"} & set(fields) and p.kind is ParamKind.NUMBER:
                    # a number keeps exactly one tolerance; setting one clears the other
                    if "tol_rel" in fields:
                        fields.setdefault("tol_abs", None)
                    else:
                        fields.setdefault("tol_rel", None)
                params.append(replace(p, **fields) if fields else p)
            new.append(replace(schema, params=tuple(params)))
        return ToolRegistry(new)


def default_registry() -> ToolRegistry:
    """The standard six-tool registry used by all bundled content."""
    return ToolRegistry([
        ToolSchema(
            name="plan_trajectory",
            description="Plan a probe trajectory over the body surface between two "
                        "anatomical landmarks, sampled onto the skin with inward normals.",
            params=(
                ParamSpec("target_organ", ParamKind.ENUM, choices=ORGAN_CHOICES,
                          description="organ the scan is meant to image"),
                ParamSpec("start_landmark", ParamKind.LANDMARK,
                          description="named surface landmark where the sweep starts"),
                ParamSpec("end_landmark", ParamKind.LANDMARK,
                          description="named surface landmark where the sweep ends"),
                ParamSpec("n_points", ParamKind.INTEGER, required=False,
                          description="number of trajectory samples (default 50)"),
            ),
        ),
        ToolSchema(
            name="execute_motion",
            description="Move the robot: execute a planned trajectory (recording an "
                        "imaging sweep) or move the probe to a position [x, y, z].",
            params=(
                ParamSpec("target", ParamKind.TRAJECTORY_REF,
                          description="trajectory index, 'latest', or a position triple"),
                ParamSpec("speed", ParamKind.NUMBER, unit="mm/s", tol_rel=0.10,
                          description="motion speed"),
            ),
        ),
        ToolSchema(
            name="adjust_contact",
            description="Re-seat the probe: align it with the local surface normal and "
                        "restore contact force for good acoustic coupling.",
            params=(
                ParamSpec("sweep", ParamKind.SWEEP_REF, required=False,
                          description="sweep whose imaging prompted the adjustment"),
            ),
        ),
        ToolSchema(
            name="voice_guidance",
            description="Speak an instruction to the patient. Breath-hold phrasing "
                        "(breath/inhale/hold) starts a breath-hold window.",
            params=(
                ParamSpec("message", ParamKind.TEXT, description="what to tell the patient"),
            ),
        ),
        ToolSchema(
            name="refine_trajectory",
            description="Evaluate a sweep; if the organ is poorly centered, replan the "
                        "trajectory centered on the estimated organ position.",
            params=(
                ParamSpec("sweep", ParamKind.SWEEP_REF, description="sweep to evaluate"),
            ),
        ),
        ToolSchema(
            name="complete_scan",
            description="End the scanning episode with a short summary.",
            terminal=True,
            params=(
                ParamSpec("summary", ParamKind.TEXT, description="closing summary"),
            ),
        ),
    ])


def _canon_string(value: str, lower: bool) -> str:
    value = value.strip()
    return value.lower() if lower else value


def canonicalize(call: ToolCall, registry: ToolRegistry) -> ToolCall:
    """Canonical form of a call: trimmed strings, lowercased discrete values.

    Numeric values are preserved bit-exactly; unknown keys pass through
    untouched. Idempotent.
    """
    schema = registry.lookup(call.tool)
    args: dict[str, Any] = {}
    for key, value in call.args.items():
        spec = schema.param(key)
        if spec is None or not isinstance(value, str):
            args[key] = value
            continue
        args[key] = _canon_string(value, lower=spec.kind in DISCRETE_STRING_KINDS)
    return ToolCall(tool=call.tool, args=args)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_kind(spec: ParamSpec, value: Any) -> str | None:
    """Return an error reason, or None when the value fits the kind."""
    kind = spec.kind
    if kind is ParamKind.TEXT:
        return None if isinstance(value, str) else "not a string"
    if kind is ParamKind.ENUM:
        if not isinstance(value, str):
            return "not a string"
        if value.strip().lower() not in spec.choices:
            return f"not one of {list(spec.choices)}"
        return None
    if kind is ParamKind.NUMBER:
        return None if _is_number(value) else "not a number"
    if kind is ParamKind.INTEGER:
        return None if isinstance(value, int) and not isinstance(value, bool) else "not an integer"
    if kind is ParamKind.BOOLEAN:
        return None if isinstance(value, bool) else "not a boolean"
    if kind is ParamKind.LANDMARK:
        return None if isinstance(value, str) else "not a landmark name"
    if kind is ParamKind.SWEEP_REF:
        if isinstance(value, int) and not isinstance(value, bool) and value >= 0:
            return None
        if isinstance(value, str) and value.strip().lower() == LATEST:
            return None
        return "not a sweep reference (index or 'latest')"
    if kind is ParamKind.TRAJECTORY_REF:
        if isinstance(value, int) and not isinstance(value, bool) and value >= 0:
            return None
        if isinstance(value, str) and value.strip().lower() == LATEST:
            return None
        if (isinstance(value, list) and len(value) == 3
                and all(_is_number(v) for v in value)):
            return None
        return "not a trajectory reference (index, 'latest', or [x, y, z])"
    return f"unhandled kind {kind}"  # pragma: no cover


def validate_call(call: ToolCall, registry: ToolRegistry) -> ValidationReport:
    """Check a call against its schema. Raises UnknownToolError for unknown tools."""
    schema = registry.lookup(call.tool)
    report = ValidationReport()
    for p in schema.required_params:
        if p.name not in call.args:
            report.missing_required.append(p.name)
    for key in call.args:
        spec = schema.param(key)
        if spec is None:
            report.unknown_keys.append(key)
            continue
        reason = _check_kind(spec, call.args[key])
        if reason is not None:
            report.type_errors.append((key, reason))
    report.missing_required.sort()
    report.unknown_keys.sort()
    report.type_errors.sort()
    return report


def render_tool_prompt(registry: ToolRegistry) -> str:
    """Deterministic textual catalog of every registered tool."""
    lines: list[str] = ["## Tools"]
    for name in registry.names():
        schema = registry.lookup(name)
        suffix = " [terminal]" if schema.terminal else ""
        lines.append(f"### {name}{suffix}")
        lines.append(schema.description)
        for p in schema.params:
            bits = [p.kind.value]
            if p.choices:
                bits.append("one of " + "/".join(p.choices))
            if p.unit:
                bits.append(p.unit)
            bits.append("required" if p.required else "optional")
            if p.kind is ParamKind.NUMBER:
                tol = f"rel tol {p.tol_rel}" if p.tol_rel is not None else f"abs tol {p.tol_abs}"
                bits.append(tol)
            bits.append(f"w={p.weight}")
            desc = f" -- {p.description}" if p.description else ""
            lines.append(f"- {p.name} ({', '.join(bits)}){desc}")
        lines.append("")
    return "\n".join(lines)
