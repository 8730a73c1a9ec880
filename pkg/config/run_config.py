"""
Run configuration files.
- Plain INI: [geometry], [phantom], [phantom.primitive.N], [simulation], [solver], [output]
- Values are validated with the pydantic models of models.schemas
- Every failure is reported as ConfigurationError with section, key and line
"""

import configparser
import logging
import re
from pathlib import Path
from typing import Dict, Optional, Tuple

from pydantic import BaseModel, ValidationError

from calculators.errors import ConfigurationError
from models.schemas import (
    OutputSection,
    PhantomSpec,
    Primitive,
    RunConfig,
    ScanGeometry,
    SimulationSpec,
    SolverSection,
)

logger = logging.getLogger(__name__)

SECTION_MODELS = {
    "geometry": ScanGeometry,
    "phantom": PhantomSpec,
    "simulation": SimulationSpec,
    "solver": SolverSection,
    "output": OutputSection,
}
SECTIONS = tuple(SECTION_MODELS)
PRIMITIVE_PREFIX = "phantom.primitive."
LIST_KEYS = {"expansion_iterations", "formats"}

_SECTION_LINE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_LINE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    index: Dict[Tuple[str, Optional[str]], int] = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        match = _SECTION_LINE.match(line)
        if match:
            section = match.group(1).strip()
            index.setdefault((section, None), number)
            continue
        match = _KEY_LINE.match(line)
        if match and section is not None:
            index.setdefault((section, match.group(1).strip().lower()), number)
    return index


def _primitive_sections(parser: configparser.ConfigParser):
    """Primitive sections ordered by their numeric suffix."""
    found = []
    for name in parser.sections():
        if name.startswith(PRIMITIVE_PREFIX):
            suffix = name[len(PRIMITIVE_PREFIX):]
            if not suffix.isdigit():
                raise ConfigurationError("primitive sections must be numbered", section=name)
            found.append((int(suffix), name))
    return [name for _, name in sorted(found)]


def _fields_of(section: str):
    if section.startswith(PRIMITIVE_PREFIX):
        return Primitive.model_fields
    return SECTION_MODELS[section].model_fields


class _Locator:
    """Resolve pydantic error locations to config sections and lines."""

    def __init__(self, text: str, primitives):
        self.lines = _line_index(text)
        self.primitives = primitives

    def line(self, section, key=None) -> Optional[int]:
        return self.lines.get((section, key)) or self.lines.get((section, None))

    def locate(self, loc) -> Tuple[Optional[str], Optional[str]]:
        parts = [str(p) for p in loc]
        if not parts:
            return None, None
        section = parts[0]
        if section == "phantom" and len(parts) >= 3 and parts[1] == "primitives" and parts[2].isdigit():
            index = int(parts[2])
            if index < len(self.primitives):
                return self.primitives[index], (parts[3] if len(parts) > 3 else None)
        return section, (parts[1] if len(parts) > 1 else None)

    def error(self, exc: ValidationError) -> ConfigurationError:
        first = exc.errors()[0]
        section, key = self.locate(first.get("loc", ()))
        message = first.get("msg", str(exc))
        # Cross-section checks name their key in the message: "geometry.n_views: ..."
        match = re.search(r"([a-z_]+)(?:\.([a-z_0-9]+))?: ", message)
        if match and match.group(1) in SECTIONS:
            section, key = match.group(1), match.group(2)
            message = message[match.end():]
        message = message.removeprefix("Value error, ")
        return ConfigurationError(message, section=section, key=key, line=self.line(section, key) if section else None)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """
    Parse and validate INI text.

    Args:
        text: configuration file contents
        source: name used in log messages

    Returns:
        validated RunConfig

    Raises:
        ConfigurationError: syntax error, unknown section/key or invalid value
    """
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigurationError("content before the first section header", line=e.lineno) from e
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        raise ConfigurationError(e.message.split(": ", 1)[-1], section=e.section,
                                 key=getattr(e, "option", None), line=e.lineno) from e
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigurationError("malformed line", line=line) from e

    lines = _line_index(text)
    primitives = _primitive_sections(parser)
    raw: Dict[str, dict] = {}
    primitive_values: Dict[str, dict] = {}
    for section in parser.sections():
        if section not in SECTIONS and section not in primitives:
            raise ConfigurationError("unknown section", section=section, line=lines.get((section, None)))
        known = _fields_of(section)
        values = {}
        for key, value in parser.items(section):
            if key not in known:
                raise ConfigurationError("unknown key", section=section, key=key, line=lines.get((section, key)))
            # An empty list value means an empty list, any other empty value means the default
            if value.strip() or key in LIST_KEYS:
                values[key] = value.strip()
        if section in primitives:
            primitive_values[section] = values
        else:
            raw.setdefault(section, {}).update(values)
    if primitives:
        raw.setdefault("phantom", {})["primitives"] = [primitive_values[name] for name in primitives]

    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise _Locator(text, primitives).error(e) from e
    logger.info(f"Loaded run config {source}")
    return config


def load_run_config(path) -> RunConfig:
    """Read and validate a configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read {path}: {e.strerror}") from e
    return parse_run_config(text, source=str(path))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _section_lines(name: str, model: BaseModel, exclude=()):
    lines = [f"[{name}]"]
    for key, value in model.model_dump(exclude_none=True, exclude=set(exclude)).items():
        lines.append(f"{key} = {_format_value(value)}")
    return lines + [""]


def render_run_config(config: RunConfig) -> str:
    """Render the effective configuration as INI text that parses back to the same values."""
    lines = []
    for section in SECTIONS:
        model = getattr(config, section)
        lines += _section_lines(section, model, exclude=("primitives",) if section == "phantom" else ())
        if section == "phantom":
            for number, primitive in enumerate(config.phantom.primitives, start=1):
                lines += _section_lines(f"{PRIMITIVE_PREFIX}{number}", primitive)
    return "\n".join(lines)


def with_overrides(config: RunConfig, seed: Optional[int] = None, directory: Optional[str] = None) -> RunConfig:
    """Apply command-line overrides (--seed, --out)."""
    if seed is not None:
        config = config.model_copy(update={"simulation": config.simulation.model_copy(update={"seed": seed})})
    if directory is not None:
        config = config.model_copy(update={"output": config.output.model_copy(update={"directory": directory})})
    return config
