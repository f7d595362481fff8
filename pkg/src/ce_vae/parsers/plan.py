"""Parser for YAML experiment plans."""

import logging
import re
from pathlib import Path
from typing import Any, Optional

import yaml
from pydantic import ValidationError

from ce_vae.exceptions import PlanParseError
from ce_vae.models import ExperimentPlan


logger = logging.getLogger(__name__)


def parse_plan(path: Path) -> ExperimentPlan:
    """Parse an experiment plan file.

    A plan is a YAML mapping of ``ExperimentPlan`` keys; omitted keys keep their defaults
    and the ``vae`` key holds a nested ``VaeConfig`` mapping.

    Args:
        path: Plan file

    Returns:
        ExperimentPlan instance

    Raises:
        FileNotFoundError: If the file doesn't exist
        PlanParseError: On YAML syntax errors, unknown keys or invalid values, with the
            offending line number when it can be located
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Plan file not found: {path}")
    logger.info(f"Parsing experiment plan: {path}")
    return parse_plan_text(path.read_text())


def parse_plan_text(text: str) -> ExperimentPlan:
    """Parse experiment-plan YAML held in a string; see ``parse_plan``."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(e, "problem", None) or str(e)
        raise PlanParseError(f"invalid YAML: {problem}", line=line) from e

    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise PlanParseError("plan must be a mapping of keys to values", line=1)

    for key in data:
        if key not in ExperimentPlan.model_fields:
            raise PlanParseError(f"unknown key '{key}'", line=_find_key_line(text, str(key)))

    try:
        plan = ExperimentPlan(**data)
    except ValidationError as e:
        error = e.errors()[0]
        loc = [str(part) for part in error["loc"]]
        line = _find_key_line(text, loc[-1]) if loc else None
        if line is None and loc:
            line = _find_key_line(text, loc[0])
        raise PlanParseError(f"{'.'.join(loc) or 'plan'}: {error['msg']}", line=line) from e

    logger.debug(f"Plan: {plan.model_dump(mode='json')}")
    return plan


def _find_key_line(text: str, key: Any) -> Optional[int]:
    """First 1-based line where ``key`` appears as a mapping key, if any."""
    pattern = re.compile(rf"^\s*{re.escape(str(key))}\s*:")
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return number
    return None
