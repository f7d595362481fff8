"""Parsers for experiment-plan files."""

from ce_vae.parsers.plan import parse_plan, parse_plan_text

__all__ = ["parse_plan", "parse_plan_text"]
