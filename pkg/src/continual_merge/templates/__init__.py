"""Report templates rendered with jinja2."""

from .base import BaseTemplate
from .report import SummaryTemplate

__all__ = ["BaseTemplate", "SummaryTemplate"]
