# Base template class for all report templates

from abc import ABC, abstractmethod
from typing import Any, Dict, List

from jinja2 import Environment, StrictUndefined


class BaseTemplate(ABC):
    """Base class for all report templates"""

    def __init__(self, template_name: str, description: str):
        self.template_name = template_name
        self.description = description
        self.env = Environment(
            undefined=StrictUndefined,
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=True,
        )
        self.env.filters["pct"] = lambda value, digits=2: f"{100.0 * float(value):.{digits}f}"
        self.env.filters["num"] = lambda value, digits=4: f"{float(value):.{digits}f}"

    @abstractmethod
    def generate_files(self, context: Dict[str, Any]) -> Dict[str, str]:
        """Render all template files from the context"""
        pass

    def validate_context(self, context: Dict[str, Any]) -> List[str]:
        """Validate the context and return a list of errors"""
        errors = []

        required_fields = self.get_required_fields()
        for field in required_fields:
            if field not in context:
                errors.append(f"Missing required field: {field}")

        return errors

    def get_required_fields(self) -> List[str]:
        """Get list of required context fields"""
        return ["title"]

    def get_default_context(self) -> Dict[str, Any]:
        """Get default context values"""
        return {"title": "Continual merge report"}

    def render(self, source: str, context: Dict[str, Any]) -> str:
        return self.env.from_string(source).render(**context)
