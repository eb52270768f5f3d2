# Markdown summary of stored run reports

from typing import Any, Dict, List

from ..errors import ValidationError
from .base import BaseTemplate

SUMMARY_TEMPLATE = """\
# {{ title }}

Suite checksum: `{{ suite_checksum }}`

## Aggregate

| method | T | ACC mean | ACC std | BWT mean | BWT std |
|---|---|---|---|---|---|
{% for row in aggregate %}
| {{ row.method }} | {{ row.T }} | {{ row.ACC_mean | pct }} | {{ row.ACC_std | pct }} | {{ row.BWT_mean | pct }} | {{ row.BWT_std | pct }} |
{% endfor %}

## Runs

{% for report in reports %}
### {{ report.method }}, seed {{ report.seed }}

Order: {{ report.order | join(" → ") }}. ACC {{ report.acc | pct }}%, BWT {{ report.bwt | pct }}%.

| after merge | {% for i in report.order %}task {{ i }} | {% endfor %}

|---|{% for i in report.order %}---|{% endfor %}

{% for row in report.matrix %}
| {{ loop.index }} | {% for value in row %}{{ "" if value is none else (value | pct) }} | {% endfor %}

{% endfor %}

{% endfor %}
"""


class SummaryTemplate(BaseTemplate):
    """Renders summary.md from report dictionaries and aggregate rows"""

    def __init__(self) -> None:
        super().__init__("summary", "Markdown summary of a sweep")

    def get_required_fields(self) -> List[str]:
        return ["title", "reports", "aggregate"]

    def generate_files(self, context: Dict[str, Any]) -> Dict[str, str]:
        merged = {**self.get_default_context(), **context}
        errors = self.validate_context(merged)
        if errors:
            raise ValidationError("; ".join(errors), parameter="context")
        checksums = sorted({r.get("suite_checksum", "") for r in merged["reports"]})
        merged.setdefault("suite_checksum", ", ".join(c[:12] for c in checksums if c) or "n/a")
        return {"summary.md": self.render(SUMMARY_TEMPLATE, merged)}
