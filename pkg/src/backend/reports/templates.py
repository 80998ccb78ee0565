#!/usr/bin/env python3
"""
Text templates for the reports printed to standard output.
"""

from typing import Any, Dict


# Template dictionary with all report blocks
TEMPLATES = {
    "summary": """\
== Meta-3DSeg report: {label} ==
settings: {settings}
{category_rows}
Mean      mIoU {mean_miou:6.2f}%  ACC {mean_accuracy:6.2f}%
== end report ==""",

    "category_row": "{category:<9} mIoU {miou:6.2f}%  ACC {accuracy:6.2f}%  ({shapes} shapes)",

    "sweep_header": "== Sweep over {axis}: {count} settings ==",

    "sweep_row": "{setting:<12} mean mIoU {mean_miou:6.2f}%  mean ACC {mean_accuracy:6.2f}%",

    "train_done": """\
== Meta-training finished ==
mode {mode}, {episodes} episodes
query loss: first {first_loss:.4f}, last {last_loss:.4f}
query mIoU: first {first_miou:.4f}, last {last_miou:.4f}
checkpoint: {checkpoint}
log: {log}""",
}


def get_template(template_type: str, variables: Dict[str, Any]) -> str:
    """
    Render a report template.

    Args:
        template_type: Key into TEMPLATES
        variables: Values for the template's placeholders

    Returns:
        The formatted text

    Raises:
        ValueError: If the template is unknown or a variable is missing
    """
    if template_type not in TEMPLATES:
        raise ValueError(f"Unknown template type: {template_type}")
    try:
        return TEMPLATES[template_type].format(**variables)
    except KeyError as e:
        raise ValueError(f"Missing required variable for template '{template_type}': {e}")
