"""Markdown report rendering from the package's Jinja templates."""

from pathlib import Path
from typing import Any

from jinja2 import Environment, FileSystemLoader, StrictUndefined, Template, TemplateNotFound


def _fmt(value: Any, digits: int = 4) -> str:
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


class ReportRenderer:
    """Loads and renders ``*.jinja`` report templates."""

    def __init__(self, templates_dir: str | Path | None = None):
        """Initialize the renderer.

        Args:
            templates_dir: Directory holding the templates. If None, uses the
                ``templates`` folder shipped with the package.
        """
        if templates_dir is None:
            templates_dir = Path(__file__).parent.parent / "templates"

        self.templates_dir = Path(templates_dir)

        if not self.templates_dir.exists():
            raise FileNotFoundError(f"Templates directory not found: {self.templates_dir}")

        self.env = Environment(
            loader=FileSystemLoader(str(self.templates_dir)),
            autoescape=False,
            trim_blocks=True,
            lstrip_blocks=True,
            undefined=StrictUndefined,
            keep_trailing_newline=True,
        )
        self.env.filters["fmt"] = _fmt
        self._template_cache: dict[str, Template] = {}

    def get_template_names(self) -> list[str]:
        """Names of the available templates, without the .jinja extension."""
        return sorted(path.stem for path in self.templates_dir.glob("*.jinja"))

    def get_template(self, template_name: str) -> Template:
        """Get a template by name.

        Raises:
            TemplateNotFound: If the template doesn't exist.
        """
        if template_name not in self._template_cache:
            try:
                self._template_cache[template_name] = self.env.get_template(
                    f"{template_name}.jinja"
                )
            except TemplateNotFound:
                raise TemplateNotFound(
                    f"Template '{template_name}' not found in {self.templates_dir}"
                )
        return self._template_cache[template_name]

    def render(self, template_name: str, **variables: Any) -> str:
        """Render ``template_name`` with ``variables``; undefined names raise."""
        return str(self.get_template(template_name).render(**variables))


_default_renderer: ReportRenderer | None = None


def render_report(template_name: str, **variables: Any) -> str:
    """Render a packaged report template.

    Args:
        template_name: Template name without the .jinja extension.
        **variables: Values referenced by the template.

    Returns:
        Rendered Markdown text.
    """
    global _default_renderer
    if _default_renderer is None:
        _default_renderer = ReportRenderer()
    return _default_renderer.render(template_name, **variables)
