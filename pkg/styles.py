from rich.console import Console
from rich.table import Table
from rich.theme import Theme

THEME = Theme({
    "ok": "bold green",
    "info": "cyan",
    "warn": "bold yellow",
    "err": "bold red",
    "accent": "#3A7BD5",
})

console = Console(theme=THEME, highlight=False)
err_console = Console(theme=THEME, stderr=True, highlight=False)


def metrics_table(reports: dict) -> Table:
    """
    One row per evaluated model.
    """
    table = Table(header_style="accent")
    for col in ("model", "fluency", "style", "diversity", "novelty"):
        table.add_column(col, justify="right" if col != "model" else "left")
    for label, rep in reports.items():
        table.add_row(
            label,
            f"{rep['fluency']:.3f}",
            f"{rep['style_score']:.3f}",
            f"{rep['diversity']['value']:.3f} [{rep['diversity']['lower']:.2f}, {rep['diversity']['upper']:.2f}]",
            f"{rep['novelty']['value']:.3f} [{rep['novelty']['lower']:.2f}, {rep['novelty']['upper']:.2f}]",
        )
    return table
