"""Interactive HTML figures for training histories and network graphs."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple, Union

import networkx as nx

if TYPE_CHECKING:
    from cdsl.core.network import NetworkGraph
    from cdsl.train.trainer import TrainHistory

try:
    import plotly.graph_objects as go
    from plotly.subplots import make_subplots

    PLOTLY_AVAILABLE = True
except ImportError:
    PLOTLY_AVAILABLE = False

logger = logging.getLogger(__name__)

KIND_COLORS = {
    "input": "#2C3E50",
    "conv": "#1F77B4",
    "transposed_conv": "#FF7F0E",
    "batch_norm": "#B0C4DE",
    "relu": "#2CA02C",
    "sigmoid": "#D62728",
    "max_pool": "#9467BD",
    "add": "#8C564B",
    "concat": "#E377C2",
    "bilinear_resize": "#17BECF",
}


class TrainingVisualizer:
    """Creates plotly figures; every method returns None when plotly is missing."""

    def __init__(self) -> None:
        if not PLOTLY_AVAILABLE:
            logger.warning("Plotly not available. Install with: pip install plotly")

    def plot_history(
        self, history: TrainHistory, title: Optional[str] = None
    ) -> Optional["go.Figure"]:
        """Loss curves on the left, Dice curves on the right, selected epoch marked.

        Args:
            history: Per-epoch training record.
            title: Figure title.

        Returns:
            Plotly figure object, or None if Plotly is not available.
        """
        if not PLOTLY_AVAILABLE:
            return None

        epochs = list(range(1, history.epochs_run + 1))
        fig = make_subplots(rows=1, cols=2, subplot_titles=("Loss", "Hard Dice"))
        series = [
            (history.train_loss, "train loss", 1),
            (history.val_loss, "val loss", 1),
            (history.train_dice, "train dice", 2),
            (history.val_dice, "val dice", 2),
        ]
        for values, name, col in series:
            fig.add_trace(go.Scatter(x=epochs, y=values, mode="lines", name=name), row=1, col=col)
        if history.selected_epoch:
            for col in (1, 2):
                fig.add_vline(
                    x=history.selected_epoch, line=dict(color="#C71585", dash="dot"), row=1, col=col
                )
        fig.update_layout(
            title=dict(text=title or "Training history", x=0.5, xanchor="center"),
            hovermode="x unified",
            plot_bgcolor="#FFFFFF",
        )
        fig.update_xaxes(title_text="epoch")
        return fig

    def plot_network(
        self, graph: NetworkGraph, width: int = 1600, height: int = 700
    ) -> Optional["go.Figure"]:
        """Layered drawing of the tensor graph; skip and injection edges are visible."""
        if not PLOTLY_AVAILABLE:
            return None

        dag = graph.to_networkx()
        positions = self._layered_positions(dag)
        edge_x: List[Optional[float]] = []
        edge_y: List[Optional[float]] = []
        for source, target in dag.edges:
            (x0, y0), (x1, y1) = positions[source], positions[target]
            edge_x += [x0, x1, None]
            edge_y += [y0, y1, None]

        names = list(dag.nodes)
        kinds = [dag.nodes[name]["kind"] for name in names]
        fig = go.Figure()
        fig.add_trace(
            go.Scatter(
                x=edge_x,
                y=edge_y,
                mode="lines",
                line=dict(color="#B0C4DE", width=1),
                hoverinfo="none",
                showlegend=False,
            )
        )
        fig.add_trace(
            go.Scatter(
                x=[positions[name][0] for name in names],
                y=[positions[name][1] for name in names],
                mode="markers",
                marker=dict(size=9, color=[KIND_COLORS.get(kind, "#7F7F7F") for kind in kinds]),
                hovertext=[
                    f"{name}<br>{kind}<br>{tuple(dag.nodes[name]['shape'])}"
                    for name, kind in zip(names, kinds)
                ],
                hoverinfo="text",
                showlegend=False,
            )
        )
        fig.update_layout(
            title=dict(text=f"Network graph ({len(graph.nodes)} layers)", x=0.5),
            xaxis=dict(showgrid=False, zeroline=False, showticklabels=False),
            yaxis=dict(showgrid=False, zeroline=False, showticklabels=False),
            plot_bgcolor="rgba(240, 248, 255, 0.9)",
            width=width,
            height=height,
        )
        return fig

    def _layered_positions(self, dag: nx.DiGraph) -> Dict[str, Tuple[float, float]]:
        positions: Dict[str, Tuple[float, float]] = {}
        for depth, layer in enumerate(nx.topological_generations(dag)):
            for row, name in enumerate(sorted(layer)):
                positions[name] = (float(depth), -float(row))
        return positions

    def save_html(self, fig: Optional["go.Figure"], path: Union[str, Path]) -> bool:
        """Write ``fig`` as a standalone HTML file; False when there is nothing to write."""
        if fig is None:
            return False
        # Fixed div id keeps repeated runs byte-identical.
        fig.write_html(str(path), include_plotlyjs="cdn", div_id=Path(path).stem)
        return True
