"""Static figures: gate heat maps and montages, ablation bars, loss curves"""
import logging
from pathlib import Path
from typing import List, Sequence

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

HEAT_CMAP = 'jet'


def save_heat_map(gate_map: np.ndarray, path):
    """Single-channel map in [0, 1] as a colour PNG"""
    plt.imsave(str(path), np.clip(gate_map, 0.0, 1.0), cmap=HEAT_CMAP, vmin=0.0, vmax=1.0)


def gate_montage(inputs: Sequence[np.ndarray], outputs: Sequence[np.ndarray],
                 gate_maps: Sequence[np.ndarray], titles: Sequence[str] = None):
    """One row per image: input | restored | gate map

    Returns
    -------
    matplotlib.figure.Figure
        with a len(inputs) x 3 grid of axes
    """
    rows = len(inputs)
    fig, axes = plt.subplots(rows, 3, figsize=(9, 3 * rows), squeeze=False)
    for row in range(rows):
        panels = (np.clip(inputs[row], 0, 1), np.clip(outputs[row], 0, 1), gate_maps[row])
        for col, (panel, label) in enumerate(zip(panels, ('input', 'restored', 'gate'))):
            ax = axes[row][col]
            if col == 2:
                ax.imshow(panel, cmap=HEAT_CMAP, vmin=0.0, vmax=1.0)
            else:
                ax.imshow(panel)
            ax.set_axis_off()
            if row == 0:
                ax.set_title(label)
        if titles:
            axes[row][0].set_ylabel(titles[row])
    fig.tight_layout()
    return fig


def ablation_bars(table: pd.DataFrame, metric: str = 'psnr'):
    """Bar per variant of table[metric]. Variants that failed (NaN) are left out"""
    table = table.dropna(subset=[metric])
    fig, ax = plt.subplots(figsize=(1.2 * max(len(table), 3), 3.5))
    ax.bar(table['variant'], table[metric], color='tab:blue')
    if 'baseline_' + metric in table:
        ax.axhline(table['baseline_' + metric].iloc[0], color='grey', linestyle='--', label='input')
        ax.legend()
    ax.set_ylabel(metric.upper())
    if len(table):
        low = table[metric].min()
        ax.set_ylim(bottom=low - 0.1 * abs(low))
    ax.tick_params(axis='x', rotation=30)
    fig.tight_layout()
    return fig


def loss_curve(entries: List[dict]):
    """Total and structural loss per step from training log entries"""
    steps = [e['step'] for e in entries]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [e['total'] for e in entries], label='total')
    ax.plot(steps, [e['l_s1'] + e['l_s2'] + e['l_s3'] for e in entries], label='structural', alpha=0.7)
    ax.set_xlabel('step')
    ax.set_ylabel('loss')
    ax.set_yscale('log')
    ax.legend()
    fig.tight_layout()
    return fig


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
