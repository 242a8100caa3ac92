#!/usr/bin/env python3
"""
Static charts for filterlex runs

- recall vs number of explanation words, one line per strategy (or layer)
- novel-concept recall vs annotated-concept fraction
- discovered vs reference group ratio per concept
- explainer training / held-out loss per epoch

Dependencies: matplotlib, seaborn, pandas
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
import matplotlib
matplotlib.use('Agg')  # Use non-interactive backend to prevent GUI issues
import matplotlib.pyplot as plt
import seaborn as sns

# Set default style
plt.style.use('seaborn-v0_8-whitegrid')

logger = logging.getLogger(__name__)


def _save(path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.tight_layout()
    plt.savefig(path, dpi=150)
    plt.close()
    logger.debug(f"Saved chart {path}")
    return path


def plot_recall_curve(table: pd.DataFrame, path: Union[str, Path], hue: str = 'strategy') -> Path:
    """
    Recall@x for every x of the sweep

    Args:
        table: Long table with columns (hue, x, recall)
        path: Output image
        hue: Column naming the line of each row
    """
    plt.figure(figsize=(8, 5))
    sns.lineplot(x='x', y='recall', hue=hue, data=table, marker='o')
    plt.title('Recall vs explanation length')
    plt.xlabel('Words per explanation (x)')
    plt.ylabel('Recall')
    plt.ylim(0, 1)
    plt.xticks(sorted(table['x'].unique()))
    return _save(path)


def plot_discovery_curve(rates: Dict[float, float], path: Union[str, Path]) -> Path:
    """Novel-concept recall for each annotated-concept fraction"""
    df = pd.DataFrame({'rate': list(rates), 'recall': list(rates.values())}).sort_values('rate')
    plt.figure(figsize=(7, 5))
    sns.lineplot(x='rate', y='recall', data=df, marker='o', color='purple')
    plt.title('Novel concepts discovered')
    plt.xlabel('Fraction of annotated concepts used for training')
    plt.ylabel('Novel-concept recall@5')
    plt.ylim(0, 1)
    return _save(path)


def plot_bias_scatter(scatter: pd.DataFrame, rho: Optional[float], path: Union[str, Path]) -> Path:
    """Discovered concept ratio against the ratio counted from annotations, with the identity line"""
    plt.figure(figsize=(6, 6))
    sns.scatterplot(x='reference_ratio', y='discovered_ratio', data=scatter, s=60, color='blue')
    for _, row in scatter.iterrows():
        plt.text(row['reference_ratio'] + 0.01, row['discovered_ratio'] + 0.01, row['concept'], fontsize=9)
    plt.plot([0, 1], [0, 1], color='gray', linestyle='--', alpha=0.7)
    plt.axhline(y=0.5, color='red', linestyle=':', alpha=0.5)
    title = 'Group ratio per concept'
    if rho is not None:
        title += f' (rho = {rho:.3f})'
    plt.title(title)
    plt.xlabel('Reference ratio (annotations)')
    plt.ylabel('Discovered ratio (filters)')
    plt.xlim(0, 1)
    plt.ylim(0, 1)
    return _save(path)


def plot_loss_history(history: List[Dict], path: Union[str, Path]) -> Path:
    """Training and held-out loss per epoch"""
    df = pd.DataFrame(history)
    long = df.melt(id_vars='epoch', value_vars=[c for c in ('train_loss', 'heldout_loss') if c in df],
                   var_name='split', value_name='loss').dropna()
    plt.figure(figsize=(8, 5))
    sns.lineplot(x='epoch', y='loss', hue='split', data=long)
    plt.title('Explainer hinge rank loss')
    plt.xlabel('Epoch')
    plt.ylabel('Loss')
    return _save(path)
