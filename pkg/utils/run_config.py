#!/usr/bin/env python3
"""
Run Configuration

One flat RunConfig per command. Values are resolved in this order (later wins):

1. dataclass defaults
2. FILTERLEX_* environment variables (a .env file in the working directory is read first)
3. the JSON file given with --config
4. command-line flags

The resolved config is validated before any compute and written to
<out>/config_snapshot.json together with the command name. The snapshot alone is
enough to re-run the command (--replay). The output location itself is not part
of the snapshot, so a replay can target a fresh directory.
"""

import os
import json
import logging
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dotenv import load_dotenv

from utils.errors import ArtifactNotFoundError, ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = 'FILTERLEX_'
SNAPSHOT_NAME = 'config_snapshot.json'
STRATEGY_CHOICES = ('attention', 'original', 'image-mask', 'act-mask', 'all')
SYNTH_PRESETS = ('default', 'bias')
BACKBONE_TARGETS = ('concepts', 'group')

# element types of list-valued fields
LIST_ITEM_TYPES = {
    'backbone_widths': int,
    'x_sweep': int,
    'annotation_rates': float,
    'layers': str,
    'files': str,
}


@dataclass
class RunConfig:
    # paths
    embeddings: str = ''
    manifest: str = ''
    backbone: str = ''
    explainer: str = ''
    synth_spec: str = ''
    files: List[str] = field(default_factory=list)
    out: str = 'runs/latest'

    seed: int = 0
    layer: str = ''
    jobs: int = 1

    # corpus
    synth_preset: str = 'default'
    n_images: int = 0
    embedding_dim: int = 50

    # backbone
    backbone_widths: List[int] = field(default_factory=lambda: [16, 32, 32, 32])
    backbone_epochs: int = 5
    backbone_target: str = 'concepts'
    backbone_learning_rate: float = 3e-3
    backbone_batch_size: int = 16

    # explainer
    train_fraction: float = 0.7
    explainer_epochs: int = 20
    explainer_learning_rate: float = 5e-3
    batch_size: int = 64
    n_negatives: int = 0
    margin: float = 1.0
    hidden: int = 0

    # probing and scoring
    strategy: str = 'attention'
    s: int = 5
    p_images: int = 10
    top_x: int = 5
    quantile_p: float = 0.005
    iou_threshold: float = 0.04
    clamp_negative: bool = False
    x_sweep: List[int] = field(default_factory=lambda: [5, 10, 20])
    annotation_rates: List[float] = field(default_factory=lambda: [0.4, 0.6, 0.8])
    layers: List[str] = field(default_factory=list)
    top_k: int = 10

    def validate(self) -> 'RunConfig':
        """Check every documented constraint; raises ConfigError on the first violation"""
        checks = [
            (0 < self.quantile_p < 1, f"quantile_p must be in (0, 1), got {self.quantile_p}"),
            (0 <= self.iou_threshold < 1, f"iou_threshold must be in [0, 1), got {self.iou_threshold}"),
            (self.s >= 1, f"s must be >= 1, got {self.s}"),
            (self.p_images >= 1, f"p_images must be >= 1, got {self.p_images}"),
            (self.top_x >= 1, f"top_x must be >= 1, got {self.top_x}"),
            (self.top_k >= 1, f"top_k must be >= 1, got {self.top_k}"),
            (self.strategy in STRATEGY_CHOICES, f"strategy must be one of {STRATEGY_CHOICES}, got '{self.strategy}'"),
            (0 < self.train_fraction <= 1, f"train_fraction must be in (0, 1], got {self.train_fraction}"),
            (self.margin > 0, f"margin must be positive, got {self.margin}"),
            (self.explainer_learning_rate > 0 and self.backbone_learning_rate > 0, "learning rates must be positive"),
            (self.explainer_epochs >= 0 and self.backbone_epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1 and self.backbone_batch_size >= 1, "batch sizes must be >= 1"),
            (self.n_negatives >= 0 and self.hidden >= 0, "n_negatives and hidden must be >= 0"),
            (self.jobs >= 1, f"jobs must be >= 1, got {self.jobs}"),
            (self.n_images >= 0, f"n_images must be >= 0, got {self.n_images}"),
            (self.embedding_dim >= 2, f"embedding_dim must be >= 2, got {self.embedding_dim}"),
            (len(self.x_sweep) > 0 and min(self.x_sweep) >= 1, f"x_sweep must hold positive counts, got {self.x_sweep}"),
            (all(0 < r < 1 for r in self.annotation_rates), f"annotation_rates must lie in (0, 1), got {self.annotation_rates}"),
            (len(self.backbone_widths) > 0 and min(self.backbone_widths) >= 1, "backbone_widths must be positive"),
            (self.synth_preset in SYNTH_PRESETS, f"synth_preset must be one of {SYNTH_PRESETS}"),
            (self.backbone_target in BACKBONE_TARGETS, f"backbone_target must be one of {BACKBONE_TARGETS}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def snapshot_dict(self) -> Dict[str, Any]:
        data = self.to_dict()
        data.pop('out')
        return data


def _field_types() -> Dict[str, Any]:
    defaults = RunConfig()
    return {f.name: getattr(defaults, f.name) for f in fields(RunConfig)}


def coerce_value(name: str, raw: Any) -> Any:
    """Convert a string (env var) or JSON value to the type of the field's default"""
    defaults = _field_types()
    if name not in defaults:
        raise ConfigError(f"unknown config key '{name}'")
    default = defaults[name]
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text not in ('1', '0', 'true', 'false', 'yes', 'no'):
                raise ValueError(raw)
            return text in ('1', 'true', 'yes')
        if isinstance(default, list):
            item_type = LIST_ITEM_TYPES[name]
            items = raw if isinstance(raw, list) else [v for v in str(raw).split(',') if v.strip()]
            return [item_type(v.strip() if isinstance(v, str) else v) for v in items]
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for '{name}': {raw!r}")


def env_overrides(environ: Optional[Dict[str, str]] = None, dotenv: bool = True) -> Dict[str, Any]:
    """FILTERLEX_<FIELD> variables as config overrides"""
    if environ is None:
        if dotenv:
            load_dotenv()
        environ = dict(os.environ)
    known = _field_types()
    overrides = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name in known:
            overrides[name] = coerce_value(name, value)
        else:
            logger.warning(f"Ignoring unknown environment setting {key}")
    return overrides


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFoundError(path, "config file")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return {name: coerce_value(name, value) for name, value in data.items()}


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None,
                    environ: Optional[Dict[str, str]] = None, use_env: bool = True) -> RunConfig:
    """
    Resolve defaults < environment < config file < overrides, then validate

    Args:
        path: Optional JSON config file
        overrides: Values from command-line flags; None values are ignored
        environ: Environment mapping to read instead of os.environ (tests)
        use_env: Set False to skip environment variables entirely

    Returns:
        Validated RunConfig
    """
    values: Dict[str, Any] = {}
    if use_env:
        values.update(env_overrides(environ))
    if path:
        values.update(read_config_file(path))
    for name, value in (overrides or {}).items():
        if value is not None:
            values[name] = coerce_value(name, value)
    return RunConfig(**values).validate()


def snapshot_text(command: str, cfg: RunConfig) -> str:
    return json.dumps({'command': command, 'config': cfg.snapshot_dict()}, indent=2, sort_keys=True) + '\n'


def write_snapshot(command: str, cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> Path:
    """
    Write <out>/config_snapshot.json

    Raises:
        ConfigError: the directory already holds a snapshot of a different run
    """
    out_dir = Path(out_dir or cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / SNAPSHOT_NAME
    text = snapshot_text(command, cfg)
    if path.exists():
        existing = path.read_text(encoding='utf-8')
        if existing != text:
            raise ConfigError(f"{out_dir} already holds the outputs of a different run; choose another --out")
        logger.info(f"Re-running identical configuration in {out_dir}")
    path.write_text(text, encoding='utf-8')
    return path


def load_snapshot(path: Union[str, Path], out: Optional[str] = None) -> Tuple[str, RunConfig]:
    """
    Read a snapshot back

    Returns:
        (command name, validated RunConfig with out set to the given directory or the snapshot's own)
    """
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFoundError(path, "config snapshot")
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    if 'command' not in data or 'config' not in data:
        raise ConfigError(f"{path} is not a config snapshot")
    values = {name: coerce_value(name, value) for name, value in data['config'].items()}
    values['out'] = out or str(path.parent)
    return data['command'], RunConfig(**values).validate()
