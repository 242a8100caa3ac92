#!/usr/bin/env python3
"""
filterlex - Unified CLI Tool

Explains the filters of a convolutional network with words:
- Generate a planted-concept corpus (images, masks, manifest, surrogate embeddings)
- Train a toy backbone (concept classifier or binary group classifier)
- Train the feature explainer on annotated masks
- Explain every filter and score the explanations against annotations
- Sweep the annotated-concept fraction to measure novel-concept discovery
- Audit a group classifier for group bias through its filters

Usage:
  filterlex_cli.py synth [--preset=<default|bias>] [--synth-spec=<file>] [--n-images=<n>]
  filterlex_cli.py train-backbone --manifest=<file> [--target=<concepts|group>]
  filterlex_cli.py train-explainer --manifest=<file> --embeddings=<file> --backbone=<file>
  filterlex_cli.py explain ... --explainer=<file> [--strategy=<name>]
  filterlex_cli.py evaluate ... [--strategy=all] [--x-sweep=5,10,20]
  filterlex_cli.py discover ... [--rates=0.4,0.6,0.8]
  filterlex_cli.py bias-audit ... [--top-k=<k>]
  filterlex_cli.py compare-layers ... [--layers=conv2,conv3,conv4]
  filterlex_cli.py concepts --files=<a.jsonl,b.jsonl> [--manifest=<file>]
  filterlex_cli.py --replay <out>/config_snapshot.json [--replay-out=<dir>]

Every command takes --config <json>, --seed, --layer, --out, --jobs and --verbose.
Settings can also come from FILTERLEX_* environment variables or a .env file.
"""

import os
import sys
import json
import argparse
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd

# Make the utils package importable when run from another directory
current_dir = os.path.dirname(os.path.realpath(__file__))
if current_dir not in sys.path:
    sys.path.insert(0, current_dir)

from utils.errors import ArtifactNotFoundError, ConfigError, FilterLexError, UndefinedStatisticError
from utils.run_config import RunConfig, load_run_config, load_snapshot, write_snapshot, STRATEGY_CHOICES
from utils.embedding_store import EmbeddingTable, load_embeddings
from utils.reference_data import DatasetManifest, load_manifest, split_concepts
from utils.synth_corpus import bias_spec, default_spec, generate, load_synth_spec, write_surrogate_embeddings
from utils.backbone import (BackboneArch, BackboneHandle, DUMP_MAGIC, FeatureSet, ThresholdTable,
                            compute_thresholds, extract_features, load_backbone, open_dump_backbone,
                            save_backbone, train_toy_backbone)
from utils.explainer import TrainConfig, TrainedExplainer, load_explainer, save_explainer, train_explainer, \
    write_history_csv
from utils.probe import (STRATEGY_ALIASES, Explanation, ProbeStrategy, count_discovered_concepts, explain_model,
                         read_explanations, write_explanations)
from utils.evaluation import (ScoreReport, assign_for_explanations, recall_table, score_model, write_score_csv,
                              write_score_report)
from utils.bias_audit import (GroupedDataset, annotation_ratios, audit, write_bias_csv, write_bias_report,
                              write_scatter_csv)
from utils.charts import plot_bias_scatter, plot_discovery_curve, plot_loss_history, plot_recall_curve

logger = logging.getLogger('filterlex')

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@dataclass
class ProbeContext:
    """Everything the probing commands share: inputs loaded once per run"""
    table: EmbeddingTable
    manifest: DatasetManifest
    backbone: BackboneHandle
    features: FeatureSet
    thresholds: ThresholdTable
    explainer: Optional[TrainedExplainer] = None


def _write_json(data, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
    return path


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if not getattr(cfg, n)]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join('--' + n.replace('_', '-') for n in missing)}")


def _open_backbone(path: str) -> BackboneHandle:
    """A torch checkpoint or an FMD1 feature dump, told apart by the file magic"""
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFoundError(path, "backbone")
    with open(path, 'rb') as f:
        magic = f.read(4)
    if magic == DUMP_MAGIC:
        return open_dump_backbone(path)
    return load_backbone(path)


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.explainer_epochs, learning_rate=cfg.explainer_learning_rate,
                       batch_size=cfg.batch_size, n_negatives=cfg.n_negatives, margin=cfg.margin,
                       seed=cfg.seed, hidden=cfg.hidden)


def _strategies(cfg: RunConfig) -> List[str]:
    if cfg.strategy == 'all':
        return list(STRATEGY_ALIASES)
    return [cfg.strategy]


def _probe_strategy(name: str, cfg: RunConfig, thresholds: ThresholdTable) -> ProbeStrategy:
    return ProbeStrategy(name, thresholds, cfg.clamp_negative)


def _layer_features(cfg: RunConfig, backbone: BackboneHandle, manifest: DatasetManifest,
                    layer: str) -> Tuple[FeatureSet, ThresholdTable]:
    features = extract_features(backbone, manifest, layer)
    thresholds = compute_thresholds(features, cfg.quantile_p, seed=cfg.seed)
    _write_json(thresholds.to_dict(), Path(cfg.out) / f"thresholds_{layer}.json")
    return features, thresholds


def _load_context(cfg: RunConfig, with_explainer: bool = True, manifest: Optional[DatasetManifest] = None,
                  layer: Optional[str] = None) -> ProbeContext:
    _require(cfg, 'embeddings', 'manifest', 'backbone', *(['explainer'] if with_explainer else []))
    table = load_embeddings(cfg.embeddings)
    manifest = manifest or load_manifest(cfg.manifest)
    backbone = _open_backbone(cfg.backbone)
    layer = layer or cfg.layer or backbone.last_layer
    backbone.check_layer(layer)
    explainer = None
    if with_explainer:
        explainer = load_explainer(cfg.explainer, table)
        if explainer.model.in_channels != backbone.layers[layer]:
            raise ConfigError(f"explainer expects {explainer.model.in_channels} channels but layer {layer} "
                              f"has {backbone.layers[layer]}")
    features, thresholds = _layer_features(cfg, backbone, manifest, layer)
    return ProbeContext(table, manifest, backbone, features, thresholds, explainer)


def _explain(ctx: ProbeContext, cfg: RunConfig, strategy_name: str,
             explainer: Optional[TrainedExplainer] = None) -> Tuple[List[Explanation], Dict[int, str]]:
    strategy = _probe_strategy(strategy_name, cfg, ctx.thresholds)
    return explain_model(ctx.backbone, explainer or ctx.explainer, ctx.table, ctx.features, ctx.manifest,
                         strategy, cfg.s, cfg.p_images, cfg.top_x, jobs=cfg.jobs)


def synth_command(cfg: RunConfig) -> bool:
    """Generate a planted-concept corpus and matching surrogate embeddings"""
    if cfg.synth_spec:
        spec = load_synth_spec(cfg.synth_spec)
    else:
        preset = bias_spec if cfg.synth_preset == 'bias' else default_spec
        spec = preset(seed=cfg.seed) if cfg.n_images == 0 else preset(n_images=cfg.n_images, seed=cfg.seed)
    out = Path(cfg.out)
    print(f"Generating {spec.n_images} images with {len(spec.concepts)} concepts...")
    manifest = generate(spec, out)
    embeddings = write_surrogate_embeddings(spec, out / 'embeddings.txt', dim=cfg.embedding_dim, seed=cfg.seed)
    print(f"Manifest: {out / 'manifest.jsonl'} ({len(manifest)} images)")
    print(f"Embeddings: {embeddings}")
    return True


def train_backbone_command(cfg: RunConfig) -> bool:
    """Train the toy CNN on the manifest and save a checkpoint"""
    _require(cfg, 'manifest')
    manifest = load_manifest(cfg.manifest)
    n = len(cfg.backbone_widths)
    arch = BackboneArch(widths=tuple(cfg.backbone_widths), pool=(False,) + (True,) * (n - 1))
    print(f"Training {cfg.backbone_target} backbone for {cfg.backbone_epochs} epochs...")
    handle = train_toy_backbone(manifest, arch, epochs=cfg.backbone_epochs, seed=cfg.seed,
                                target=cfg.backbone_target, learning_rate=cfg.backbone_learning_rate,
                                batch_size=cfg.backbone_batch_size)
    out = Path(cfg.out)
    path = save_backbone(handle, out / 'backbone.pt')
    _write_json({'target': handle.target, 'layers': handle.layers, 'class_names': handle.class_names,
                 'loss_trace': [round(v, 6) for v in handle.loss_trace],
                 'validation_ap': {k: round(v, 6) for k, v in handle.metrics.items()}},
                out / 'backbone_metrics.json')
    print(f"Backbone saved to {path}")
    return True


def train_explainer_command(cfg: RunConfig) -> bool:
    """Train the explainer on the train split of the concepts at one layer"""
    ctx = _load_context(cfg, with_explainer=False)
    if cfg.train_fraction >= 1:
        train, heldout = sorted(ctx.manifest.concepts), []
    else:
        train, heldout = split_concepts(ctx.manifest, cfg.train_fraction, cfg.seed)
    manifest = ctx.manifest.with_split(train, heldout)
    print(f"Training explainer on {len(train)} concepts ({len(heldout)} held out) at layer {ctx.features.layer}...")
    explainer = train_explainer(ctx.features, manifest, ctx.table, _train_config(cfg))
    out = Path(cfg.out)
    path = save_explainer(explainer, out / 'explainer.pt')
    write_history_csv(explainer, out / 'loss_history.csv')
    plot_loss_history(explainer.history, out / 'loss_history.png')
    _write_json({'layer': ctx.features.layer, 'train_concepts': train, 'heldout_concepts': heldout,
                 'skipped_pairs': explainer.skipped_pairs, 'missing_concepts': explainer.missing_concepts},
                out / 'split.json')
    print(f"Explainer saved to {path}")
    return True


def explain_command(cfg: RunConfig) -> bool:
    """Write word explanations for every filter of a layer"""
    ctx = _load_context(cfg)
    out = Path(cfg.out)
    for name in _strategies(cfg):
        print(f"Explaining {ctx.features.shape[0]} filters of {ctx.features.layer} with strategy {name}...")
        explanations, failures = _explain(ctx, cfg, name)
        path = write_explanations(explanations, out / f"explanations_{STRATEGY_ALIASES[name]}.jsonl")
        if failures:
            _write_json({str(u): msg for u, msg in failures.items()},
                        out / f"failures_{STRATEGY_ALIASES[name]}.json")
        print(f"{len(explanations)} explanations written to {path}")
    return True


def evaluate_command(cfg: RunConfig) -> bool:
    """Explain and score against annotated masks for each strategy, with the recall-vs-x sweep"""
    ctx = _load_context(cfg)
    out = Path(cfg.out)
    reports: List[ScoreReport] = []
    for name in _strategies(cfg):
        kind = STRATEGY_ALIASES[name]
        explanations, _ = _explain(ctx, cfg, name)
        write_explanations(explanations, out / f"explanations_{kind}.jsonl")
        assignments = assign_for_explanations(explanations, ctx.features, ctx.manifest, ctx.thresholds,
                                              cfg.iou_threshold)
        report = score_model(explanations, assignments, cfg.x_sweep)
        write_score_report(report, out / f"scores_{kind}.json")
        write_score_csv(report, out / f"scores_{kind}.csv")
        reports.append(report)
        summary = ', '.join(f"recall@{x}={v:.3f}" for x, v in report.recall.items())
        print(f"{kind}: {summary} over {report.n_pairs} pairs ({report.skipped_pairs} skipped)")

    table = recall_table(reports)
    table.to_csv(out / 'recall_summary.csv', index=False)
    plot_recall_curve(table, out / 'recall_curve.png')
    return True


def discover_command(cfg: RunConfig) -> bool:
    """Novel-concept recall as the fraction of annotated training concepts grows"""
    ctx = _load_context(cfg, with_explainer=False)
    strategy = _strategies(cfg)[0]
    rows = []
    for rate in cfg.annotation_rates:
        train, heldout = split_concepts(ctx.manifest, rate, cfg.seed)
        print(f"Annotation rate {rate}: training on {len(train)} concepts, {len(heldout)} novel...")
        explainer = train_explainer(ctx.features, ctx.manifest.with_split(train, heldout), ctx.table,
                                    _train_config(cfg))
        explanations, _ = _explain(ctx, cfg, strategy, explainer)
        assignments = assign_for_explanations(explanations, ctx.features, ctx.manifest, ctx.thresholds,
                                              cfg.iou_threshold)
        try:
            report = score_model(explanations, assignments, [cfg.top_x], restrict_to=heldout)
            recall = round(report.recall[cfg.top_x], 6)
        except UndefinedStatisticError as e:
            logger.warning(f"Rate {rate}: {e}")
            recall = None
        found = sorted(set(heldout) & {w for e in explanations for w in e.top(cfg.top_x)})
        rows.append({'rate': rate, 'n_train': len(train), 'heldout': heldout,
                     'novel_recall': recall, 'discovered': found})
        print(f"  novel recall@{cfg.top_x} = {recall}, discovered {found}")

    out = Path(cfg.out)
    _write_json({'strategy': STRATEGY_ALIASES[strategy], 'x': cfg.top_x, 'rows': rows}, out / 'discovery.json')
    pd.DataFrame(rows).to_csv(out / 'discovery.csv', index=False)
    curve = {r['rate']: r['novel_recall'] for r in rows if r['novel_recall'] is not None}
    if curve:
        plot_discovery_curve(curve, out / 'discovery_curve.png')
    return True


def bias_audit_command(cfg: RunConfig) -> bool:
    """Rank filters by group disparity and compare concept ratios with the annotations"""
    _require(cfg, 'manifest')
    groups = GroupedDataset.from_manifest(load_manifest(cfg.manifest))
    ctx = _load_context(cfg, manifest=groups.manifest)
    reference = annotation_ratios(groups)
    strategy = _probe_strategy(_strategies(cfg)[0], cfg, ctx.thresholds)
    print(f"Auditing {ctx.features.shape[0]} filters over groups {groups.sizes}...")
    report = audit(ctx.backbone, ctx.explainer, ctx.table, groups, ctx.features, ctx.thresholds, strategy,
                   cfg.s, cfg.p_images, cfg.top_x, cfg.top_k, reference, cfg.jobs)
    out = Path(cfg.out)
    write_bias_report(report, out / 'bias_report.json')
    write_bias_csv(report, out / 'bias_filters.csv')
    _write_json({c: round(r, 6) for c, r in reference.items()}, out / 'reference_ratios.json')
    if report.scatter is not None:
        write_scatter_csv(report.scatter, out / 'bias_scatter.csv')
        plot_bias_scatter(report.scatter, report.rho, out / 'bias_scatter.png')
    for row in report.top_rows:
        print(f"  filter {row['filter']:3d}  {str(row['top_word']):12s} A {row['pct_a']:6.2f}%  "
              f"B {row['pct_b']:6.2f}%  disparity {row['disparity']:6.2f}")
    print(f"Pearson rho vs annotations: {report.rho}")
    return True


def compare_layers_command(cfg: RunConfig) -> bool:
    """Train an explainer per layer and compare recall across layers"""
    _require(cfg, 'embeddings', 'manifest', 'backbone')
    table = load_embeddings(cfg.embeddings)
    manifest = load_manifest(cfg.manifest)
    backbone = _open_backbone(cfg.backbone)
    layers = cfg.layers or list(backbone.layers)
    strategy = _strategies(cfg)[0]
    reports = []
    for layer in layers:
        backbone.check_layer(layer)
        features, thresholds = _layer_features(cfg, backbone, manifest, layer)
        print(f"Layer {layer}: training explainer on {features.shape[0]} filters...")
        explainer = train_explainer(features, manifest, table, _train_config(cfg))
        ctx = ProbeContext(table, manifest, backbone, features, thresholds, explainer)
        explanations, _ = _explain(ctx, cfg, strategy)
        assignments = assign_for_explanations(explanations, features, manifest, thresholds, cfg.iou_threshold)
        report = score_model(explanations, assignments, cfg.x_sweep)
        reports.append(report)
        print(f"  {', '.join(f'recall@{x}={v:.3f}' for x, v in report.recall.items())}")

    out = Path(cfg.out)
    long = recall_table(reports, key='layer')
    long.to_csv(out / 'layer_recall.csv', index=False)
    _write_json({r.layer: {str(x): round(v, 6) for x, v in r.recall.items()} for r in reports},
                out / 'layer_recall.json')
    plot_recall_curve(long, out / 'layer_recall.png', hue='layer')
    return True


def concepts_command(cfg: RunConfig) -> bool:
    """Count the distinct concepts named by top-1 words in each explanation file"""
    _require(cfg, 'files')
    vocabulary = load_manifest(cfg.manifest).concepts if cfg.manifest else None
    rows = []
    for file in cfg.files:
        explanations = read_explanations(file)
        counts = count_discovered_concepts(explanations, vocabulary)
        rows.append({'file': file, 'n_filters': len(explanations), 'n_concepts': len(counts), 'concepts': counts})
        print(f"{file}: {len(counts)} concepts across {len(explanations)} filters")
    out = Path(cfg.out)
    _write_json(rows, out / 'concepts.json')
    pd.DataFrame([{k: v for k, v in r.items() if k != 'concepts'} for r in rows]).to_csv(
        out / 'concepts.csv', index=False)
    return True


COMMANDS = {
    'synth': synth_command,
    'train-backbone': train_backbone_command,
    'train-explainer': train_explainer_command,
    'explain': explain_command,
    'evaluate': evaluate_command,
    'discover': discover_command,
    'bias-audit': bias_audit_command,
    'compare-layers': compare_layers_command,
    'concepts': concepts_command,
}


def error_record(command: str, error: Exception, out_dir: Optional[Path] = None) -> Dict:
    """Report a domain error as JSON on stderr (and in <out>/error.json when the run directory is ours)"""
    record = {'error': type(error).__name__, 'message': str(error), 'command': command}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if out_dir is not None:
        _write_json(record, out_dir / 'error.json')
    return record


def run_command(command: str, cfg: RunConfig) -> bool:
    """Snapshot the resolved config, then run the command"""
    try:
        write_snapshot(command, cfg)
    except FilterLexError as e:
        error_record(command, e)
        return False
    try:
        return COMMANDS[command](cfg)
    except FilterLexError as e:
        error_record(command, e, Path(cfg.out))
        return False


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps absent flags out of the namespace so they never override config values
    s = argparse.SUPPRESS
    parser.add_argument('--config', default=s, help='JSON config file')
    parser.add_argument('--out', default=s, help='Output directory (write-once)')
    parser.add_argument('--seed', type=int, default=s, help='Random seed [default: 0]')
    parser.add_argument('--layer', default=s, help='Layer to explain [default: last conv layer]')
    parser.add_argument('--jobs', type=int, default=s, help='Worker threads for probing [default: 1]')
    parser.add_argument('--verbose', action='store_true', default=s, help='Debug logging')
    parser.add_argument('--embeddings', default=s, help='Word embedding file (GloVe text or EMB1 cache)')
    parser.add_argument('--manifest', default=s, help='Reference dataset manifest (JSON lines)')
    parser.add_argument('--backbone', default=s, help='Backbone checkpoint or FMD1 feature dump')
    parser.add_argument('--explainer', default=s, help='Explainer checkpoint')
    parser.add_argument('--strategy', choices=STRATEGY_CHOICES, default=s,
                        help='Probing strategy [default: attention]')
    parser.add_argument('--s', type=int, default=s, help='Nearest words per image [default: 5]')
    parser.add_argument('--p-images', dest='p_images', type=int, default=s,
                        help='Top activated images per filter [default: 10]')
    parser.add_argument('--top-x', dest='top_x', type=int, default=s, help='Words per explanation [default: 5]')
    parser.add_argument('--quantile-p', dest='quantile_p', type=float, default=s,
                        help='Fraction of activations above T_u [default: 0.005]')
    parser.add_argument('--iou-threshold', dest='iou_threshold', type=float, default=s,
                        help='Minimum IoU for a ground-truth concept [default: 0.04]')
    parser.add_argument('--clamp-negative', dest='clamp_negative', action='store_true', default=s,
                        help='Clamp negative attention weights to zero')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='filterlex - explain CNN filters with words')
    parser.add_argument('--replay', help='Re-run a command from its config_snapshot.json')
    parser.add_argument('--replay-out', dest='replay_out', help='Output directory for --replay')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')
    subparsers = parser.add_subparsers(dest='command', help='Command to run')
    s = argparse.SUPPRESS

    synth_parser = subparsers.add_parser('synth', help='Generate a planted-concept corpus')
    synth_parser.add_argument('--preset', dest='synth_preset', choices=('default', 'bias'), default=s)
    synth_parser.add_argument('--synth-spec', dest='synth_spec', default=s, help='JSON corpus description')
    synth_parser.add_argument('--n-images', dest='n_images', type=int, default=s)
    synth_parser.add_argument('--embedding-dim', dest='embedding_dim', type=int, default=s)

    backbone_parser = subparsers.add_parser('train-backbone', help='Train the toy CNN backbone')
    backbone_parser.add_argument('--target', dest='backbone_target', choices=('concepts', 'group'), default=s)
    backbone_parser.add_argument('--epochs', dest='backbone_epochs', type=int, default=s)
    backbone_parser.add_argument('--widths', dest='backbone_widths', default=s, help='Comma-separated conv widths')
    backbone_parser.add_argument('--batch-size', dest='backbone_batch_size', type=int, default=s)

    explainer_parser = subparsers.add_parser('train-explainer', help='Train the feature explainer')
    explainer_parser.add_argument('--epochs', dest='explainer_epochs', type=int, default=s)
    explainer_parser.add_argument('--train-fraction', dest='train_fraction', type=float, default=s)
    explainer_parser.add_argument('--margin', type=float, default=s)

    subparsers.add_parser('explain', help='Explain every filter of a layer')

    evaluate_parser = subparsers.add_parser('evaluate', help='Score explanations against annotations')
    evaluate_parser.add_argument('--x-sweep', dest='x_sweep', default=s, help='Comma-separated x values')

    discover_parser = subparsers.add_parser('discover', help='Novel-concept recall per annotation rate')
    discover_parser.add_argument('--rates', dest='annotation_rates', default=s, help='Comma-separated fractions')
    discover_parser.add_argument('--epochs', dest='explainer_epochs', type=int, default=s)

    bias_parser = subparsers.add_parser('bias-audit', help='Group bias audit of a backbone')
    bias_parser.add_argument('--top-k', dest='top_k', type=int, default=s)

    layers_parser = subparsers.add_parser('compare-layers', help='Recall per layer')
    layers_parser.add_argument('--layers', default=s, help='Comma-separated layer names')
    layers_parser.add_argument('--x-sweep', dest='x_sweep', default=s)
    layers_parser.add_argument('--epochs', dest='explainer_epochs', type=int, default=s)

    concepts_parser = subparsers.add_parser('concepts', help='Concept counts across explanation files')
    concepts_parser.add_argument('--files', default=s, help='Comma-separated explanation JSON-lines files')

    for sub in subparsers.choices.values():
        _add_common_flags(sub)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT, force=True)

    config_keys = {f.name for f in fields(RunConfig)}
    try:
        if args.replay:
            command, cfg = load_snapshot(args.replay, args.replay_out)
            print(f"Replaying {command} from {args.replay} into {cfg.out}")
        elif args.command:
            command = args.command
            overrides = {k: v for k, v in vars(args).items() if k in config_keys}
            cfg = load_run_config(getattr(args, 'config', None), overrides)
        else:
            parser.print_help()
            return 1
    except FilterLexError as e:
        error_record(args.command or 'replay', e)
        return 1

    success = run_command(command, cfg)
    return 0 if success else 1


if __name__ == '__main__':
    sys.exit(main())
