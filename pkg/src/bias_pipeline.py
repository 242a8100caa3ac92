#!/usr/bin/env python3
# Scripted bias-audit run: planted group bias corpus, binary group classifier,
# explainer, audit, then the correlation and group-relabel checks.

import sys
import json
import argparse
import datetime
from pathlib import Path

# Try import for both direct execution and as a module
try:
    from filterlex_cli import run_command
except ImportError:
    parent_dir = Path(__file__).parent.parent
    sys.path.append(str(parent_dir))
    from filterlex_cli import run_command

from utils.run_config import RunConfig
from utils.reference_data import load_manifest
from utils.backbone import ThresholdTable, extract_features, load_backbone
from utils.bias_audit import GroupedDataset, filter_disparity, group_counts, group_ratio, qualified_images


def _run(command, cfg):
    if not run_command(command, cfg):
        raise SystemExit(f"{command} failed, see {cfg.out}/error.json")


def relabel_symmetry(manifest_path: Path, backbone_path: Path, thresholds_path: Path) -> bool:
    """Swapping A and B must map every ratio r to 1 - r and keep every disparity"""
    groups = GroupedDataset.from_manifest(load_manifest(manifest_path))
    swapped = groups.swapped()
    with open(thresholds_path, 'r', encoding='utf-8') as f:
        thresholds = ThresholdTable.from_dict(json.load(f))
    features = extract_features(load_backbone(backbone_path), groups.manifest, thresholds.layer)
    for u in range(features.shape[0]):
        qualified = qualified_images(features, u, thresholds.thresholds[u])
        r = group_ratio(*group_counts(qualified, groups))
        r_swapped = group_ratio(*group_counts(qualified, swapped))
        if (r is None) != (r_swapped is None) or (r is not None and abs(r + r_swapped - 1.0) > 1e-12):
            return False
        if abs(filter_disparity(qualified, groups)[2] - filter_disparity(qualified, swapped)[2]) > 1e-12:
            return False
    return True


def main():
    """Run the planted group-bias audit"""
    parser = argparse.ArgumentParser(description='filterlex bias audit pipeline')
    parser.add_argument('--root', default='runs/bias_pipeline', help='Output root')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--n-images', type=int, default=2000)
    parser.add_argument('--epochs', type=int, default=5, help='Backbone epochs')
    args = parser.parse_args()

    print(f"Running filterlex bias audit on {datetime.datetime.now().isoformat()}")
    root = Path(args.root)
    corpus = root / 'corpus'
    common = dict(seed=args.seed, embeddings=str(corpus / 'embeddings.txt'), manifest=str(corpus / 'manifest.jsonl'))

    _run('synth', RunConfig(out=str(corpus), seed=args.seed, n_images=args.n_images, synth_preset='bias'))
    _run('train-backbone', RunConfig(out=str(root / 'group_backbone'), backbone_target='group',
                                     backbone_epochs=args.epochs, **common))
    backbone = root / 'group_backbone' / 'backbone.pt'
    # the audit names filters with every planted concept, so none is held out
    _run('train-explainer', RunConfig(out=str(root / 'explainer'), backbone=str(backbone), train_fraction=1.0,
                                      **common))
    _run('bias-audit', RunConfig(out=str(root / 'audit'), backbone=str(backbone),
                                 explainer=str(root / 'explainer' / 'explainer.pt'), **common))

    with open(root / 'audit' / 'bias_report.json', 'r', encoding='utf-8') as f:
        report = json.load(f)
    rho = report['rho']
    layer = report['layer']
    symmetric = relabel_symmetry(corpus / 'manifest.jsonl', backbone, root / 'audit' / f"thresholds_{layer}.json")

    checks = {
        'Pearson rho vs annotation ratios >= 0.8': rho is not None and rho >= 0.8,
        'group relabel maps r to 1 - r': symmetric,
    }
    print(f"\nrho = {rho}")
    for name, ok in checks.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
