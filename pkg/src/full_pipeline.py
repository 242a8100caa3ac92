#!/usr/bin/env python3
# Scripted end-to-end run on the planted-concept corpus: synth, backbone, explainer,
# evaluation of every strategy, random-backbone sanity check and discovery sweep.
# Prints whether each acceptance check holds (median over seeds).

import sys
import json
import argparse
import datetime
import statistics
from pathlib import Path

# Try import for both direct execution and as a module
try:
    from filterlex_cli import run_command
except ImportError:
    parent_dir = Path(__file__).parent.parent
    sys.path.append(str(parent_dir))
    from filterlex_cli import run_command

from utils.run_config import RunConfig, SNAPSHOT_NAME, load_snapshot
from utils.probe import read_explanations


def _run(command, cfg):
    if not run_command(command, cfg):
        raise SystemExit(f"{command} failed, see {cfg.out}/error.json")


def _load(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def run_seed(root: Path, seed: int, n_images: int, epochs: int) -> dict:
    """All stages for one seed; returns the numbers the checks need"""
    base = root / f"seed{seed}"
    corpus = base / 'corpus'
    common = dict(seed=seed, embeddings=str(corpus / 'embeddings.txt'), manifest=str(corpus / 'manifest.jsonl'))

    _run('synth', RunConfig(out=str(corpus), seed=seed, n_images=n_images))
    _run('train-backbone', RunConfig(out=str(base / 'backbone'), backbone_epochs=epochs, **common))
    _run('train-backbone', RunConfig(out=str(base / 'random_backbone'), backbone_epochs=0, **common))

    results = {}
    for label in ('backbone', 'random_backbone'):
        backbone = str(base / label / 'backbone.pt')
        _run('train-explainer', RunConfig(out=str(base / f"{label}_explainer"), backbone=backbone, **common))
        explainer = str(base / f"{label}_explainer" / 'explainer.pt')
        strategy = 'all' if label == 'backbone' else 'attention'
        _run('evaluate', RunConfig(out=str(base / f"{label}_evaluate"), backbone=backbone, explainer=explainer,
                                   strategy=strategy, **common))
        results[label] = base / f"{label}_evaluate"

    scores = {}
    monotone = True
    for kind in ('filter_attention', 'activation_masking', 'image_masking', 'original_image'):
        report = _load(results['backbone'] / f"scores_{kind}.json")
        scores[kind] = report['recall']['5']
        for row in report['per_filter']:
            values = [row[f'recall@{x}'] for x in (5, 10, 20)]
            if values[0] is not None and not values[0] <= values[1] <= values[2]:
                monotone = False
    random_recall = _load(results['random_backbone'] / 'scores_filter_attention.json')['recall']['5']

    split = _load(base / 'backbone_explainer' / 'split.json')
    explanations = read_explanations(results['backbone'] / 'explanations_filter_attention.jsonl')
    found = sorted(set(split['heldout_concepts']) & {w for e in explanations for w in e.top(5)})

    _run('discover', RunConfig(out=str(base / 'discover'), backbone=str(base / 'backbone' / 'backbone.pt'),
                               **common))
    discovery = {row['rate']: row['novel_recall'] for row in _load(base / 'discover' / 'discovery.json')['rows']}

    return {'scores': scores, 'random': random_recall, 'monotone': monotone, 'novel_found': found,
            'discovery': discovery, 'evaluate_dir': results['backbone']}


def check_replay(evaluate_dir: Path, replay_dir: Path) -> bool:
    """Re-run evaluate from its snapshot and compare every JSON output byte for byte"""
    command, cfg = load_snapshot(evaluate_dir / SNAPSHOT_NAME, str(replay_dir))
    _run(command, cfg)
    for original in sorted(evaluate_dir.glob('*.json')):
        if original.read_bytes() != (replay_dir / original.name).read_bytes():
            print(f"  replay differs: {original.name}")
            return False
    return True


def main():
    """Run the planted-concept acceptance pipeline"""
    parser = argparse.ArgumentParser(description='filterlex end-to-end pipeline')
    parser.add_argument('--root', default='runs/full_pipeline', help='Output root')
    parser.add_argument('--seeds', default='0,1,2', help='Comma-separated seeds')
    parser.add_argument('--n-images', type=int, default=2000)
    parser.add_argument('--epochs', type=int, default=5, help='Backbone epochs')
    args = parser.parse_args()

    print(f"Running filterlex pipeline on {datetime.datetime.now().isoformat()}")
    root = Path(args.root)
    seeds = [int(s) for s in args.seeds.split(',')]
    runs = [run_seed(root, seed, args.n_images, args.epochs) for seed in seeds]

    def median(key):
        return statistics.median(r['scores'][key] for r in runs)

    attention, act_mask, image_mask = median('filter_attention'), median('activation_masking'), median('image_masking')
    random_recall = statistics.median(r['random'] for r in runs)
    rates = sorted(runs[0]['discovery'])
    curve = [statistics.median((r['discovery'][rate] or 0.0) for r in runs) for rate in rates]
    drops = sum(1 for a, b in zip(curve, curve[1:]) if b < a)

    checks = {
        'strategy ordering (attention > act-mask >= image-mask)': attention > act_mask >= image_mask,
        'attention recall@5 >= 0.6': attention >= 0.6,
        'a held-out concept appears in some top-5': any(r['novel_found'] for r in runs),
        'novel recall non-decreasing in annotation rate (one step allowed)': drops <= 1,
        'random backbone recall@5 < 0.25 x trained': random_recall < 0.25 * attention,
        'recall@5 <= @10 <= @20 for every filter': all(r['monotone'] for r in runs),
        'replay is byte-identical': check_replay(runs[0]['evaluate_dir'], root / 'replay'),
    }

    print(f"\nrecall@5 attention {attention:.3f}, act-mask {act_mask:.3f}, image-mask {image_mask:.3f}, "
          f"random {random_recall:.3f}")
    print(f"novel recall by rate: {dict(zip(rates, curve))}")
    for name, ok in checks.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
