"""
Command-line entry points for the occluded prohibited item detection toolkit

Usage:
    python cli.py generate-data --seed 0 --data-root data/synthetic
    python cli.py train --seed 0 --strategy hard --out runs/hard
    python cli.py evaluate --checkpoint runs/hard/checkpoint.joblib --out runs/hard
"""

import argparse
import os
import statistics
import sys
from dataclasses import replace

from data.opixray_stats import get_expected_distribution
from src.config import STRATEGIES, ConfigError, RunConfig, collect_config_values, write_config
from src.dataset import (DetectionDataset, load_dataset, load_image_tensor, merge_manifests,
                         read_manifest, validate_distribution, write_manifest)
from src.detector import ProhibitedItemDetector, build_detector
from src.doam import DeOcclusionAttention, count_doam_parameters
from src.metrics import (attention_overhead, complexity_report, evaluate, read_detections,
                         write_detections, write_json)
from src.oversampling import OversamplingTrainer, write_epoch_reports
from src.synthetic import generate_synthetic
from src.visualize import export_attention, export_gradcam

SEEDED_COMMANDS = ('generate-data', 'train')

# Variants compared by the benchmark: (use_doam, strategy)
BENCHMARK_VARIANTS = {
    'a': (False, 'none'),
    'b': (True, 'none'),
    'c': (True, 'hard'),
}


def banner(title):
    print("=" * 60)
    print(title)
    print("=" * 60)


def checkpoint_path(config):
    return config.checkpoint or os.path.join(config.out_dir, 'checkpoint.joblib')


def load_split(config, split):
    records, manifest = load_dataset(config.data_root, split)
    class_names = list(manifest.category_counts)
    return records, manifest, class_names


def train_model(config, out_dir, evaluate_each_epoch=None):
    """
    Train a detector on the data root's train split

    Args:
        config (RunConfig): Resolved configuration
        out_dir (str): Where checkpoints and reports go
        evaluate_each_epoch (callable): Scores the detector after every epoch

    Returns:
        tuple: (ProhibitedItemDetector, list[EpochReport], dict of per-epoch mAP)
    """
    records, _, class_names = load_split(config, 'train')
    detector_config = replace(config.detector, num_classes=len(class_names))
    detector = ProhibitedItemDetector(
        model_path=os.path.join(out_dir, 'checkpoint.joblib'),
        config=detector_config,
        class_names=class_names,
        seed=config.seed,
    )
    dataset = DetectionDataset(records, class_names, detector_config.image_size)
    trainer = OversamplingTrainer(detector.model, dataset, config.train, config.seed)
    print(f"✓ {len(records)} training images, {detector.model.num_parameters} parameters, "
          f"strategy '{config.train.strategy}'")

    epoch_map = {}
    best = {'mAP': None}

    def on_epoch_end(report):
        detector.save_model(os.path.join(out_dir, 'checkpoints', f"epoch_{report.epoch + 1:03d}.joblib"))
        if evaluate_each_epoch is not None:
            score = evaluate_each_epoch(detector)
            epoch_map[report.epoch + 1] = score
            print(f"  - epoch {report.epoch + 1} mAP: {score:.4f}")
            if best['mAP'] is None or score > best['mAP']:
                best['mAP'] = score
                detector.save_model(os.path.join(out_dir, 'checkpoint_best.joblib'))

    reports = trainer.fit(on_epoch_end=on_epoch_end)
    detector.save_model()
    write_epoch_reports(os.path.join(out_dir, 'epoch_report.jsonl'), reports)
    return detector, reports, epoch_map


def score_detector(detector, records, class_names, config):
    detections = detector.predict_records(records, config.eval)
    return detections, evaluate(detections, records, class_names, config.eval.group_by, config.eval.iou_thresh)


def cmd_generate_data(config):
    banner("SYNTHETIC DATA GENERATION")
    manifests = generate_synthetic(config.data_root, config.synthetic, config.seed)
    test = manifests['test']
    print(f"✓ Test occlusion levels: {test.level_counts}")
    return manifests


def cmd_train(config):
    banner("TRAINING")
    os.makedirs(config.out_dir, exist_ok=True)
    write_config(os.path.join(config.out_dir, 'config.env'), config)

    evaluate_each_epoch = None
    if config.eval_every_epoch and os.path.isdir(os.path.join(config.data_root, 'test')):
        test_records, _, class_names = load_split(config, 'test')

        def evaluate_each_epoch(detector):
            return score_detector(detector, test_records, class_names, config)[1].mAP

    detector, reports, epoch_map = train_model(config, config.out_dir, evaluate_each_epoch)
    metrics = {
        'strategy': config.train.strategy,
        'epochs': len(reports),
        'mean_loss': [report.mean_loss for report in reports],
        'replay_counts': [report.replay_count for report in reports],
        'optimizer_steps': [report.optimizer_steps for report in reports],
        'num_parameters': detector.model.num_parameters,
    }
    if epoch_map:
        metrics['epoch_map'] = epoch_map
        metrics['best_epoch'] = max(epoch_map, key=lambda epoch: (epoch_map[epoch], -epoch))
    write_json(os.path.join(config.out_dir, 'metrics.json'), metrics)
    print(f"✓ Training complete: {sum(metrics['replay_counts'])} replayed batches")
    return metrics


def cmd_evaluate(config, predictor=None, detections_path=None, split='test'):
    """
    Score a checkpoint, a detections file or a predictor callable on a split

    Args:
        predictor (callable): records -> list[Detection], used instead of a checkpoint
        detections_path (str): Detections JSON-lines file to score
    """
    banner("EVALUATION")
    records, _, class_names = load_split(config, split)
    if detections_path:
        detections = read_detections(detections_path)
    elif predictor is not None:
        detections = list(predictor(records))
    else:
        detector = ProhibitedItemDetector.from_checkpoint(checkpoint_path(config))
        detections = detector.predict_records(records, config.eval)

    report = evaluate(detections, records, class_names, config.eval.group_by, config.eval.iou_thresh)
    os.makedirs(config.out_dir, exist_ok=True)
    write_detections(os.path.join(config.out_dir, 'detections.jsonl'), detections)
    write_json(os.path.join(config.out_dir, 'eval_report.json'), report.to_dict())

    for category, ap in report.ap.items():
        print(f"  {category:12s} AP {ap:.4f}")
    for level, value in report.level_map.items():
        print(f"  {level:12s} mAP {value:.4f}")
    print(f"✓ mAP: {report.mAP:.4f}")
    return report


def _visual_inputs(config, detector, split, limit):
    records, _, _ = load_split(config, split)
    return [(record.image_id, load_image_tensor(record.image_path, detector.config.image_size))
            for record in records[:limit]]


def cmd_viz_attention(config, split='test', limit=4):
    banner("ATTENTION MAPS")
    detector = ProhibitedItemDetector.from_checkpoint(checkpoint_path(config))
    images = _visual_inputs(config, detector, split, limit)
    written = export_attention(detector.model, images, os.path.join(config.out_dir, 'attention'))
    print(f"✓ Wrote {len(written)} images")
    return written


def cmd_viz_gradcam(config, split='test', limit=4):
    banner("GRAD-CAM")
    detector = ProhibitedItemDetector.from_checkpoint(checkpoint_path(config))
    images = _visual_inputs(config, detector, split, limit)
    written = export_gradcam(detector.model, images, os.path.join(config.out_dir, 'gradcam'))
    print(f"✓ Wrote {len(written)} images")
    return written


def cmd_validate_dataset(config, split='test', preset=None, manifest_path=None):
    """Compare a split (or a manifest file) against a published distribution"""
    banner("DATASET VALIDATION")
    if manifest_path:
        manifest = read_manifest(manifest_path)
    elif split == 'total':
        manifest = merge_manifests([load_dataset(config.data_root, name)[1] for name in ('train', 'test')])
    else:
        manifest = load_dataset(config.data_root, split)[1]

    report = validate_distribution(manifest, get_expected_distribution(preset or manifest.split))
    os.makedirs(config.out_dir, exist_ok=True)
    write_manifest(os.path.join(config.out_dir, f"manifest_{manifest.split}.json"), manifest)
    write_json(os.path.join(config.out_dir, 'validation.json'), report.to_dict())
    if report.ok:
        print(f"✓ {manifest.split}: {manifest.num_images} images match the expected distribution")
    else:
        for mismatch in report.mismatches:
            print(f"⚠ {mismatch.field}: expected {mismatch.expected}, found {mismatch.actual}")
    return report


def cmd_complexity(config):
    """Detector, attention module and their ratio at the configured input size"""
    banner("MODEL COMPLEXITY")
    host_config = replace(config.detector, use_doam=False)
    full_config = replace(config.detector, use_doam=True)
    shape = (host_config.image_channels, host_config.image_size, host_config.image_size)

    host_report = complexity_report(build_detector(host_config, config.seed), shape)
    full_report = complexity_report(build_detector(full_config, config.seed), shape)
    attention_report = complexity_report(DeOcclusionAttention(host_config.image_channels, host_config.doam), shape)
    attention_report.ratios = attention_overhead(host_report, attention_report)

    payload = {
        'detector': host_report.to_dict(),
        'detector_with_doam': full_report.to_dict(),
        'doam': attention_report.to_dict(),
        'doam_closed_form_parameters': count_doam_parameters(host_config.image_channels, host_config.doam),
    }
    os.makedirs(config.out_dir, exist_ok=True)
    write_json(os.path.join(config.out_dir, 'complexity.json'), payload)
    for name in ('detector', 'detector_with_doam', 'doam'):
        entry = payload[name]
        print(f"  {name:20s} {entry['parameters']:>10d} params {entry['size_mb']:8.3f} MB "
              f"{entry['gflops']:.4f} GFLOPs")
    ratios = attention_report.ratios
    print(f"✓ Attention overhead: {ratios['parameters']:.2%} parameters, {ratios['size']:.2%} size "
          f"(reference {ratios['reference_parameters']:.2%} / {ratios['reference_size']:.2%})")
    return payload


def cmd_benchmark(config, seeds=None):
    """
    Train and score variants (a) detector, (b) detector + attention,
    (c) detector + attention + hard pool for every seed
    """
    banner("BENCHMARK")
    seeds = tuple(seeds or config.benchmark_seeds)
    if not os.path.isdir(os.path.join(config.data_root, 'train')):
        generate_synthetic(config.data_root, config.synthetic, config.seed)
    test_records, _, class_names = load_split(config, 'test')

    runs = []
    for seed in seeds:
        for variant, (use_doam, strategy) in BENCHMARK_VARIANTS.items():
            print(f"\n[{variant}] seed {seed}: use_doam={use_doam}, strategy={strategy}")
            run_config = replace(config, seed=seed,
                                 detector=replace(config.detector, use_doam=use_doam),
                                 train=replace(config.train, strategy=strategy),
                                 eval=replace(config.eval, group_by='occlusion_level'))
            out_dir = os.path.join(config.out_dir, f"{variant}_seed{seed}")
            detector, reports, _ = train_model(run_config, out_dir)
            _, report = score_detector(detector, test_records, class_names, run_config)
            runs.append({
                'variant': variant,
                'seed': seed,
                'mAP': report.mAP,
                'level_map': report.level_map,
                'replay_count': sum(r.replay_count for r in reports),
            })

    medians = {}
    for variant in BENCHMARK_VARIANTS:
        scores = [run['level_map'].get('OL3') for run in runs if run['variant'] == variant]
        scores = [s for s in scores if s is not None]
        medians[variant] = statistics.median(scores) if scores else None

    ordering = {
        'b_ge_a': None if None in (medians['a'], medians['b']) else medians['b'] >= medians['a'],
        'c_ge_b': None if None in (medians['b'], medians['c']) else medians['c'] >= medians['b'],
    }
    ordering['holds'] = bool(ordering['b_ge_a'] and ordering['c_ge_b'])
    payload = {'seeds': list(seeds), 'runs': runs, 'ol3_median_map': medians, 'ordering': ordering}
    write_json(os.path.join(config.out_dir, 'benchmark.json'), payload)

    print("\n" + "=" * 60)
    for variant, median in medians.items():
        print(f"  ({variant}) OL3 median mAP: {median}")
    if ordering['holds']:
        print("✓ Ordering (b) >= (a) and (c) >= (b) holds on OL3")
    else:
        print("⚠ Ordering (b) >= (a), (c) >= (b) did not hold on OL3; see benchmark.json")
    return payload


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Flat key=value config file')
    common.add_argument('--seed', type=int, help='Global random seed')
    common.add_argument('--data-root', help='Dataset root holding train/ and test/')
    common.add_argument('--checkpoint', help='Model checkpoint (.joblib)')
    common.add_argument('--strategy', choices=STRATEGIES, help='Sample-pool strategy')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override any config key (repeatable)')

    parser = argparse.ArgumentParser(description='Occluded prohibited item detection in X-ray images')
    commands = parser.add_subparsers(dest='command', required=True)

    commands.add_parser('generate-data', parents=[common], help='Write the synthetic dataset')
    train = commands.add_parser('train', parents=[common], help='Train a detector')
    train.add_argument('--epochs', type=int)

    evaluate_parser = commands.add_parser('evaluate', parents=[common], help='Score detections')
    evaluate_parser.add_argument('--detections', help='Score this JSON-lines file instead of a model')
    evaluate_parser.add_argument('--split', default='test')
    evaluate_parser.add_argument('--group-by', choices=('category', 'occlusion_level'))

    for name, text in (('viz-attention', 'Export attention overlays'), ('viz-gradcam', 'Export Grad-CAM maps')):
        viz = commands.add_parser(name, parents=[common], help=text)
        viz.add_argument('--split', default='test')
        viz.add_argument('--limit', type=int, default=4)

    validate = commands.add_parser('validate-dataset', parents=[common], help='Check split counts')
    validate.add_argument('--split', default='test', choices=('train', 'test', 'total'))
    validate.add_argument('--preset', choices=('train', 'test', 'total'))
    validate.add_argument('--manifest', help='Validate a manifest JSON file instead of a data root')

    commands.add_parser('complexity', parents=[common], help='Parameter, size and FLOP accounting')
    benchmark = commands.add_parser('benchmark', parents=[common], help='Compare variants across seeds')
    benchmark.add_argument('--epochs', type=int)
    benchmark.add_argument('--seeds', help='Comma-separated seeds')
    return parser


def config_from_args(args):
    """Resolve RunConfig from defaults, --config, DOAM_* and flags"""
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition('=')
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        overrides[key.strip().lower()] = value
    overrides.update({
        'seed': args.seed,
        'data_root': args.data_root,
        'checkpoint': args.checkpoint,
        'strategy': args.strategy,
        'out_dir': args.out,
        'epochs': getattr(args, 'epochs', None),
        'group_by': getattr(args, 'group_by', None),
    })
    values = collect_config_values(args.config, overrides)
    if args.command in SEEDED_COMMANDS and 'seed' not in values:
        raise ConfigError(f"{args.command} needs a seed (--seed or seed= in the config)")
    return RunConfig.from_mapping(values)


def run(args):
    config = config_from_args(args)
    if args.command == 'generate-data':
        cmd_generate_data(config)
    elif args.command == 'train':
        cmd_train(config)
    elif args.command == 'evaluate':
        cmd_evaluate(config, detections_path=args.detections, split=args.split)
    elif args.command == 'viz-attention':
        cmd_viz_attention(config, args.split, args.limit)
    elif args.command == 'viz-gradcam':
        cmd_viz_gradcam(config, args.split, args.limit)
    elif args.command == 'validate-dataset':
        cmd_validate_dataset(config, args.split, args.preset, args.manifest)
    elif args.command == 'complexity':
        cmd_complexity(config)
    elif args.command == 'benchmark':
        seeds = [int(s) for s in args.seeds.split(',')] if args.seeds else None
        cmd_benchmark(config, seeds)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except Exception as e:
        message = ' '.join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
