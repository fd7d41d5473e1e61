"""
Command-line interface for fgreid.

Subcommands: synth-gen, train, extract, eval, attn-export, param-count, ablate.
"""

import sys
import csv
import logging
import argparse
from pathlib import Path

import numpy as np

from .config import PRESETS, load_config
from .evaluation import (
    aggregate_by_identity, evaluate_rankings, extract_embeddings, format_summary,
    load_embeddings, records_to_arrays, save_embeddings, similarity_matrix, top_matches,
    write_report,
)
from .exceptions import ConfigurationError, FGReIDError
from .head import HeadConfig, analytic_param_count, describe_layers, param_count
from .manifest import load_dataset, write_manifest
from .model import embed_frames, init_model
from .overlay import export_attention_overlay
from .rerank import k_reciprocal_rerank
from .synthetic import split_dataset, synth_dataset
from .trainer import TrainConfig, load_checkpoint, train_loop

logger = logging.getLogger(__name__)

# Named ablation rows: head flags and disabled losses.
ABLATIONS = {
    'full': {},
    'wo-channel-weights': {'head.use_channel_weights': False},
    'wo-nonlocal': {'head.use_nonlocal': False},
    'kqv': {'head.distinct_kq': True},
    'only-gfm': {'head.use_fgm': False, 'head.use_nonlocal': False},
    'wo-gfm': {'head.use_gfm': False},
    'wo-fgm': {'head.use_fgm': False},
    'baseline-1r': {'head.shared_backbone': True},
    'wo-ce': {'loss.enable_ce': False},
    'wo-triplet': {'loss.enable_triplet': False},
    'wo-osm': {'loss.enable_osm': False},
    'wo-center': {'loss.enable_center': False},
    'wo-var': {'loss.enable_var': False},
    'wo-sr': {'loss.enable_sr': False},
    'wo-kl': {'loss.enable_kl': False},
}


def print_step(step_num, message):
    """Print step information with formatting."""
    print(f"\n{'='*60}")
    print(f"Step {step_num}: {message}")
    print(f"{'='*60}")


def _int_list(text):
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _overrides(pairs):
    overrides = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split('=', 1)
        overrides[key.strip()] = value
    return overrides


def _load_run_config(args, extra=None):
    overrides = _overrides(getattr(args, 'set', None))
    overrides.update(extra or {})
    return load_config(getattr(args, 'config_path', None), getattr(args, 'preset', None), overrides)


def _checkpoint_config(args):
    """Config saved next to a checkpoint (``<name>.cfg``), else the usual sources."""
    sidecar = Path(args.checkpoint).with_suffix('.cfg')
    if getattr(args, 'config_path', None) is None and sidecar.exists():
        args.config_path = str(sidecar)
    return _load_run_config(args)


def _frame_size(cfg):
    return cfg['backbone.input_height'], cfg['backbone.input_width']


def _check_frame_size(cfg, tracklets):
    """Loaded frames must match backbone.input_height x backbone.input_width."""
    height, width = _frame_size(cfg)
    for tracklet in tracklets:
        if tracklet.frames is not None and tracklet.frames.shape[1:3] != (height, width):
            raise ConfigurationError(
                f"tracklet {tracklet.tracklet_id} has {tracklet.frames.shape[1]}x{tracklet.frames.shape[2]} "
                f"frames but backbone.input_height x backbone.input_width is {height}x{width}")


def _synthetic_splits(cfg):
    synth = cfg.section('synth')
    rng = np.random.default_rng([cfg['train.seed'], 2])
    tracklets = synth_dataset(synth['num_identities'], synth['tracklets_per_id'], synth['frames'],
                              _frame_size(cfg), rng, synth['num_cameras'])
    return split_dataset(tracklets, synth['held_out'])


# ==================== Commands ====================

def cmd_synth_gen(args):
    cfg = _load_run_config(args)
    print_step(1, "Generating synthetic tracklets")
    train, query, gallery = _synthetic_splits(cfg)
    out = Path(args.output)
    print_step(2, f"Writing manifests to {out}")
    write_manifest(train + query, out / 'all.jsonl', 'frames.fgrd')
    for name, tracklets in (('train', train), ('query', query), ('gallery', gallery)):
        path = write_manifest(tracklets, out / f'{name}.jsonl', 'frames.fgrd', write_frames=False)
        print(f"{name}: {len(tracklets)} tracklets -> {path}")
    return 0


def _train(cfg, train_tracklets, output_dir):
    identities = {tr.identity_id for tr in train_tracklets}
    num_classes = cfg['head.num_classes'] or len(identities)
    cfg.set('head.num_classes', num_classes)
    config = TrainConfig.from_run_config(cfg, num_classes)
    return train_loop(train_tracklets, config, output_dir=output_dir, run_config=cfg), config


def cmd_train(args):
    cfg = _load_run_config(args, {'train.seed': args.seed, 'train.epochs': args.epochs})
    output = Path(args.output or cfg['run.output_dir'])
    print_step(1, "Loading training data")
    if args.train:
        train = load_dataset(args.train)
        _check_frame_size(cfg, train)
    else:
        train, _, _ = _synthetic_splits(cfg)
        print("no --train manifest given; using the synthetic dataset")
    print(f"{len(train)} tracklets, {len({tr.identity_id for tr in train})} identities")

    print_step(2, f"Training for {cfg['train.epochs']} epochs")
    result, _ = _train(cfg, train, output)
    if result.metrics:
        last = result.metrics[-1]
        print(f"final epoch {last['epoch']}: total loss {last['total']:.6f}")
    print(f"checkpoint: {output / 'model.fgrd'}")
    return 0


def _head_from_checkpoint(args):
    cfg = _checkpoint_config(args)
    params, centers, identities = load_checkpoint(args.checkpoint)
    return cfg, params, HeadConfig.from_run_config(cfg, len(identities) or None)


def cmd_extract(args):
    cfg, params, head = _head_from_checkpoint(args)
    print_step(1, f"Embedding tracklets of {args.manifest}")
    tracklets = load_dataset(args.manifest)
    _check_frame_size(cfg, tracklets)
    records = extract_embeddings(tracklets, params, head, cfg['batch.t'], cfg['eval.max_clips'])
    save_embeddings(records, args.output)
    print(f"{len(records)} embeddings -> {args.output}")
    return 0


def run_evaluation(cfg, query, gallery, rerank=None, ranks=None):
    """
    Score query records against gallery records.

    Returns:
        (RankingResult, scores, report extras, query records, gallery records);
        the records are per-identity aggregates when eval.per_identity is set
    """
    if cfg['eval.per_identity']:
        query, gallery = aggregate_by_identity(query), aggregate_by_identity(gallery)
    q_vec, q_ids, q_cams = records_to_arrays(query)
    g_vec, g_ids, g_cams = records_to_arrays(gallery)
    rerank = cfg['eval.rerank'] if rerank is None else rerank
    extra = {'metric': cfg['eval.metric'], 'rerank': bool(rerank)}
    if rerank:
        metric = 'cosine' if cfg['eval.metric'] == 'dot' else 'euclidean'
        scores = -k_reciprocal_rerank(q_vec, g_vec, cfg['eval.k1'], cfg['eval.k2'],
                                      cfg['eval.lambda'], metric)
        extra.update({'k1': cfg['eval.k1'], 'k2': cfg['eval.k2'], 'lambda': cfg['eval.lambda']})
    else:
        scores = similarity_matrix(q_vec, g_vec, cfg['eval.metric'])
    result = evaluate_rankings(scores, q_ids, g_ids, q_cams, g_cams, ranks or cfg['eval.ranks'])
    return result, scores, extra, query, gallery


def cmd_eval(args):
    cfg = _load_run_config(args, {'eval.metric': args.metric})
    query = load_embeddings(args.query)
    gallery = load_embeddings(args.gallery)
    result, scores, extra, query, gallery = run_evaluation(
        cfg, query, gallery, rerank=args.rerank or None, ranks=args.ranks)
    print(format_summary(result))
    if args.report:
        csv_path, yaml_path = write_report(result, args.report, extra)
        print(f"report: {csv_path}, {yaml_path}")
    if args.show_query is not None:
        if not 0 <= args.show_query < len(query):
            raise ConfigurationError(f"--show-query must index one of the {len(query)} queries")
        print(f"\nquery {query[args.show_query].tracklet_id} "
              f"(identity {query[args.show_query].identity_id})")
        for name, identity, camera, score in top_matches(scores, args.show_query, gallery, args.top):
            print(f"  {score:+.4f}  {name}  identity {identity}  camera {camera}")
    return 0


def cmd_attn_export(args):
    cfg, params, head = _head_from_checkpoint(args)
    if not head.has_fine_branch or not head.use_fgm:
        raise ConfigurationError("this head configuration computes no attention maps")
    tracklets = {tr.tracklet_id: tr for tr in load_dataset(args.manifest)}
    _check_frame_size(cfg, tracklets.values())
    if args.tracklet not in tracklets:
        raise ConfigurationError(f"tracklet {args.tracklet!r} not in {args.manifest}")
    frames = tracklets[args.tracklet].frames[:args.frames]
    bundle = embed_frames(frames[None].astype(np.float32), params, head, mode='infer')
    a_maps = bundle.a_maps.data[0]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for index, (frame, a_map) in enumerate(zip(frames, a_maps)):
        path = export_attention_overlay(frame, a_map, out / f'{args.tracklet}_{index:03d}.ppm')
        print(path)
    return 0


def cmd_param_count(args):
    if args.checkpoint:
        cfg, params, head = _head_from_checkpoint(args)
    else:
        cfg = _load_run_config(args)
        head = HeadConfig.from_run_config(cfg)
        params = init_model(head, np.random.default_rng(0), cfg['backbone.channels'])
    report = param_count(params, head)
    layers = describe_layers(params)
    for name, count in report['components'].items():
        print(f"{name:32s} {count:>12,d}")
    print(f"{'head total':32s} {report['head_total']:>12,d}")
    print(f"{'backbone total':32s} {report['backbone_total']:>12,d}")
    print(f"{'total':32s} {report['total']:>12,d}")
    print(f"layers: {len(layers['projections'])} projections, {len(layers['classifiers'])} classifier, "
          f"{len(layers['batch_norms'])} batch norms")
    if report['branch_sharing_saving']:
        print(f"sharing reduction + batch norm across branches would save "
              f"{report['branch_sharing_saving']:,d}")
    if args.compare_kqv:
        shared = analytic_param_count(head.replace(distinct_kq=False))
        distinct = analytic_param_count(head.replace(distinct_kq=True))
        print(f"shared QK head:   {shared:,d}")
        print(f"distinct KQV head: {distinct:,d}")
        print(f"KQV delta: {distinct - shared:,d} ({100.0 * (distinct - shared) / distinct:.3f}% of the KQV head)")
    return 0


def cmd_ablate(args):
    rows = args.rows.split(',') if args.rows else list(ABLATIONS)
    unknown = [row for row in rows if row not in ABLATIONS]
    if unknown:
        raise ConfigurationError(f"unknown ablation rows: {', '.join(unknown)}")
    base = _load_run_config(args, {'train.epochs': args.epochs})
    lengths = args.t or [base['batch.t']]
    out = Path(args.output)
    table = []
    step = 0
    for row in rows:
        for t in lengths:
            step += 1
            print_step(step, f"{row} (t={t})")
            cfg = base.copy()
            for key, value in ABLATIONS[row].items():
                cfg.set(key, value)
            cfg.set('batch.t', t)
            train, query, gallery = _synthetic_splits(cfg)
            run_dir = out / f'{row}_t{t}'
            result, config = _train(cfg, train, run_dir)
            q = extract_embeddings(query, result.params, config.head, t, cfg['eval.max_clips'])
            g = extract_embeddings(gallery, result.params, config.head, t, cfg['eval.max_clips'])
            ranking, _, extra, _, _ = run_evaluation(cfg, q, g)
            write_report(ranking, run_dir, extra)
            print(format_summary(ranking, title=row))
            table.append({'row': row, 't': t, 'mAP': ranking.mean_ap,
                          **{f'R-{r}': v for r, v in ranking.cmc.items()}})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / 'ablation.csv', 'w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=list(table[0]))
        writer.writeheader()
        writer.writerows(table)
    print(f"\nablation table: {out / 'ablation.csv'}")
    return 0


# ==================== Parser ====================

def build_parser():
    """Build argument parser."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', dest='config_path', help='key=value config file')
    common.add_argument('--preset', choices=sorted(PRESETS), help='named configuration preset')
    common.add_argument('--set', action='append', metavar='KEY=VALUE',
                        help='override one config key (repeatable)')
    common.add_argument('-v', '--verbose', action='count', default=0,
                        help='-v for progress logs, -vv for debug logs')

    parser = argparse.ArgumentParser(
        prog='fgreid',
        description='Fine-grained re-identification head: training, embedding and retrieval evaluation'
    )
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('synth-gen', parents=[common], help='build a synthetic dataset and manifests')
    p.add_argument('--output', required=True, help='dataset directory')
    p.set_defaults(handler=cmd_synth_gen)

    p = sub.add_parser('train', parents=[common], help='train and write a checkpoint')
    p.add_argument('--train', help='training manifest (default: synthetic dataset)')
    p.add_argument('--output', help='run directory (default: run.output_dir)')
    p.add_argument('--seed', type=int, help='override train.seed')
    p.add_argument('--epochs', type=int, help='override train.epochs')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('extract', parents=[common], help='embed the tracklets of a manifest')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--manifest', required=True)
    p.add_argument('--output', required=True, help='embedding archive')
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser('eval', parents=[common], help='rank gallery embeddings for each query')
    p.add_argument('--query', required=True, help='query embedding archive')
    p.add_argument('--gallery', required=True, help='gallery embedding archive')
    p.add_argument('--rerank', action='store_true', help='apply k-reciprocal re-ranking')
    p.add_argument('--ranks', type=_int_list, help='CMC ranks, e.g. 1,5,10,20')
    p.add_argument('--metric', choices=('dot', 'euclidean'))
    p.add_argument('--report', help='directory for cmc.csv and summary.yaml')
    p.add_argument('--show-query', type=int, metavar='N', help='list the best gallery matches of query N')
    p.add_argument('--top', type=int, default=10, help='matches listed by --show-query')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('attn-export', parents=[common], help='write attention overlays of a tracklet')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--manifest', required=True)
    p.add_argument('--tracklet', required=True, help='tracklet id')
    p.add_argument('--frames', type=int, default=4, help='number of leading frames to export')
    p.add_argument('--output', required=True, help='image directory')
    p.set_defaults(handler=cmd_attn_export)

    p = sub.add_parser('param-count', parents=[common], help='parameter accounting')
    p.add_argument('--checkpoint', help='count a checkpoint instead of the configured head')
    p.add_argument('--compare-kqv', action='store_true', help='report the shared-QK saving')
    p.set_defaults(handler=cmd_param_count)

    p = sub.add_parser('ablate', parents=[common], help='train and evaluate named ablation rows')
    p.add_argument('--rows', help=f"comma-separated rows from: {', '.join(ABLATIONS)}")
    p.add_argument('--t', type=_int_list, help='clip lengths to sweep, e.g. 3,4,5')
    p.add_argument('--epochs', type=int, help='override train.epochs')
    p.add_argument('--output', required=True, help='directory for per-row runs and ablation.csv')
    p.set_defaults(handler=cmd_ablate)

    return parser


def main(argv=None):
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    # Configure logging
    log_level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(
        level=log_level,
        format='%(name)s - %(levelname)s - %(message)s'
    )

    try:
        return args.handler(args)
    except FGReIDError as e:
        print(f"error: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\ninterrupted", file=sys.stderr)
        return 130


if __name__ == '__main__':
    sys.exit(main())
