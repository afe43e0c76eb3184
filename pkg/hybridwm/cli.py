"""Command line entry point: corpus synthesis, training, evaluation, complexity
benchmark, ablations and gate visualization.

Every command resolves one RunConfig (YAML file, then --set overrides, then
dedicated flags), validates all of it at once and writes it to
runs/<name>/config.yaml before doing any work.
"""
import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
import torch

from hybridwm.assets import load_assets, render_builtin_assets, write_assets
from hybridwm.config import RunConfig, VARIANTS, PAIRING_MODES
from hybridwm.exceptions import HybridWMException, ConfigValidationException
from hybridwm.imgcore import Image, load_image, image_to_tensor, tensor_to_image
from hybridwm.losses import FeatureExtractor
from hybridwm.network import (build_model, count_params, count_flops, describe, gate_weights,
                              gate_heat_map, pad_to_multiple, zero_gate_head, HybridNet)
from hybridwm.plots import ablation_bars, gate_montage, loss_curve, save_figure, save_heat_map
from hybridwm.synth import CLEAN_READS, Manifest, build_corpus, list_images
from hybridwm.trainer import (Trainer, evaluate, degradation_baseline, load_checkpoint,
                              select_device)
from hybridwm.weights import fetch_extractor_weights

logger = logging.getLogger(__name__)

PUBLISHED_PARAMS = 5.89e6
PUBLISHED_MACS = 18.21e9
PARAMS_TOLERANCE = 0.20
MACS_TOLERANCE = 0.25
ABLATION_VARIANTS = ('se_nrd_only', 'se_wnrd_only', 'dual_no_ffu', 'full', 'dense_mdta', 'dual_encoders')


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(',') if v.strip()]


def _pair(text: str) -> List[float]:
    values = _floats(text)
    if len(values) == 1:
        values = values * 2
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"Expected 'lo,hi', got '{text}'")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='hybridwm', description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML run config')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='override a config key, like model.base_width=32. Repeatable')
    common.add_argument('--name', help='run name, outputs go to <runs_dir>/<name>')
    common.add_argument('--runs-dir')
    common.add_argument('--seed', type=int, help='global seed for synthesis and training')
    common.add_argument('--device', help="'auto', 'cpu' or 'cuda'")
    common.add_argument('-v', '--verbose', action='store_true')
    commands = parser.add_subparsers(dest='command', required=True)

    cmd = commands.add_parser('assets', parents=[common], help='write the built-in watermark templates')
    cmd.add_argument('--out', required=True)
    cmd.set_defaults(func=cmd_assets)

    cmd = commands.add_parser('synth', parents=[common], help='synthesize a corpus split')
    cmd.add_argument('--images', help='directory of clean images')
    cmd.add_argument('--assets', help='directory of watermark PNGs. Defaults to the built-in set')
    cmd.add_argument('--out', help='corpus directory')
    cmd.add_argument('--split', choices=('train', 'test'))
    cmd.add_argument('--sigmas', type=_floats, help='noise levels on the 0-255 scale, like 0,15,25,50')
    cmd.add_argument('--alphas', type=_floats, help='transparencies, like 0.3,0.5,0.7,1.0')
    cmd.add_argument('--blind-sigma', type=_pair, help="draw sigma uniformly from 'lo,hi'")
    cmd.add_argument('--blind-alpha', type=_pair, help="draw transparency uniformly from 'lo,hi'")
    cmd.add_argument('--coverage-max', type=float)
    cmd.add_argument('--scales', type=_pair, help="'lo,hi' of the watermark scale")
    cmd.add_argument('--variants', type=int, help='samples per image for the train split')
    cmd.add_argument('--workers', type=int)
    cmd.add_argument('--pairing-mode', choices=PAIRING_MODES)
    cmd.set_defaults(func=cmd_synth)

    cmd = commands.add_parser('train', parents=[common], help='train a model')
    _add_training_flags(cmd)
    cmd.add_argument('--resume', help='checkpoint to continue from')
    cmd.set_defaults(func=cmd_train)

    cmd = commands.add_parser('eval', parents=[common], help='evaluate a checkpoint on a test split')
    cmd.add_argument('--checkpoint', required=True)
    cmd.add_argument('--manifest', help='test corpus directory or manifest file')
    cmd.add_argument('--dump-images', action='store_true', help='write y_hat, y_n and y_wn PNGs')
    cmd.add_argument('--no-lpips', action='store_true')
    cmd.add_argument('--psnr-on', choices=('rgb', 'luma'))
    cmd.set_defaults(func=cmd_eval)

    cmd = commands.add_parser('bench', parents=[common], help='parameters, FLOPs and latency')
    cmd.add_argument('--variant', choices=VARIANTS)
    cmd.add_argument('--size', type=int, default=256)
    cmd.add_argument('--runs', type=int, default=50)
    cmd.add_argument('--warmup', type=int, default=10)
    cmd.add_argument('--no-latency', action='store_true')
    cmd.set_defaults(func=cmd_bench)

    cmd = commands.add_parser('ablate', parents=[common], help='train and evaluate every variant')
    _add_training_flags(cmd, variant=False)
    cmd.add_argument('--variants', dest='ablate_variants', nargs='+', choices=VARIANTS,
                     default=list(ABLATION_VARIANTS))
    cmd.set_defaults(func=cmd_ablate)

    cmd = commands.add_parser('gates', parents=[common], help='visualize the fusion gate')
    cmd.add_argument('--checkpoint', help='trained checkpoint. Without one a fresh model is used')
    cmd.add_argument('--images', help='directory of input images')
    cmd.add_argument('--manifest', help='corpus whose x_wn images are used instead')
    cmd.add_argument('--limit', type=int, default=8)
    cmd.add_argument('--zero-gate-head', action='store_true')
    cmd.set_defaults(func=cmd_gates)

    cmd = commands.add_parser('fetch-weights', parents=[common], help='download perceptual weights')
    cmd.add_argument('--dest', default=str(Path.home() / '.cache' / 'hybridwm'))
    cmd.set_defaults(func=cmd_fetch_weights)

    cmd = commands.add_parser('describe', parents=[common], help='stage shapes and complexity as JSON')
    cmd.add_argument('--variant', choices=VARIANTS)
    cmd.add_argument('--size', type=int, default=256)
    cmd.set_defaults(func=cmd_describe)
    return parser


def _add_training_flags(cmd, variant=True):
    cmd.add_argument('--manifest', help='train corpus directory or manifest file')
    cmd.add_argument('--eval-manifest', help='test corpus evaluated during and after training')
    if variant:
        cmd.add_argument('--variant', choices=VARIANTS)
    cmd.add_argument('--alpha', type=float, help='texture loss weight')
    cmd.add_argument('--no-texture-loss', action='store_true', help='same as --alpha 0')
    cmd.add_argument('--epochs', type=int)
    cmd.add_argument('--batch', type=int)
    cmd.add_argument('--crop', type=int)
    cmd.add_argument('--lr', type=float)
    cmd.add_argument('--max-steps', type=int, help='stop after this many steps')
    cmd.add_argument('--extractor-weights', help='VGG16 weight file from fetch-weights')
    cmd.add_argument('--hflip', action='store_true', default=None)
    cmd.add_argument('--resample', action='store_true', default=None,
                     help='redraw noise and the extra watermark every epoch')


def flag_values(args) -> dict:
    """Dotted config keys for every dedicated flag that was given"""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    values = {
        'name': get('name'), 'runs_dir': get('runs_dir'),
        'train.seed': get('seed'), 'corpus.seed': get('seed'), 'train.device': get('device'),
        'corpus.images': get('images'), 'corpus.out': get('out') if args.command == 'synth' else None,
        'corpus.split': get('split'), 'corpus.variants': get('variants'),
        'corpus.workers': get('workers'),
        'corpus.ranges.sigmas': get('sigmas'), 'corpus.ranges.transparencies': get('alphas'),
        'corpus.ranges.sigma_interval': get('blind_sigma'),
        'corpus.ranges.transparency_interval': get('blind_alpha'),
        'corpus.ranges.coverage_max': get('coverage_max'),
        'corpus.ranges.scale_interval': get('scales'),
        'corpus.ranges.pairing_mode': get('pairing_mode'),
        'manifest': get('manifest') if args.command in ('train', 'ablate') else None,
        'eval_manifest': get('eval_manifest'),
        'model.variant': get('variant'),
        'train.alpha': 0.0 if get('no_texture_loss') else get('alpha'),
        'train.epochs': get('epochs'), 'train.batch': get('batch'), 'train.crop': get('crop'),
        'train.lr0': get('lr'), 'train.hflip': get('hflip'),
        'train.resample_per_epoch': get('resample'),
        'extractor.weights': get('extractor_weights'),
        'metrics.psnr_on': get('psnr_on'),
        'metrics.lpips': False if get('no_lpips') else None,
    }
    if args.command == 'synth' and get('assets'):
        values['corpus.assets'] = get('assets')
    return values


def resolve_config(args) -> RunConfig:
    """YAML file, then --set, then dedicated flags. Validated all at once

    Raises
    ------
    ConfigValidationException
        listing every problem found
    """
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(args.set).with_values(flag_values(args))
    cfg.validate_all()
    return cfg


def prepare_run_dir(cfg: RunConfig) -> Path:
    run_dir = cfg.run_dir
    for sub in ('checkpoints', 'logs', 'eval', 'plots'):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / 'config.yaml')
    return run_dir


def _assets(cfg: RunConfig):
    return load_assets(cfg.corpus.assets) if cfg.corpus.assets else render_builtin_assets()


def _extractor(cfg: RunConfig) -> Optional[FeatureExtractor]:
    if cfg.train.alpha == 0:
        return None
    if cfg.extractor.weights:
        return FeatureExtractor.from_weights(cfg.extractor.weights, cfg.extractor.taps)
    return FeatureExtractor.from_torchvision(cfg.extractor.taps)


def _manifest(path, what='manifest') -> Manifest:
    if not path:
        raise HybridWMException(f"No {what} given. Use --manifest or set it in the config")
    return Manifest.read(path)


def _fresh_model(cfg: RunConfig, variant: str = None) -> HybridNet:
    model_cfg = cfg.model if variant is None else cfg.with_values({'model.variant': variant}).model
    torch.manual_seed(cfg.train.seed)
    return build_model(model_cfg)


def _model_from_checkpoint(path) -> HybridNet:
    state = load_checkpoint(path)
    model = build_model(state.model_config)
    load_checkpoint(path, model)
    return model


def _write_json(data, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(data, f, indent=2)
    return path


def cmd_assets(args, cfg: RunConfig, run_dir: Path) -> int:
    write_assets(render_builtin_assets(), args.out)
    return 0


def cmd_synth(args, cfg: RunConfig, run_dir: Path) -> int:
    corpus = cfg.corpus
    if not corpus.images:
        raise ConfigValidationException(["corpus.images is required for synth (--images)"])
    out = corpus.out or str(run_dir / f"corpus_{corpus.split}")
    manifest = build_corpus(corpus.images, _assets(cfg), corpus.ranges, out, corpus.seed,
                            split=corpus.split, variants=corpus.variants, workers=corpus.workers)
    digest = manifest.digest()
    logger.info(f"Wrote {len(manifest)} samples to {out}, corpus digest {digest[:16]}")
    print(json.dumps({'manifest': str(Path(out) / 'manifest.jsonl'), 'samples': len(manifest),
                      'digest': digest}))
    return 0


def _train_variant(cfg: RunConfig, run_dir: Path, manifest: Manifest, eval_manifest, fx,
                   max_steps, variant: str = None, resume: str = None) -> Trainer:
    model = _fresh_model(cfg, variant)
    assets = _assets(cfg) if cfg.train.resample_per_epoch else None
    trainer = Trainer(model, manifest, cfg.train, fx=fx, run_dir=run_dir, assets=assets,
                      ranges=cfg.corpus.ranges, eval_manifest=eval_manifest,
                      metrics_cfg=cfg.metrics, device=select_device(cfg.train.device))
    if resume:
        trainer.restore(load_checkpoint(resume))
    entries = trainer.run(max_steps)
    trainer.save()
    if entries:
        save_figure(loss_curve(trainer.history), run_dir / 'plots' / 'loss.png')
    return trainer


def cmd_train(args, cfg: RunConfig, run_dir: Path) -> int:
    manifest = _manifest(cfg.manifest)
    eval_manifest = Manifest.read(cfg.eval_manifest) if cfg.eval_manifest else None
    fx = _extractor(cfg)
    trainer = _train_variant(cfg, run_dir, manifest, eval_manifest, fx, args.max_steps,
                             resume=args.resume)
    report = {'checkpoint': str(run_dir / 'checkpoints' / 'last.pt'), 'step': trainer.step,
              'clean_reads': trainer.clean_reads}
    if eval_manifest is not None:
        with CLEAN_READS.suspended():
            result = evaluate(trainer.model, eval_manifest, cfg.metrics, out_dir=run_dir / 'eval',
                              device=trainer.device)
        logger.info(f"Final eval PSNR {result.mean('psnr'):.2f} dB, SSIM {result.mean('ssim'):.4f}")
        report['psnr'] = result.mean('psnr')
    _write_json(report, run_dir / 'train.json')
    print(json.dumps(report))
    return 0


def cmd_eval(args, cfg: RunConfig, run_dir: Path) -> int:
    manifest = _manifest(args.manifest or cfg.eval_manifest or cfg.manifest)
    test = Manifest([r for r in manifest if r.has_clean], manifest.root)
    if not len(test):
        raise HybridWMException(f"{manifest} has no samples with clean images to evaluate against")
    model = _model_from_checkpoint(args.checkpoint).to(select_device(cfg.train.device))
    out_dir = run_dir / 'eval'
    result = evaluate(model, test, cfg.metrics, out_dir=out_dir, dump_images=args.dump_images)
    baseline = degradation_baseline(test)
    _write_json(baseline.to_dict(), out_dir / 'baseline.json')
    logger.info(f"PSNR {result.mean('psnr'):.2f} dB (input {baseline.mean('psnr'):.2f} dB), "
                f"SSIM {result.mean('ssim'):.4f} (input {baseline.mean('ssim'):.4f})")
    print(result.aggregate().to_string(index=False))
    return 0 if not result.errors else 1


def _latency(model: HybridNet, size: int, runs: int, warmup: int, device) -> dict:
    x = torch.rand(1, 3, size, size, device=device)
    model.eval()
    if device.type == 'cuda':
        torch.cuda.reset_peak_memory_stats(device)
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        if device.type == 'cuda':
            torch.cuda.synchronize(device)
        times = []
        for _ in range(runs):
            start = time.perf_counter()
            model(x)
            if device.type == 'cuda':
                torch.cuda.synchronize(device)
            times.append(time.perf_counter() - start)
    peak = torch.cuda.max_memory_allocated(device) if device.type == 'cuda' else None
    return {'latency_ms_mean': 1000 * float(np.mean(times)), 'latency_ms_std': 1000 * float(np.std(times)),
            'runs': runs, 'warmup': warmup, 'peak_memory_bytes': peak, 'device': str(device)}


def within(value: float, reference: float, tolerance: float) -> bool:
    return abs(value - reference) <= tolerance * reference


def bench_report(model: HybridNet, size: int = 256) -> dict:
    """Parameter and MAC counts, the 2x-size scaling ratio and published-figure checks"""
    params = count_params(model)
    flops = count_flops(model, size, size)
    flops_2x = count_flops(model, 2 * size, 2 * size)
    report = {'variant': model.variant, 'params': params, 'size': size,
              'macs': flops.macs, 'flops': flops.flops,
              'macs_2x_size': flops_2x.macs, 'scaling_ratio': flops_2x.macs / flops.macs}
    if model.variant == 'full' and size == 256:
        report['published'] = {
            'params': PUBLISHED_PARAMS, 'macs': PUBLISHED_MACS,
            'params_within_tolerance': within(params, PUBLISHED_PARAMS, PARAMS_TOLERANCE),
            'macs_within_tolerance': within(flops.macs, PUBLISHED_MACS, MACS_TOLERANCE)}
    return report


def cmd_bench(args, cfg: RunConfig, run_dir: Path) -> int:
    model = _fresh_model(cfg)
    report = bench_report(model, args.size)
    if model.variant != 'full':
        full = _fresh_model(cfg, 'full')
        full_macs = count_flops(full, args.size, args.size).macs
        report['full'] = {'params': count_params(full), 'macs': full_macs}
    if not args.no_latency:
        device = select_device(cfg.train.device)
        report.update(_latency(model.to(device), args.size, args.runs, args.warmup, device))
    _write_json(report, run_dir / 'bench.json')
    print(json.dumps(report, indent=2))
    return 0


def ablation_markdown(table: pd.DataFrame) -> str:
    columns = ['variant', 'params', 'psnr', 'ssim', 'corpus_digest', 'error']
    lines = ['| ' + ' | '.join(columns) + ' |', '|' + '---|' * len(columns)]
    for _, row in table.iterrows():
        cells = []
        for column in columns:
            value = row.get(column)
            if value is None or (isinstance(value, float) and math.isnan(value)):
                cells.append('')
            elif column == 'params':
                cells.append(str(int(value)))
            elif isinstance(value, float):
                cells.append(f"{value:.4f}")
            elif column == 'corpus_digest':
                cells.append(str(value)[:12])
            else:
                cells.append(str(value))
        lines.append('| ' + ' | '.join(cells) + ' |')
    return '\n'.join(lines) + '\n'


def cmd_ablate(args, cfg: RunConfig, run_dir: Path) -> int:
    manifest = _manifest(cfg.manifest)
    eval_manifest = _manifest(cfg.eval_manifest, 'evaluation manifest (--eval-manifest)')
    fx = _extractor(cfg)
    baseline = degradation_baseline(eval_manifest)
    rows = []
    for variant in args.ablate_variants:
        row = {'variant': variant, 'corpus_digest': manifest.digest(), 'error': None,
               'params': None, 'psnr': float('nan'), 'ssim': float('nan')}
        variant_dir = run_dir / 'ablate' / variant
        try:
            trainer = _train_variant(cfg, variant_dir, manifest, None, fx, args.max_steps, variant)
            result = evaluate(trainer.model, eval_manifest, cfg.metrics, out_dir=variant_dir / 'eval',
                              device=trainer.device)
            row.update(params=count_params(trainer.model), psnr=result.mean('psnr'),
                       ssim=result.mean('ssim'))
        except (HybridWMException, RuntimeError) as e:
            logger.error(f"Variant '{variant}' failed: {e}")
            row['error'] = str(e)
        rows.append(row)

    table = pd.DataFrame(rows)
    table['baseline_psnr'] = baseline.mean('psnr')
    table['baseline_ssim'] = baseline.mean('ssim')
    table['same_corpus'] = table['corpus_digest'].nunique() == 1
    table.to_csv(run_dir / 'ablation.csv', index=False)
    (run_dir / 'ablation.md').write_text(ablation_markdown(table))
    save_figure(ablation_bars(table, 'psnr'), run_dir / 'plots' / 'ablation_psnr.png')
    print(ablation_markdown(table))
    return 0 if table['error'].isna().all() else 1


def _gate_inputs(args, cfg: RunConfig) -> List[Image]:
    if args.images:
        paths = list_images(args.images)[:args.limit]
        return [load_image(p) for p in paths]
    manifest = _manifest(args.manifest or cfg.eval_manifest or cfg.manifest)
    return [record.load(manifest.root, 'x_wn') for record in list(manifest)[:args.limit]]


def cmd_gates(args, cfg: RunConfig, run_dir: Path) -> int:
    model = _model_from_checkpoint(args.checkpoint) if args.checkpoint else _fresh_model(cfg)
    if args.zero_gate_head:
        zero_gate_head(model)
    model.eval()
    images = _gate_inputs(args, cfg)
    if not images:
        raise HybridWMException("No images to visualize")
    out_dir = run_dir / 'plots' / 'gates'
    out_dir.mkdir(parents=True, exist_ok=True)

    inputs, outputs, heat_maps, stats = [], [], [], []
    below, total = 0, 0
    with torch.no_grad():
        for img in images:
            x = image_to_tensor(img)
            h, w = x.shape[-2:]
            padded = pad_to_multiple(x)
            gates = gate_weights(model, padded)[..., :h, :w]
            heat = gate_heat_map(gates, (h, w))[0]
            restored = tensor_to_image(model(padded).y_hat[..., :h, :w].clamp(0, 1))
            save_heat_map(heat, out_dir / f"{img.id}.png")
            below += int((gates < 0.5).sum())
            total += gates.numel()
            stats.append({'id': img.id, 'mean': float(heat.mean()), 'std': float(heat.std()),
                          'fraction_below_half': float((gates < 0.5).float().mean())})
            inputs.append(img.clamped().pixels)
            outputs.append(restored.pixels)
            heat_maps.append(heat)

    save_figure(gate_montage(inputs, outputs, heat_maps, [s['id'] for s in stats]),
                run_dir / 'plots' / 'gates_montage.png')
    summary = {'images': stats, 'fraction_below_half': below / total}
    _write_json(summary, run_dir / 'plots' / 'gates.json')
    logger.info(f"Fraction of gate weights below 0.5: {summary['fraction_below_half']:.4f}")
    return 0


def cmd_fetch_weights(args, cfg: RunConfig, run_dir: Path) -> int:
    path = fetch_extractor_weights(args.dest)
    logger.info(f"Weights at {path}. Use --extractor-weights {path} or set extractor.weights")
    print(path)
    return 0


def cmd_describe(args, cfg: RunConfig, run_dir: Path) -> int:
    report = describe(_fresh_model(cfg), args.size, args.size)
    _write_json(report, run_dir / 'describe.json')
    print(json.dumps(report, indent=2))
    return 0


def main(argv=None) -> int:
    """Run one command. Returns the process exit code: 0 only if all work succeeded"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        cfg = resolve_config(args)
        run_dir = prepare_run_dir(cfg)
        return args.func(args, cfg, run_dir)
    except ConfigValidationException as e:
        logger.error(str(e))
        return 2
    except HybridWMException as e:
        logger.error(str(e))
        return 1


if __name__ == '__main__':
    sys.exit(main())
