"""Command-line interface

    confmaplib compute   --in img.pgm --out cm.cmg [--export-pgm cm.pgm] [--spacing SX SY]
    confmaplib sweep     --in img.pgm --out dir --alpha-list 0.5 2 --beta-list 100 90
    confmaplib mask      --labels y.cmg --cm cm.cmg --out masked.cmg
    confmaplib loss      --kind ce_conf --labels y.cmg --pred p.cmg --cm cm.cmg
    confmaplib metrics   --pred a.cmg --gt a_gt.cmg [--pred ...] --out m.csv
    confmaplib oracle    {mc,dense} --in img.pgm --out est.cmg
    confmaplib train-toy --out study.json [--configs all] [--seeds 20]
    confmaplib entropy   --in p0.cmg p1.cmg ... --out h.cmg

Exit codes: 0 success, 2 input or format error, 3 solver did not converge.
alpha is the attenuation coefficient per unit normalized depth, beta the
penalty on intensity differences between neighbours.
"""

import argparse
import sys
from typing import List, Optional, Sequence

from . import pipelines
from .config import Settings
from .confidence import RwParams
from .exceptions import ConfmapError, SolverError
from .logs import configure_logging
from .losses import LossKind
from .montecarlo import McConfig
from .segmenter import CONFIGURATIONS, HEADLINE_CONFIGURATIONS, TrainConfig
from .sparse import PRECONDITIONERS

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3


def _add_rw_flags(parser: argparse.ArgumentParser, settings: Settings) -> None:
    group = parser.add_argument_group('random walk')
    group.add_argument('--alpha', type=float, default=settings.alpha,
                       help='attenuation coefficient per unit depth (default: %(default)s)')
    group.add_argument('--beta', type=float, default=settings.beta,
                       help='intensity-difference penalty (default: %(default)s)')
    group.add_argument('--gamma', type=float, default=settings.gamma,
                       help='horizontal beam-shape penalty (default: %(default)s)')
    group.add_argument('--epsilon', type=float, default=settings.epsilon,
                       help='edge weight floor (default: %(default)s)')
    group.add_argument('--tol', type=float, default=settings.tol,
                       help='CG relative residual (default: %(default)s)')
    group.add_argument('--max-iter', type=int, default=None,
                       help=f'CG iteration cap (default: {settings.max_iter_factor} x unknowns)')
    group.add_argument('--preconditioner', choices=list(PRECONDITIONERS),
                       default=settings.preconditioner,
                       help='CG preconditioner (default: %(default)s)')


def _add_spacing(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--spacing', type=float, nargs='+', default=None,
                        metavar='MM',
                        help='pixel spacing sx sy [sz] in mm (default: from the input)')


def _add_common(parser: argparse.ArgumentParser, settings: Settings) -> None:
    parser.add_argument('--workers', type=int, default=settings.workers,
                        help='worker threads; never changes outputs (default: %(default)s)')
    parser.add_argument('--log-level', default=settings.log_level,
                        help='DEBUG, INFO, WARNING or ERROR (default: %(default)s)')


def build_parser(settings: Optional[Settings] = None) -> argparse.ArgumentParser:
    settings = settings or Settings()
    parser = argparse.ArgumentParser(
        prog='confmaplib',
        description='Ultrasound confidence maps, confidence-weighted losses and metrics',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('compute', help='confidence map of an image or volume')
    p.add_argument('--in', dest='in_path', required=True, help='PGM image or CMG1 grid')
    p.add_argument('--out', required=True, help='output CMG1 grid')
    p.add_argument('--export-pgm', default=None, help='also write an 8-bit PGM preview')
    _add_spacing(p)
    _add_rw_flags(p, settings)
    _add_common(p, settings)

    p = sub.add_parser('sweep', help='confidence maps over (alpha, beta) pairs')
    p.add_argument('--in', dest='in_path', required=True)
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--alpha-list', type=float, nargs='+', required=True)
    p.add_argument('--beta-list', type=float, nargs='+', required=True)
    _add_spacing(p)
    _add_rw_flags(p, settings)
    _add_common(p, settings)

    p = sub.add_parser('mask', help='confidence-weighted one-hot target')
    p.add_argument('--labels', required=True, help='label CMG1 grid')
    p.add_argument('--cm', required=True, help='confidence map CMG1 grid')
    p.add_argument('--out', required=True)
    _add_common(p, settings)

    p = sub.add_parser('loss', help='evaluate a loss as JSON')
    p.add_argument('--kind', required=True, choices=[k.value for k in LossKind])
    p.add_argument('--labels', required=True)
    p.add_argument('--pred', required=True, help='probability CMG1 grid, one class per z')
    p.add_argument('--cm', default=None)
    p.add_argument('--out', default=None, help='JSON file (default: stdout)')
    _add_common(p, settings)

    p = sub.add_parser('metrics', help='segmentation metrics as CSV and JSON')
    p.add_argument('--pred', action='append', required=True)
    p.add_argument('--gt', action='append', required=True)
    p.add_argument('--subject', action='append', default=None)
    p.add_argument('--spacing', type=float, nargs='+', default=None,
                   help='voxel spacing x y [z] in mm (default: from the ground truth)')
    p.add_argument('--out', required=True, help='CSV file')
    p.add_argument('--json', default=None, help='JSON mirror with the aggregate block')
    p.add_argument('--config-order', choices=['subject_first', 'pooled'],
                   default='subject_first', help='aggregation order (default: %(default)s)')
    _add_common(p, settings)

    p = sub.add_parser('oracle', help='reference solutions for checking the CG map')
    p.add_argument('method', choices=['mc', 'dense'])
    p.add_argument('--in', dest='in_path', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--walks', type=int, default=settings.mc_walks)
    p.add_argument('--seed', type=int, default=settings.mc_seed)
    p.add_argument('--max-steps', type=int, default=None)
    p.add_argument('--stderr-out', default=None, help='write MC standard errors here')
    _add_spacing(p)
    _add_rw_flags(p, settings)
    _add_common(p, settings)

    p = sub.add_parser('train-toy', help='phantom configuration study as JSON')
    p.add_argument('--out', required=True)
    p.add_argument('--configs', nargs='+', default=list(HEADLINE_CONFIGURATIONS),
                   help=f'names or "all"; known: {", ".join(CONFIGURATIONS)}')
    p.add_argument('--seeds', type=int, default=20, help='number of seeds')
    p.add_argument('--seed', type=int, default=0, help='first seed')
    p.add_argument('--epochs', type=int, default=settings.toy_epochs)
    p.add_argument('--lr', type=float, default=settings.toy_lr)
    p.add_argument('--batch', type=int, default=settings.toy_batch)
    p.add_argument('--entropy-members', type=int, default=0,
                   help='ensemble size for the entropy maps (0 skips them)')
    _add_rw_flags(p, settings)
    _add_common(p, settings)

    p = sub.add_parser('entropy', help='predictive entropy of K probability maps')
    p.add_argument('--in', dest='in_paths', nargs='+', required=True)
    p.add_argument('--out', required=True)
    _add_common(p, settings)

    return parser


def _rw_params(args: argparse.Namespace, settings: Settings) -> RwParams:
    return RwParams(
        alpha=args.alpha,
        beta=args.beta,
        gamma=args.gamma,
        epsilon=args.epsilon,
        tol=args.tol,
        max_iter=args.max_iter,
        max_iter_factor=settings.max_iter_factor,
        preconditioner=args.preconditioner,
    )


def _dispatch(args: argparse.Namespace, settings: Settings) -> None:
    command = args.command
    if command == 'compute':
        pipelines.compute(
            args.in_path, args.out, _rw_params(args, settings), args.workers,
            args.export_pgm, args.spacing
        )
    elif command == 'sweep':
        pipelines.sweep(
            args.in_path, args.out, args.alpha_list, args.beta_list,
            _rw_params(args, settings), args.workers, args.spacing
        )
    elif command == 'mask':
        pipelines.mask(args.labels, args.cm, args.out)
    elif command == 'loss':
        value = pipelines.loss(args.kind, args.labels, args.pred, args.cm)
        text = pipelines.summary_json(value)
        if args.out is None:
            print(text)
        else:
            pipelines.write_json(text, args.out)
    elif command == 'metrics':
        pipelines.metrics(
            args.pred, args.gt, args.out, args.json, args.subject, args.spacing,
            args.config_order, settings.csv_float_format
        )
    elif command == 'oracle':
        params = _rw_params(args, settings)
        if args.method == 'mc':
            cfg = McConfig(walks_per_pixel=args.walks, max_steps=args.max_steps, seed=args.seed)
            summary = pipelines.oracle_mc(
                args.in_path, args.out, params, cfg, args.workers, args.stderr_out,
                args.spacing
            )
        else:
            summary = pipelines.oracle_dense(args.in_path, args.out, params, args.spacing)
        print(pipelines.summary_json(summary))
    elif command == 'train-toy':
        configs = list(CONFIGURATIONS) if args.configs == ['all'] else args.configs
        if args.seeds < 1:
            msg = f'--seeds must be >= 1, got {args.seeds}'
            raise ValueError(msg)
        train = TrainConfig(lr=args.lr, epochs=args.epochs, batch=args.batch)
        pipelines.train_toy(
            args.out, configs, range(args.seed, args.seed + args.seeds),
            train=train, params=_rw_params(args, settings),
            workers=args.workers, entropy_members=args.entropy_members
        )
    elif command == 'entropy':
        pipelines.entropy(args.in_paths, args.out)


def run_cli(argv: Optional[Sequence[str]] = None, settings: Optional[Settings] = None) -> int:
    """Parse argv, run the subcommand and return the exit code"""
    settings = settings or Settings()
    parser = build_parser(settings)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT

    try:
        configure_logging(args.log_level)
    except ValueError as err:
        print(f'confmaplib: error: {err}', file=sys.stderr)
        return EXIT_INPUT

    try:
        _dispatch(args, settings)
    except SolverError as err:
        print(f'confmaplib: solver error: {err}', file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, ConfmapError, OSError) as err:
        print(f'confmaplib: error: {err}', file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run_cli(argv))
