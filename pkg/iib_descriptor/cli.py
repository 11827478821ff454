import click
import os
import time
import warnings

import numpy as np

import iib_descriptor as iib
from iib_descriptor.descriptor import MAPPINGS, DescriptorConfig, descriptor_size
from iib_descriptor.ops import FORMAT_VERSION


VERSION_MESSAGE = (
    f'%(prog)s %(version)s, descriptor format version {FORMAT_VERSION}, fingerprint fields: '
    f'granularity, mapping, overlap, channels, radius, selection'
)


def config_options(f):
    """
    Descriptor configuration flags shared by every command that extracts descriptors.
    """
    options = [
        click.option('--granularity', default=4, show_default=True, type=int,
                     help='Maximal quadtree granularity G.'),
        click.option('--mapping', default='mean', show_default=True,
                     type=click.Choice(MAPPINGS), help='Mapping function.'),
        click.option('--overlap', is_flag=True, default=False,
                     help='Use overlapping quadruples.'),
        click.option('--channels', default='gx,gy,go,gi', show_default=True,
                     help='Comma-separated channels: gx, gy, go (orientation), gi (intensity).'),
        click.option('--rotation', is_flag=True, default=False,
                     help='Extract rotated regions for keypoints that carry an angle.'),
        click.option('--radius', default=32.0, show_default=True, type=float,
                     help='ROS radius of keypoints that do not carry their own.'),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def workers_option(f):
    return click.option(
        '--workers', default=os.cpu_count() or 1, type=int,
        help='Worker threads. Defaults to the number of CPUs; results do not depend on it.'
    )(f)


def _make_config(granularity, mapping, overlap, channels, rotation, radius):
    try:
        return DescriptorConfig(
            granularity=granularity, mapping=mapping, overlap=overlap, channels=channels,
            rotation=rotation, radius=radius
        )
    except ValueError as e:
        raise click.ClickException(str(e))


def _parse_grid(grid):
    try:
        rows, cols = (int(v) for v in grid.lower().split('x'))
    except ValueError:
        raise click.ClickException(f'--grid must look like 10x10, got {grid!r}.')
    return rows, cols


def _check_inpath(path, kind='Input file'):
    path = os.path.expanduser(os.path.abspath(path))
    if not os.path.exists(path):
        raise click.ClickException(f'{kind} {path!r} does not exist.')
    return path


def _check_outpath(path):
    path = os.path.expanduser(os.path.abspath(path))
    if not os.path.exists(os.path.dirname(path)):
        raise click.ClickException(f'Output directory {os.path.dirname(path)!r} does not exist.')
    return path


def _echo_errors(errors):
    for error in errors:
        details = ','.join(f'{k}={v}' for k, v in error['details'].items())
        click.echo(f"{error['type']}:{details}", err=True)


@click.group()
@click.version_option(version=iib.__version__, message=VERSION_MESSAGE)
def cli():
    pass


@click.command()
@click.argument('image')
@click.argument('outpath')
@click.option('--keypoints', default=None, help='Keypoint CSV file (x,y,radius,angle).')
@click.option('--grid', default='10x10', show_default=True,
              help='Grid of interior keypoints used when no keypoint file is given.')
@click.option('--mask', default=None, help='Selection mask file; writes reduced descriptors.')
@config_options
@workers_option
def extract(image, outpath, keypoints, grid, mask, granularity, mapping, overlap, channels,
            rotation, radius, workers):
    """Extract descriptors from an image."""
    config = _make_config(granularity, mapping, overlap, channels, rotation, radius)
    rows, cols = _parse_grid(grid)
    image = _check_inpath(image, 'Input image')
    outpath = _check_outpath(outpath)
    if keypoints is not None:
        keypoints = _check_inpath(keypoints, 'Keypoint file')
    if mask is not None:
        mask = _check_inpath(mask, 'Mask file')

    try:
        selection_mask = iib.selection.read_mask(mask) if mask is not None else None
        if selection_mask is not None and selection_mask.fingerprint != config.fingerprint():
            raise ValueError(
                f'The mask was learned for descriptors with fingerprint '
                f'{selection_mask.fingerprint}, which conflicts with the requested configuration '
                f'{config.fingerprint()}.'
            )
        img = iib.ops.read_image(image)
        if keypoints is not None:
            kps = iib.ops.read_keypoints(keypoints, radius=config.radius)
        else:
            kps = iib.ops.grid_keypoints(img.shape[1], img.shape[0], rows, cols, config.radius)

        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            descriptors, errors = iib.extract(
                iib.compute_channels(img), kps, config, workers=workers
            )
        if selection_mask is not None:
            descriptors = iib.selection.apply_mask(descriptors, selection_mask)
        iib.ops.to_descriptor_file(descriptors, outpath)
    except (ValueError, OSError) as e:
        raise click.ClickException(f'extract: {e}')

    _echo_errors(errors)
    click.echo(f'Wrote {len(descriptors)} descriptors of {descriptors.n_bits} bits to {outpath}.')


@click.command()
@click.argument('query')
@click.argument('train')
@click.argument('outpath')
@click.option('--mode', default='brute', show_default=True, type=click.Choice(['brute', 'hier']),
              help='Brute-force or hierarchical matching.')
@click.option('--threshold', default=0.5, show_default=True, type=float,
              help='Pruning threshold of hierarchical matching, as a fraction of segment bits.')
@workers_option
def match(query, train, outpath, mode, threshold, workers):
    """Match two descriptor files."""
    if not 0 < threshold <= 1:
        raise click.ClickException(f'--threshold must lie in (0, 1], got {threshold}.')
    query = _check_inpath(query, 'Descriptor file')
    train = _check_inpath(train, 'Descriptor file')
    outpath = _check_outpath(outpath)

    try:
        q = iib.ops.read_descriptor_file(query)
        t = iib.ops.read_descriptor_file(train)
        matches, stats = iib.matching.match(q, t, mode=mode, threshold=threshold, workers=workers)
        iib.ops.to_matches_csv(matches, outpath)
    except (ValueError, OSError) as e:
        raise click.ClickException(f'match: {e}')

    click.echo(f'MC={stats.match_cost}', err=True)
    click.echo(f'Wrote {len(matches)} matches to {outpath}.')


@click.command(name='eval')
@click.argument('directory')
@click.argument('outpath')
@click.option('--grid', default='10x10', show_default=True, help='Grid of reference keypoints.')
@click.option('--mode', default='brute', show_default=True, type=click.Choice(['brute', 'hier']))
@click.option('--threshold', default=0.5, show_default=True, type=float,
              help='Pruning threshold of hierarchical matching.')
@click.option('--epsilon', default=3.0, show_default=True, type=float,
              help='Reprojection threshold in pixels.')
@click.option('--descriptor', default='iib', show_default=True,
              type=click.Choice(['iib', 'point_pair']), help='Descriptor to evaluate.')
@click.option('--mask', default=None, help='Selection mask file.')
@click.option('--plot-data', default=None,
              help='Also write recall vs 1-precision curves over distance thresholds here.')
@click.option('--sweep-points', default=21, show_default=True, type=int,
              help='Number of distance thresholds in the --plot-data sweep.')
@config_options
@workers_option
def evaluate(directory, outpath, grid, mode, threshold, epsilon, descriptor, mask, plot_data,
             sweep_points, granularity, mapping, overlap, channels, rotation, radius, workers):
    """Evaluate on an HPatches-style directory of image sequences."""
    config = _make_config(granularity, mapping, overlap, channels, rotation, radius)
    rows, cols = _parse_grid(grid)
    if not 0 < threshold <= 1:
        raise click.ClickException(f'--threshold must lie in (0, 1], got {threshold}.')
    if epsilon < 0:
        raise click.ClickException(f'--epsilon must be nonnegative, got {epsilon}.')
    if plot_data is not None and descriptor != 'iib':
        raise click.ClickException('--plot-data is only available for the iib descriptor.')
    directory = _check_inpath(directory, 'Input directory')
    outpath = _check_outpath(outpath)
    if plot_data is not None:
        plot_data = _check_outpath(plot_data)
    if mask is not None:
        mask = _check_inpath(mask, 'Mask file')

    try:
        selection_mask = iib.selection.read_mask(mask) if mask is not None else None
        n_bits = selection_mask.n_bits if selection_mask is not None else descriptor_size(config)
        thresholds = None
        if plot_data is not None:
            thresholds = np.unique(np.round(np.linspace(0, n_bits, sweep_points))).astype(int)
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            report, curves, errors = iib.evaluation.evaluate_directory(
                directory, config=config, thresholds=thresholds, workers=workers,
                grid=(rows, cols), mode=mode, threshold=threshold, epsilon=epsilon,
                descriptor=descriptor, mask=selection_mask
            )
    except (ValueError, OSError) as e:
        raise click.ClickException(f'eval: {e}')

    if len(report) == 0:
        raise click.ClickException(f'eval: no image pairs were found in {directory!r}.')

    aggregate = iib.evaluation.aggregate_report(report)
    summary = report.copy()
    summary.loc[len(summary)] = [
        'aggregate', report['putative'].sum(), report['correct'].sum(),
        report['correspondences'].sum(), aggregate['mAP'], aggregate['mAR'], aggregate['MC']
    ]
    summary.to_csv(outpath, index=False)
    if curves is not None:
        curves[['pair_id', 'threshold', 'one_minus_precision', 'recall']].to_csv(
            plot_data, index=False
        )

    _echo_errors(errors)
    click.echo(
        f"pairs={aggregate['pairs']},mAP={aggregate['mAP']:.4f},mAR={aggregate['mAR']:.4f},"
        f"MC={aggregate['MC']:.4f}"
    )


@click.command(name='train-select')
@click.argument('directory')
@click.argument('outpath')
@click.option('--rounds', default=64, show_default=True, type=int, help='AdaBoost rounds.')
@click.option('--target-bits', default=256, show_default=True, type=int,
              help='Size of the reduced descriptor in bits.')
@click.option('--train-fraction', default=2 / 3, show_default=True, type=float,
              help='Fraction of image pairs used for training.')
@click.option('--grid', default='16x16', show_default=True, help='Grid of reference keypoints.')
@click.option('--n-positives', default=None, type=int,
              help='Number of positive (and negative) pairs to sample. Defaults to all.')
@click.option('--min-positives', default=10, show_default=True, type=int)
@click.option('--history', default=None, help='Also write the per-round AdaBoost history here.')
@click.option('--seed', default=0, show_default=True, type=int)
@config_options
def train_select(directory, outpath, rounds, target_bits, train_fraction, grid, n_positives,
                 min_positives, history, seed, granularity, mapping, overlap, channels,
                 rotation, radius):
    """Learn a selection mask from an HPatches-style directory."""
    config = _make_config(granularity, mapping, overlap, channels, rotation, radius)
    rows, cols = _parse_grid(grid)
    if rounds < 1:
        raise click.ClickException(f'--rounds must be positive, got {rounds}.')
    per_quadruple = 4 * config.bits_per_patch
    if target_bits % per_quadruple != 0 or not 0 < target_bits <= descriptor_size(config):
        raise click.ClickException(
            f'--target-bits must be a positive multiple of {per_quadruple} no larger than '
            f'{descriptor_size(config)}, got {target_bits}.'
        )
    directory = _check_inpath(directory, 'Input directory')
    outpath = _check_outpath(outpath)
    if history is not None:
        history = _check_outpath(history)

    try:
        sequence_pairs = iib.evaluation.find_sequence_pairs(directory)
        train_pairs, test_pairs = iib.selection.train_test_split(
            sequence_pairs, train_fraction=train_fraction, seed=seed
        )
        image_pairs = [
            (iib.ops.read_image(ref), iib.ops.read_image(test), iib.ops.read_homography(h))
            for _, ref, test, h in train_pairs
        ]
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            training_set, errors = iib.selection.build_training_set(
                image_pairs, config=config, grid=(rows, cols), n_positives=n_positives,
                min_positives=min_positives, seed=seed
            )
            weights, round_history, boost_errors = iib.selection.adaboost_train(
                training_set, rounds=rounds
            )
        selection_mask = iib.selection.select_top_m(weights, target_bits, config)
        iib.selection.write_mask(selection_mask, outpath)
        if history is not None:
            round_history.to_csv(history, index=False)
    except (ValueError, OSError) as e:
        raise click.ClickException(f'train-select: {e}')

    _echo_errors(errors + boost_errors)
    click.echo(
        f'Trained on {len(train_pairs)} image pairs ({training_set.n_positives} positives), held '
        f'out {len(test_pairs)}: ' + ' '.join(p[0] for p in test_pairs)
    )
    click.echo(f'Wrote a mask of {len(selection_mask)} quadruples ({target_bits} bits) to {outpath}.')


@click.command()
@click.argument('image')
@click.argument('outpath')
@click.option('--gain', default=1.0, show_default=True, type=float)
@click.option('--bias', default=0.0, show_default=True, type=float)
@click.option('--gamma', default=1.0, show_default=True, type=float)
@click.option('--homography', default=None, help='Homography file to warp the image with.')
@click.option('--homography-out', default=None, help='Write the ground truth homography here.')
@click.option('--noise', default=0.0, show_default=True, type=float,
              help='Standard deviation of additive Gaussian sensor noise.')
@click.option('--seed', default=0, show_default=True, type=int)
def synth(image, outpath, gain, bias, gamma, homography, homography_out, noise, seed):
    """Generate the test image of a synthetic illumination pair."""
    if gain <= 0 or gamma <= 0:
        raise click.ClickException(f'--gain and --gamma must be positive, got {gain}, {gamma}.')
    if noise < 0:
        raise click.ClickException(f'--noise must be nonnegative, got {noise}.')
    image = _check_inpath(image, 'Input image')
    outpath = _check_outpath(outpath)
    if homography is not None:
        homography = _check_inpath(homography, 'Homography file')
    if homography_out is not None:
        homography_out = _check_outpath(homography_out)

    try:
        img = iib.ops.read_image(image)
        H = iib.ops.read_homography(homography) if homography is not None else None
        out, H = iib.evaluation.synth_pair(
            img, gain=gain, bias=bias, gamma=gamma, H=H, noise=noise, seed=seed, quantize=True
        )
        iib.ops.write_image(outpath, out)
        if homography_out is not None:
            iib.ops.write_homography(homography_out, H)
    except (ValueError, OSError) as e:
        raise click.ClickException(f'synth: {e}')


@click.command()
@click.option('--grid', default='25x40', show_default=True,
              help='Grid of keypoints to describe (25x40 = 1000 keypoints).')
@click.option('--size', default=512, show_default=True, type=int,
              help='Side of the synthetic benchmark image.')
@click.option('--seed', default=0, show_default=True, type=int)
@config_options
@workers_option
def bench(grid, size, seed, granularity, mapping, overlap, channels, rotation, radius, workers):
    """Time extraction and count bit formulation operations."""
    config = _make_config(granularity, mapping, overlap, channels, rotation, radius)
    rows, cols = _parse_grid(grid)

    try:
        img = iib.utils.synthetic_texture(size, size, seed=seed)
        kps = iib.ops.grid_keypoints(size, size, rows, cols, config.radius)
        stack = iib.compute_channels(img)

        start = time.perf_counter()
        descriptors, _ = iib.extract(stack, kps, config, workers=workers)
        elapsed = time.perf_counter() - start

        counter = iib.utils.OpCounter()
        iib.extract(stack, kps, config, counter=counter, workers=1)
    except ValueError as e:
        raise click.ClickException(f'bench: {e}')

    n_bits = descriptor_size(config)
    algebraic, relational = counter.per_descriptor()
    rate = len(descriptors) / elapsed if elapsed > 0 else float('inf')
    click.echo(f'descriptors={len(descriptors)}')
    click.echo(f'bits={n_bits}')
    click.echo(f'descriptors_per_sec={rate:.1f}')
    click.echo(f'algebraic_ops={counter.algebraic}')
    click.echo(f'relational_ops={counter.relational}')
    click.echo(f'algebraic_per_descriptor={algebraic:.2f}')
    click.echo(f'relational_per_descriptor={relational:.2f}')

    if config.mapping == 'mean' and (algebraic > 4 * n_bits or relational != n_bits):
        raise click.ClickException(
            f'bench: the mean mapping spent {algebraic:.2f} algebraic and {relational:.2f} '
            f'relational operations per descriptor, over the budget of {4 * n_bits} and '
            f'{n_bits}.'
        )


cli.add_command(extract)
cli.add_command(match)
cli.add_command(evaluate)
cli.add_command(train_select)
cli.add_command(synth)
cli.add_command(bench)
