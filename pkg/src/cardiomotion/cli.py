"""Command-line entry points tying the pipeline together.

Subcommands: phantom (synthesize a dataset), register (direct LDDMM,
network pre-training, or amortized apply), train (joint refinement
training), infer (refined displacements for one sequence), strain and
eval (analytics CSVs and PGM maps), config-reference (default config
document).  Every subcommand exits 0 on success and nonzero with a
single-line diagnostic on failure; outputs are written to a temporary
file and renamed, so a crash never leaves partial files behind.
"""

import os
import sys

_threads = os.environ.get("CARDIOMOTION_THREADS")
if _threads:
    # must happen before numpy loads its BLAS; harmless otherwise
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import io
import json
import tempfile

import numpy as np

from .config import RunConfig, config_to_dict, load_config, write_reference
from .container import read_container, write_container
from .diffusion import DiffusionConfig, infer as diffusion_infer, make_schedule, train as diffusion_train
from .errors import ConfigError, ContainerFormatError, GridMismatchError, IntegrationDivergedError
from .geodesic import ShootingConfig
from .grid import FieldSequence, Grid2, VectorField
from .metric import MetricOperator, SmoothingKernel
from .nn import (MotionDecoder, NoisePredictor, ParameterStore, RegistrationNet, UNetConfig,
                 load_checkpoint, no_grad, save_checkpoint)
from .phantom import DatasetRanges, PhantomConfig, load_sample, make_dataset, save_sample
from .registration import (RegistrationConfig, build_pairs, energy, pair_stack, register_pair,
                           train_registration_network)
from .strain import (Mask, epe, segment_mask, segmental_strain, segmental_strain_error,
                     strain_from_displacement, write_pgm)


def _atomic_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".out-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    return buf.getvalue()


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def _run_config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _grid(cfg: RunConfig) -> Grid2:
    return Grid2(cfg.grid.height, cfg.grid.width, cfg.grid.spacing)


def _reg_config(cfg: RunConfig, grid: Grid2) -> RegistrationConfig:
    op = MetricOperator(grid, alpha=cfg.metric.alpha, gamma=cfg.metric.gamma,
                        power=cfg.metric.power)
    shooting = ShootingConfig(cfg.shooting.num_steps, op)
    return RegistrationConfig(shooting, sigma=cfg.registration.sigma,
                              learning_rate=cfg.registration.learning_rate,
                              max_iterations=cfg.registration.max_iterations,
                              convergence_tol=cfg.registration.convergence_tol)


def _unet_config(cfg: RunConfig) -> UNetConfig:
    n = cfg.nets
    return UNetConfig(in_channels=2, base_channels=n.base_channels,
                      latent_channels=n.latent_channels, num_down=n.num_down,
                      time_embed_dim=n.time_embed_dim)


def _diffusion_parts(cfg: RunConfig):
    d = cfg.diffusion
    schedule = make_schedule(d.num_steps, d.beta_start, d.beta_end)
    kernel = SmoothingKernel(d.kernel_std)
    dcfg = DiffusionConfig(schedule=schedule, kernel=kernel, loss_alpha=d.loss_alpha,
                           lambda_eps=d.lambda_eps, lambda_m=d.lambda_m,
                           batch_size=d.batch_size, max_epochs=d.max_epochs)
    return dcfg


def _load_manifest(dataset_dir: str) -> dict:
    path = os.path.join(dataset_dir, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from e
    for split in ("train", "validation", "test"):
        if split not in manifest:
            raise ConfigError(f"{path}: manifest missing split {split!r}")
    return manifest


def _load_split(dataset_dir: str, split: str) -> list:
    manifest = _load_manifest(dataset_dir)
    if split == "all":
        names = manifest["train"] + manifest["validation"] + manifest["test"]
    else:
        names = manifest[split]
    return [(name, load_sample(os.path.join(dataset_dir, name))) for name in names]


def _truth_stack(sample) -> np.ndarray:
    return np.stack([np.stack([m.x_component, m.y_component]) for m in sample.motions.frames])


def _motions_from_file(path, grid: Grid2) -> FieldSequence:
    records = read_container(path)
    if "motions" not in records:
        raise ConfigError(f"{path}: no 'motions' record")
    arr = records["motions"]
    if arr.ndim != 4 or arr.shape[1] != 2 or arr.shape[2:] != grid.shape:
        raise ConfigError(f"{path}: motions shape {arr.shape} does not match grid {grid.shape}")
    return FieldSequence([VectorField(grid, a[0], a[1]) for a in arr])


def cmd_phantom(args) -> int:
    cfg = _run_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    p = cfg.phantom
    base = PhantomConfig(grid=_grid(cfg), num_frames=p.num_frames,
                         r_inner=p.r_inner[0], r_outer=p.r_outer[0],
                         center_jitter=p.center_jitter, smoothing_std=p.smoothing_std)
    ranges = DatasetRanges(contraction=p.contraction, twist=p.twist,
                           r_inner=p.r_inner, r_outer=p.r_outer)
    splits = make_dataset(args.n, base, ranges, seed)
    os.makedirs(args.out, exist_ok=True)
    manifest = {"train": [], "validation": [], "test": []}
    index = 0
    for split_name, samples in (("train", splits.train), ("validation", splits.validation),
                                ("test", splits.test)):
        for sample in samples:
            name = f"sample_{index:03d}.lmf1"
            save_sample(os.path.join(args.out, name), sample)
            manifest[split_name].append(name)
            index += 1
    _atomic_text(os.path.join(args.out, "manifest.json"),
                 json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {index} samples to {args.out} "
          f"({len(manifest['train'])}/{len(manifest['validation'])}/{len(manifest['test'])})")
    return 0


def _register_direct(args, cfg: RunConfig, items) -> int:
    rcfg = _reg_config(cfg, items[0][1].images.grid)
    rows = [["file", "pair", "iterations", "final_energy"]]
    for name, sample in items:
        fields = []
        for k, (src, tgt) in enumerate(build_pairs(sample.images)):
            result = register_pair(rcfg, src, tgt)
            fields.append(np.stack([result.v0.x_component, result.v0.y_component]))
            rows.append([name, k, len(result.energy_trace) - 1, _fmt(result.energy_trace[-1])])
        write_container(os.path.join(args.out, f"v0_{name}"), {"v0": np.stack(fields)})
    _atomic_text(os.path.join(args.out, "energies.csv"), _csv_text(rows))
    print(f"registered {len(items)} sequences")
    return 0


def _register_train(args, cfg: RunConfig, items) -> int:
    if not args.model_out:
        raise ConfigError("train mode requires --model-out")
    rcfg = _reg_config(cfg, items[0][1].images.grid)
    net = RegistrationNet(_unet_config(cfg), seed=cfg.seed)
    history = train_registration_network(net, [pair_stack(s.images) for _, s in items], rcfg,
                                         epochs=args.epochs,
                                         learning_rate=args.learning_rate,
                                         seed=cfg.seed if args.seed is None else args.seed)
    save_checkpoint(net.store, args.model_out)
    rows = [["epoch", "loss"]] + [[i, _fmt(v)] for i, v in enumerate(history)]
    _atomic_text(os.path.join(args.out, "register_train_log.csv"), _csv_text(rows))
    print(f"trained registration network: loss {history[0]:.6g} -> {history[-1]:.6g}")
    return 0


def _register_apply(args, cfg: RunConfig, items) -> int:
    if not args.model_in:
        raise ConfigError("apply mode requires --model-in")
    grid = items[0][1].images.grid
    rcfg = _reg_config(cfg, grid)
    net = RegistrationNet(_unet_config(cfg), seed=cfg.seed)
    load_checkpoint(net.store, args.model_in)
    rows = [["file", "pair", "iterations", "final_energy"]]
    for name, sample in items:
        with no_grad():
            v0 = net.forward(pair_stack(sample.images)).values
        for k, (src, tgt) in enumerate(build_pairs(sample.images)):
            total, _, _ = energy(rcfg, VectorField(grid, v0[k, 0], v0[k, 1]), src, tgt)
            rows.append([name, k, 0, _fmt(total)])
        write_container(os.path.join(args.out, f"v0_{name}"), {"v0": v0})
    _atomic_text(os.path.join(args.out, "energies.csv"), _csv_text(rows))
    print(f"applied registration network to {len(items)} sequences")
    return 0


def cmd_register(args) -> int:
    cfg = _run_config(args)
    items = _load_split(args.dataset, args.split)
    if not items:
        raise ConfigError(f"split {args.split!r} is empty")
    os.makedirs(args.out, exist_ok=True)
    if args.mode == "direct":
        return _register_direct(args, cfg, items)
    if args.mode == "train":
        return _register_train(args, cfg, items)
    return _register_apply(args, cfg, items)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train_items = _load_split(args.dataset, "train")
    val_items = _load_split(args.dataset, "validation")
    if not train_items:
        raise ConfigError("training split is empty")
    grid = train_items[0][1].images.grid
    num_frames = len(train_items[0][1].motions)
    for name, s in train_items + val_items:
        if s.images.grid != grid or len(s.motions) != num_frames:
            raise ConfigError(f"{name}: inconsistent grid or frame count")

    ucfg = _unet_config(cfg)
    reg = RegistrationNet(ucfg, seed=cfg.seed)
    load_checkpoint(reg.store, args.registration_model)
    store = ParameterStore()
    eps_net = NoisePredictor(ucfg, num_frames, store, seed=cfg.seed + 1)
    mot_net = MotionDecoder(ucfg, num_frames, grid.height, grid.width, store, seed=cfg.seed + 2)
    if args.resume:
        load_checkpoint(store, args.resume)

    dcfg = _diffusion_parts(cfg)
    os.makedirs(args.out, exist_ok=True)
    result = diffusion_train(
        reg, eps_net, mot_net,
        [(pair_stack(s.images), _truth_stack(s)) for _, s in train_items],
        [(pair_stack(s.images), _truth_stack(s)) for _, s in val_items],
        dcfg, learning_rate=cfg.diffusion.learning_rate, patience=cfg.diffusion.patience,
        seed=cfg.seed if args.seed is None else args.seed,
        log_path=os.path.join(args.out, "train_log.csv"),
    )
    save_checkpoint(store, os.path.join(args.out, "model.lmf1"))
    print(f"trained {len(result.history)} epochs; best validation {result.best_val:.6g} "
          f"at epoch {result.best_epoch}")
    return 0


def cmd_infer(args) -> int:
    cfg = _run_config(args)
    sample = load_sample(args.sample)
    grid = sample.images.grid
    num_frames = len(sample.motions)
    ucfg = _unet_config(cfg)
    reg = RegistrationNet(ucfg, seed=cfg.seed)
    load_checkpoint(reg.store, args.registration_model)
    store = ParameterStore()
    eps_net = NoisePredictor(ucfg, num_frames, store, seed=cfg.seed + 1)
    mot_net = MotionDecoder(ucfg, num_frames, grid.height, grid.width, store, seed=cfg.seed + 2)
    load_checkpoint(store, args.model)
    d = cfg.diffusion
    schedule = make_schedule(d.num_steps, d.beta_start, d.beta_end)
    rng = np.random.default_rng(cfg.seed if args.seed is None else args.seed)
    motions = diffusion_infer(sample.images, reg, eps_net, mot_net, schedule,
                              SmoothingKernel(d.kernel_std), rng)
    arr = np.stack([np.stack([m.x_component, m.y_component]) for m in motions.frames])
    write_container(args.out, {"motions": arr})
    print(f"wrote {arr.shape[0]}-frame displacement sequence to {args.out}")
    return 0


def cmd_strain(args) -> int:
    sample = load_sample(args.sample)
    grid = sample.images.grid
    motions = (_motions_from_file(args.motions, grid) if args.motions
               else sample.motions)
    num_frames = len(motions)
    frame = args.frame if args.frame is not None else max(1, round(num_frames / 2))
    if not 1 <= frame <= num_frames:
        raise ConfigError(f"--frame {frame} outside 1..{num_frames}")
    center = sample.mask.centroid()
    smap = strain_from_displacement(motions[frame - 1], center)
    seg = segment_mask(sample.mask, center, sample.insertion_angle)
    means = segmental_strain(smap, seg)
    rows = [["segment", "mean_ecc"]]
    rows += [[k + 1, _fmt(means[k]) if np.isfinite(means[k]) else "missing"] for k in range(6)]
    _atomic_text(args.out_prefix + "_strain.csv", _csv_text(rows))
    window = (args.window_low, args.window_high)
    ecc_masked = np.where(sample.mask.labels & smap.valid.labels, smap.ecc, np.nan)
    write_pgm(args.out_prefix + "_ecc.pgm", ecc_masked, window)
    print(f"wrote {args.out_prefix}_strain.csv and {args.out_prefix}_ecc.pgm (frame {frame})")
    return 0


def cmd_eval(args) -> int:
    sample = load_sample(args.sample)
    grid = sample.images.grid
    pred = _motions_from_file(args.pred, grid)
    truth = sample.motions
    if len(pred) != len(truth):
        raise ConfigError(f"prediction has {len(pred)} frames, truth has {len(truth)}")
    center = sample.mask.centroid()
    seg = segment_mask(sample.mask, center, sample.insertion_angle)
    rows = [["quantity", "frame", "segment", "value"]]
    for t in range(len(truth)):
        rows.append(["epe", t + 1, "", _fmt(epe(pred[t], truth[t], sample.mask))])
    peak = max(1, round(len(truth) / 2))
    sp = strain_from_displacement(pred[peak - 1], center)
    st = strain_from_displacement(truth[peak - 1], center)
    errs = segmental_strain_error(sp, st, seg)
    for k in range(6):
        value = _fmt(errs[k]) if np.isfinite(errs[k]) else "missing"
        rows.append(["strain_error", peak, k + 1, value])
    _atomic_text(args.out, _csv_text(rows))
    print(f"wrote {args.out}")
    return 0


def cmd_config_reference(args) -> int:
    write_reference(args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardiomotion",
        description="Cardiac motion estimation: registration, latent refinement, strain.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="synthesize an annulus dataset with ground truth")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of sequences")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("register", help="LDDMM registration: direct, train, or apply")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--dataset", required=True, help="dataset directory with manifest.json")
    p.add_argument("--mode", choices=("direct", "train", "apply"), required=True)
    p.add_argument("--split", default="train", choices=("train", "validation", "test", "all"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model-in", help="checkpoint to apply")
    p.add_argument("--model-out", help="checkpoint to write (train mode)")
    p.add_argument("--epochs", type=int, default=50, help="train-mode epochs")
    p.add_argument("--learning-rate", type=float, default=None,
                   help="train-mode learning rate (default: registration lr)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("train", help="jointly train the noise predictor and motion decoder")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--dataset", required=True)
    p.add_argument("--registration-model", required=True, help="pre-trained encoder checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="refined displacement sequence for one sample")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--sample", required=True, help="phantom sample file")
    p.add_argument("--registration-model", required=True)
    p.add_argument("--model", required=True, help="refinement checkpoint")
    p.add_argument("--out", required=True, help="output displacement file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("strain", help="strain map and segment means for one frame")
    p.add_argument("--sample", required=True, help="sample file (mask, insertion angle)")
    p.add_argument("--motions", help="displacement file (default: the sample's ground truth)")
    p.add_argument("--frame", type=int, help="1-based frame (default: mid-cycle)")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--window-low", type=float, default=-0.25, help="PGM window lower bound")
    p.add_argument("--window-high", type=float, default=0.25, help="PGM window upper bound")
    p.set_defaults(func=cmd_strain)

    p = sub.add_parser("eval", help="end-point error and segmental strain error vs ground truth")
    p.add_argument("--sample", required=True, help="sample file with ground truth")
    p.add_argument("--pred", required=True, help="predicted displacement file")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("config-reference", help="write the default configuration document")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_config_reference)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContainerFormatError, GridMismatchError, IntegrationDivergedError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
