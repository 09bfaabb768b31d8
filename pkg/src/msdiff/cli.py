"""Command-line entry point: ``msdiff [options] <command> ...``.

Commands run one stage each and read what earlier stages wrote:

    phantom       random train/test phantoms
    project       full-view sinograms (optionally with Poisson noise)
    train         fit the full-view (fdm) or sparse-view (sdm) score model
    reconstruct   fbp / fdm / sdm / sdm-interp / msdiff reconstruction of the test set
    evaluate      metrics and centre-row profiles for every reconstruction
    ablate        method x view-count table plus the sparse-view mask sweep

Relative paths in the config resolve against ``--out`` (default: the current
directory). Each run writes ``manifests/<command>.txt`` with the config hash,
seed, library versions and output checksums; rerunning the same command with
the same config and seed must reproduce it, or the exit status is 3.
"""
from __future__ import annotations

import argparse
import hashlib
import importlib.metadata
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, set_threads
from .config import ConfigError, ExperimentConfig
from .raster import Raster, RasterKind, load_raster, save_raster

log = logging.getLogger("msdiff")

EXIT_USAGE = 2
EXIT_MISMATCH = 3
EXIT_FAILURE = 1
MANIFEST_MAGIC = "msdiff-manifest 1"
RECON_METHODS = ("fbp", "fdm", "sdm", "sdm-interp", "msdiff")


class StageError(RuntimeError):
    """A prerequisite is missing or a stage cannot run."""


class Workspace:
    def __init__(self, cfg: ExperimentConfig, root: Path):
        self.cfg = cfg
        self.root = root
        self.outputs: list[Path] = []

    def _resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    @property
    def dataset_dir(self) -> Path:
        return self._resolve(self.cfg.paths.dataset_dir)

    @property
    def checkpoint_dir(self) -> Path:
        return self._resolve(self.cfg.paths.checkpoint_dir)

    @property
    def output_dir(self) -> Path:
        return self._resolve(self.cfg.paths.output_dir)

    def record(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def save(self, path: Path, values, kind=RasterKind.IMAGE, pixel_size=None):
        if pixel_size is None:
            pixel_size = 2.0 / self.cfg.geometry.image_size
        save_raster(path, Raster(np.asarray(values), pixel_size, kind))
        self.record(path)

    def load_stack(self, split: str, stem: str) -> np.ndarray:
        files = sorted((self.dataset_dir / split).glob(f"{stem}_*.msr"))
        if not files:
            raise StageError(f"no {stem} files in {self.dataset_dir / split}; run the earlier stage first")
        return np.stack([load_raster(f).values.astype(np.float64) for f in files])

    def checkpoint_path(self, which: str, views: int | None = None) -> Path:
        name = "fdm.ckpt" if which == "fdm" else f"sdm_{views}.ckpt"
        return self.checkpoint_dir / name

    def load_model(self, which: str, views: int | None = None):
        from .diffusion import load_checkpoint

        path = self.checkpoint_path(which, views)
        if not path.exists():
            raise StageError(f"missing checkpoint {path}; run 'train {which}' first")
        return load_checkpoint(path)


# ---------------------------------------------------------------------------
# stages


def cmd_phantom(ws: Workspace, args) -> None:
    from .phantom import phantom_set

    c = ws.cfg
    for index, (split, count) in enumerate((("train", c.data.train_count), ("test", c.data.test_count))):
        specs, images = phantom_set(count, c.seed_for("phantom", index), c.geometry.image_size,
                                    c.data.min_ellipses, c.data.max_ellipses)
        for i, (spec, img) in enumerate(zip(specs, images)):
            ws.save(ws.dataset_dir / split / f"phantom_{i:04d}.msr", img)
            spec_path = ws.dataset_dir / split / f"phantom_{i:04d}.txt"
            spec_path.write_text(spec.to_text())
            ws.record(spec_path)
        log.info("wrote %d %s phantoms", count, split)


def cmd_project(ws: Workspace, args) -> None:
    from .phantom import NoiseSpec, add_poisson_noise
    from .projector import forward_project

    c = ws.cfg
    geom = c.fan_geometry()
    for index, split in enumerate(("train", "test")):
        images = ws.load_stack(split, "phantom")
        sino = forward_project(images, geom)
        if c.data.poisson_noise:
            sino = add_poisson_noise(sino, NoiseSpec(True, c.data.incident_photons,
                                                     c.seed_for("noise", index)))
        for i, s in enumerate(sino):
            ws.save(ws.dataset_dir / split / f"sino_{i:04d}.msr", s, RasterKind.SINOGRAM,
                    geom.detector_pitch)
        log.info("projected %d %s phantoms", len(sino), split)


def cmd_train(ws: Workspace, args) -> None:
    import torch

    from .diffusion import ScoreNet, save_checkpoint, train_score_model

    c = ws.cfg
    data = ws.load_stack("train", "sino")
    views = args.mask_views or c.masks.sdm_views
    mask = c.sdm_mask(views) if args.which == "sdm" else None
    seed = c.seed_for("train", 0 if mask is None else views)
    torch.manual_seed(seed)
    t = c.training
    net = ScoreNet(channels=t.channels, depth=t.depth, view_dilations=t.view_dilations)
    result = train_score_model(data, c.train_config(seed), c.noise_schedule(), net=net, view_mask=mask)
    path = ws.checkpoint_path(args.which, views)
    save_checkpoint(path, result.model)
    ws.record(path)
    trace = ws.checkpoint_dir / f"loss_{path.stem}.csv"
    result.write_trace(trace)
    ws.record(trace)
    log.info("trained %s: mean loss of the last 100 steps %.3f", path.stem,
             float(np.mean(result.losses[-100:])))


def _reconstruct(ws: Workspace, method: str, views: int, sdm_views: int, truth_sino):
    from . import pipeline as pl
    from .sinogram import extract_sparse

    c = ws.cfg
    geom = c.fan_geometry()
    acq = c.acquisition_mask(views)
    y = extract_sparse(truth_sino, acq)
    if method == "fbp":
        return pl.fbp_sparse(y, acq, geom), None, None
    fdm = ws.load_model("fdm") if method in ("fdm", "msdiff") else None
    sdm = ws.load_model("sdm", sdm_views) if method != "fdm" else None
    job = pl.ReconstructionJob(y, acq, geom, fdm=fdm, sdm=sdm,
                               sdm_mask=sdm.view_mask if sdm is not None else None,
                               sampler=c.sampler_config(c.seed_for("sample")),
                               pure_noise_start=c.sampler.pure_noise_start)
    fn = {"fdm": pl.fdm_reconstruct, "sdm": pl.sdm_reconstruct, "msdiff": pl.msdiff_reconstruct,
          "sdm-interp": lambda j, trace: pl.sdm_reconstruct(j, trace=trace, fill="interpolate")}[method]
    trace = []
    image, sino = fn(job, trace=trace)
    return image, sino, trace


def cmd_reconstruct(ws: Workspace, args) -> None:
    from .sampler import write_trace

    c = ws.cfg
    views = args.views or c.masks.acquired_views
    sdm_views = args.sdm_views or c.masks.sdm_views
    truth = ws.load_stack("test", "phantom")
    truth_sino = ws.load_stack("test", "sino")
    image, sino, trace = _reconstruct(ws, args.method, views, sdm_views, truth_sino)
    out = ws.output_dir / "recon" / f"{args.method}_v{views}"
    pitch = c.fan_geometry().detector_pitch
    for i in range(len(truth)):
        ws.save(out / f"image_{i:04d}.msr", image[i])
        ws.save(out / f"diff_{i:04d}.msr", image[i] - truth[i])
        if sino is not None:
            ws.save(out / f"sinogram_{i:04d}.msr", sino[i], RasterKind.SINOGRAM, pitch)
    if trace is not None:
        write_trace(out / "residual.csv", trace)
        ws.record(out / "residual.csv")
    log.info("reconstructed %d test images with %s at %d views", len(truth), args.method, views)


def cmd_evaluate(ws: Workspace, args) -> None:
    import csv

    from .metrics import METRIC_COLUMNS, MetricsReport, extract_profile, metrics_row, write_profiles

    truth = ws.load_stack("test", "phantom")
    recon_root = ws.output_dir / "recon"
    runs = sorted(p for p in recon_root.glob("*_v*") if p.is_dir()) if recon_root.exists() else []
    if not runs:
        raise StageError(f"no reconstructions under {recon_root}; run 'reconstruct' first")
    rows, profiles = [], {}
    centre = truth.shape[1] // 2
    profiles["truth"] = extract_profile(truth[0], centre)
    for run in runs:
        method, _, views = run.name.rpartition("_v")
        images = [load_raster(run / f"image_{i:04d}.msr").values.astype(np.float64)
                  for i in range(len(truth))]
        reports = [MetricsReport.compare(img, t) for img, t in zip(images, truth)]
        mean = MetricsReport(*(float(np.mean([getattr(r, f) for r in reports]))
                               for f in ("psnr", "ssim", "mse", "data_range")))
        rows.append(metrics_row(method, views, mean))
        profiles[run.name] = extract_profile(images[0], centre)
    path = ws.output_dir / "metrics.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(rows)
    ws.record(path)
    write_profiles(ws.output_dir / "profiles.csv", profiles)
    ws.record(ws.output_dir / "profiles.csv")
    for r in rows:
        log.info("%-8s %3s views  PSNR %s  SSIM %s", *r[:4])


def cmd_ablate(ws: Workspace, args) -> None:
    from . import pipeline as pl
    from .phantom import NoiseSpec

    c = ws.cfg
    truth = ws.load_stack("test", "phantom")
    fdm = ws.load_model("fdm")
    sdms = {v: ws.load_model("sdm", v) for v in sorted({c.masks.sdm_views, *c.masks.sweep_sdm_views})}
    noise = NoiseSpec(True, c.data.incident_photons, c.seed_for("noise", 1)) if c.data.poisson_noise else None
    seeds = [c.seed_for("sample", s) for s in range(c.run.sample_seeds)]
    rows = pl.ablation_sweep(truth, c.fan_geometry(), fdm, sdms, c.masks.sdm_views,
                             view_counts=c.masks.ablation_views,
                             sampler=c.sampler_config(seeds[0]), seeds=seeds, noise=noise)
    path = ws.output_dir / "ablation.csv"
    pl.write_sweep_csv(path, rows)
    ws.record(path)


COMMANDS = {
    "phantom": cmd_phantom,
    "project": cmd_project,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------------------
# manifest


def _versions() -> dict[str, str]:
    out = {"msdiff": __version__}
    for name in ("numpy", "scipy", "numba", "torch"):
        try:
            out[name] = importlib.metadata.version(name)
        except importlib.metadata.PackageNotFoundError:
            out[name] = "absent"
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def manifest_text(ws: Workspace, command: str) -> str:
    lines = [MANIFEST_MAGIC,
             f"command = {command}",
             f"config_sha256 = {ws.cfg.digest()}",
             f"seed = {ws.cfg.run.seed}"]
    lines += [f"version.{k} = {v}" for k, v in _versions().items()]
    for path in sorted(set(ws.outputs)):
        lines.append(f"output {_sha256(path)} {path.relative_to(ws.root).as_posix()}")
    return "\n".join(lines) + "\n"


def _identity(text: str) -> tuple[str, ...]:
    keys = ("command =", "config_sha256 =", "seed =")
    return tuple(line for line in text.splitlines() if line.startswith(keys))


def write_manifest(ws: Workspace, command: str) -> tuple[Path, list[str]]:
    """Write the manifest; when a run with the same identity exists, compare first.

    Returns the manifest path and a list of mismatching lines (empty when
    the run matches or there was nothing to verify against).
    """
    name = command.replace(" ", "_")
    path = ws.root / "manifests" / f"{name}.txt"
    new = manifest_text(ws, command)
    problems = []
    if path.exists():
        old = path.read_text()
        if _identity(old) == _identity(new) and old != new:
            old_lines, new_lines = set(old.splitlines()), set(new.splitlines())
            problems = [f"- {l}" for l in sorted(old_lines - new_lines)]
            problems += [f"+ {l}" for l in sorted(new_lines - old_lines)]
            path.with_suffix(".rejected").write_text(new)
            return path, problems
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(new)
    return path, problems


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="experiment INI file (defaults if omitted)")
    parser.add_argument("--seed", type=int, help="override the root seed")
    parser.add_argument("--out", type=Path, default=Path("."), help="root for relative paths")
    parser.add_argument("--quiet", action="store_true", help="only report errors")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", help="generate random train/test phantoms")
    sub.add_parser("project", help="forward-project the phantoms")
    p = sub.add_parser("train", help="train a score model")
    p.add_argument("which", choices=("fdm", "sdm"))
    p.add_argument("--mask-views", type=int, help="sparse-view mask size (sdm only)")
    p = sub.add_parser("reconstruct", help="reconstruct the test set")
    p.add_argument("method", choices=RECON_METHODS)
    p.add_argument("--views", type=int, help="acquired views (default from config)")
    p.add_argument("--sdm-views", type=int, help="sparse-view mask size")
    sub.add_parser("evaluate", help="metrics for all reconstructions")
    sub.add_parser("ablate", help="method and mask sweep table")
    sub.add_parser("write-config", help="print the effective config")
    return parser


def _command_label(args) -> str:
    if args.command == "train":
        return f"train {args.which}" + (f" {args.mask_views}" if args.which == "sdm" and args.mask_views else "")
    if args.command == "reconstruct":
        label = f"reconstruct {args.method}" + (f" {args.views}" if args.views else "")
        if args.method not in ("fbp", "fdm") and args.sdm_views:
            label += f" sdm{args.sdm_views}"
        return label
    return args.command


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        print(f"msdiff: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "write-config":
        sys.stdout.write(cfg.to_text())
        return 0
    set_threads()
    ws = Workspace(cfg, args.out)
    label = _command_label(args)
    try:
        COMMANDS[args.command](ws, args)
    except (StageError, ConfigError, ValueError, OSError) as exc:
        print(f"msdiff {label}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    path, problems = write_manifest(ws, label)
    if problems:
        print(f"msdiff {label}: rerun does not match {path}:", file=sys.stderr)
        for line in problems:
            print(f"  {line}", file=sys.stderr)
        return EXIT_MISMATCH
    log.info("manifest %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
