"""``psinvert`` command line: synth | render | reconstruct | eval | gbr-probe | gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data, gbr, gradsuite, metrics, plotting
from .data import SynthSceneSpec, load_dataset, read_pfm, save_dataset, synth_scene, write_pfm
from .errors import PsInvertError
from .field import LightTable, load_checkpoint, save_checkpoint
from .optimize import Solution, TrainConfig, reconstruct
from .shading import SpecularBasisBank, shade

log = logging.getLogger("psinvert")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    spec = SynthSceneSpec(
        shape=args.shape,
        height=args.height,
        width=args.width,
        radius=args.radius,
        bump_amplitude=args.bump_amplitude,
        bump_frequency=args.bump_frequency,
        material=args.material,
        diffuse=args.diffuse,
        specular=args.specular,
        specular_bases=tuple(int(i) for i in args.specular_bases.split(",") if i),
        k=args.k,
        r_t=args.r_t,
        r_b=args.r_b,
        n_lights=args.n_lights,
        cap_deg=args.cap_deg,
        intensity_jitter=args.intensity_jitter,
        noise=args.noise,
        seed=_seed(args),
    )
    ds = synth_scene(spec)
    save_dataset(ds, args.out)
    print(json.dumps({"dataset": str(args.out), "n_images": ds.n, "n_pixels": int(ds.mask.sum())}))


# ---------------------------------------------------------------------------
# render


def cmd_render(args):
    normals = read_pfm(args.normals).astype(np.float64)
    mask = read_pfm(args.mask) > 0.5
    diffuse = read_pfm(args.albedo_d).astype(np.float64)
    lights = data.read_light_table(args.lights)
    if normals.ndim != 3 or normals.shape[:2] != mask.shape or diffuse.shape != mask.shape:
        raise PsInvertError("normals, albedo and mask sizes disagree")
    spec_sum = read_pfm(args.albedo_s).astype(np.float64) if args.albedo_s else np.zeros(mask.shape)
    n = data.core.normalize(normals[mask])
    m = shade(n, diffuse[mask], spec_sum[mask][:, None], lights.directions, lights.intensities,
              np.array([args.roughness]), np.ones(1))
    images = np.zeros((len(lights),) + mask.shape)
    images[:, mask] = m.T
    gt = np.zeros_like(normals)
    gt[mask] = n
    ds = data.PhotometricDataset(images, mask, [f"img_{j:03d}" for j in range(len(lights))], gt_lights=lights, gt_normals=gt)
    save_dataset(ds, args.out)
    print(json.dumps({"dataset": str(args.out), "n_images": ds.n}))


# ---------------------------------------------------------------------------
# reconstruct


_CONFIG_FLAGS = [f for f in dataclasses.fields(TrainConfig) if f.name not in ("seed", "light_init")]


def _config_from_args(args) -> TrainConfig:
    overrides = {}
    for f in _CONFIG_FLAGS:
        val = getattr(args, f.name)
        if val is not None:
            overrides[f.name] = val
    overrides["seed"] = str(_seed(args))
    if args.light_init is not None:
        overrides["light_init"] = args.light_init
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig.from_mapping(overrides)


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(os.environ.get("PSINVERT_SEED", 0))


def write_train_log(path, history):
    has_gt = history and history[0].normal_mae is not None
    has_light = history and history[0].dir_mae is not None
    with open(path, "w") as f:
        cols = ["epoch", "loss", "alpha"] + (["normal_mae"] if has_gt else []) + (["dir_mae", "int_err"] if has_light else [])
        f.write(",".join(cols) + "\n")
        for h in history:
            row = [str(h.epoch), _fmt(h.loss), _fmt(h.alpha)]
            if has_gt:
                row.append(_fmt(h.normal_mae))
            if has_light:
                row += [_fmt(h.dir_mae), _fmt(h.int_err)]
            f.write(",".join(row) + "\n")


def write_solution(sol: Solution, out: Path, mask):
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(sol.normals, out / "normal_est.pfm")
    write_pfm(sol.diffuse, out / "albedo_d.pfm")
    write_pfm(sol.specular.sum(axis=-1), out / "albedo_s_sum.pfm")
    write_pfm(mask.astype(np.float32), out / "mask.pfm")
    dirs, ints = sol.lights.directions, sol.lights.intensities
    (out / "lights_est.txt").write_text("".join("%.17g %.17g %.17g %.17g\n" % (*d, e) for d, e in zip(dirs, ints)))
    write_train_log(out / "train_log.csv", sol.history)
    save_checkpoint(out / "fields.ckpt", {
        "normals": sol.normals,
        "diffuse": sol.diffuse,
        "specular": sol.specular,
        "roughness": sol.bank.roughness,
        "light_dirs": sol.lights.raw_directions,
        "light_logint": sol.lights.log_intensities,
        **{f"param.{k}": v for k, v in sol.params.items()},
    })


def _render_fields(fields: dict, mask) -> np.ndarray:
    lights = LightTable(fields["light_dirs"], fields["light_logint"])
    normals, diffuse, specular = fields["normals"], fields["diffuse"], fields["specular"]
    out = np.zeros((len(lights),) + mask.shape)
    out[:, mask] = shade(normals[mask], diffuse[mask], specular[mask], lights.directions, lights.intensities,
                         fields["roughness"], np.ones(len(fields["roughness"]))).T
    return out


def _write_report(path, rep: metrics.EvalReport, config_echo, **extra):
    payload = rep.to_json(config_echo, **extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def cmd_reconstruct(args):
    cfg = _config_from_args(args)
    ds = load_dataset(args.dataset)
    out = Path(args.out)

    def progress(entry):
        parts = [f"epoch {entry.epoch + 1}/{cfg.epochs}", f"loss {entry.loss:.5f}", f"alpha {entry.alpha:.2f}"]
        if entry.normal_mae is not None:
            parts.append(f"normal {entry.normal_mae:.2f}deg")
        if entry.dir_mae is not None:
            parts.append(f"light {entry.dir_mae:.2f}deg")
        print(" | ".join(parts), file=sys.stderr, flush=True)

    sol = reconstruct(ds, cfg, progress=None if args.quiet else progress)
    write_solution(sol, out, ds.mask)
    rep = metrics.evaluate(sol.normals, sol.lights, ds, sol.render())
    payload = _write_report(
        out / "report.json", rep, cfg.as_dict(),
        initial_normal_mae_deg=sol.initial_normal_mae,
        initial_loss=sol.initial_loss,
        final_loss=sol.final_loss,
        skipped_iterations=sol.skipped,
    )
    _figures(out, sol.normals, ds, rep, sol.lights, sol.history)
    print(json.dumps({k: payload[k] for k in ("normal_mae_deg", "light_dir_mae_deg", "intensity_si_error", "psnr_db")}))


def _figures(out: Path, normals, ds, rep, lights, history=None):
    plotting.plot_normals(out / "normals.png", normals, ds.mask, ds.gt_normals, rep.error_map)
    if lights is not None:
        gt = ds.gt_lights.directions if ds.gt_lights is not None else None
        plotting.plot_lights(out / "lights.png", lights.directions, gt)
    if history:
        plotting.plot_training(out / "training.png", history)


# ---------------------------------------------------------------------------
# eval


_TRAINING_FIELDS = ("initial_normal_mae_deg", "initial_loss", "final_loss", "skipped_iterations")


def cmd_eval(args):
    est = Path(args.est)
    ds = load_dataset(args.gt)
    normals = read_pfm(est / "normal_est.pfm").astype(np.float64)
    if normals.shape[:2] != ds.mask.shape:
        raise PsInvertError("estimate and dataset sizes differ")
    nz = np.linalg.norm(normals, axis=-1) > 0
    normals[nz] = data.core.normalize(normals[nz])
    lights = data.read_light_table(est / "lights_est.txt") if (est / "lights_est.txt").exists() else None
    rendered = None
    if (est / "fields.ckpt").exists():
        rendered = _render_fields(load_checkpoint(est / "fields.ckpt"), ds.mask)
    rep = metrics.evaluate(normals, lights, ds, rendered)
    out = Path(args.out) if args.out else est
    out.mkdir(parents=True, exist_ok=True)
    echo, carried = {}, {}
    if (est / "report.json").exists():
        previous = json.loads((est / "report.json").read_text())
        echo = previous.get("config_echo", {})
        carried = {k: previous[k] for k in _TRAINING_FIELDS if k in previous}
    _write_report(out / "report.json", rep, echo, **carried)
    _figures(out, normals, ds, rep, lights)
    summary = " ".join(f"{k}={v:.4f}" if v is not None else f"{k}=na" for k, v in (
        ("normal_mae_deg", rep.normal_mae_deg), ("light_dir_mae_deg", rep.light_dir_mae_deg),
        ("intensity_si_error", rep.intensity_si_error), ("psnr_db", rep.psnr_db)))
    print(summary)


# ---------------------------------------------------------------------------
# gbr-probe


def cmd_gbr_probe(args):
    ds = load_dataset(args.dataset)
    if ds.scene is None:
        raise PsInvertError("gbr-probe needs a synthetic dataset (scene.json with full ground truth)")
    full = synth_scene(data.scene_from_dict(ds.scene), directions=ds.gt_lights.directions)
    b, s, rho_s, r, _, lit = gbr.scene_factors(full)
    size = args.grid_size
    grid = (np.linspace(*args.mu_range, size), np.linspace(*args.nu_range, size), np.geomspace(*args.lambda_range, size))
    res = gbr.gbr_grid_search(b, s, rho_s, r, ds.observations(), lit, grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.to_csv(out)
    plotting.plot_gbr_surface(out.with_suffix(".png"), res)
    best = res.best
    print(json.dumps({"mu": best.mu, "nu": best.nu, "lambda": best.lam, "loss": float(res.loss.min())}))


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    res = gradsuite.run(args.configs, _seed(args))
    pix = gradsuite.run(args.configs, _seed(args), case="render")
    worst = max(res.max_error, pix.max_error)
    print(json.dumps({"max_rel_error": worst, "checked": res.checked + pix.checked, "excluded": res.excluded + pix.excluded}))
    return 0 if worst < 1e-4 else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="psinvert", description=__doc__)
    p.add_argument("--threads", type=int, default=None, help="bound numeric worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--shape", default="sphere", choices=["sphere", "heightfield"])
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--radius", type=float, default=None)
    s.add_argument("--bump-amplitude", type=float, default=0.15)
    s.add_argument("--bump-frequency", type=float, default=1.5)
    s.add_argument("--material", default="uniform", choices=["uniform", "two-region", "textured-noise"])
    s.add_argument("--diffuse", type=float, default=0.5)
    s.add_argument("--specular", type=float, default=0.5)
    s.add_argument("--specular-bases", default="1", help="comma separated 1-based basis indices")
    s.add_argument("--k", type=int, default=12)
    s.add_argument("--r-t", type=float, default=300.0)
    s.add_argument("--r-b", type=float, default=10.0)
    s.add_argument("--n-lights", type=int, default=16)
    s.add_argument("--cap-deg", type=float, default=50.0)
    s.add_argument("--intensity-jitter", type=float, default=0.2)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("render", help="forward-render normals/albedo/lights into a dataset directory")
    r.add_argument("--normals", required=True)
    r.add_argument("--mask", required=True)
    r.add_argument("--albedo-d", required=True)
    r.add_argument("--albedo-s", default=None)
    r.add_argument("--roughness", type=float, default=-50.0)
    r.add_argument("--lights", required=True, help="'lx ly lz [e]' per line, or a dataset directory")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("reconstruct", help="jointly estimate normals, materials and lights")
    c.add_argument("dataset")
    c.add_argument("--out", required=True)
    c.add_argument("--config", default=None)
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--light-init", default=None, help="view-jitter:<deg> | file:<path> | gt-noise:<deg>")
    c.add_argument("--quiet", action="store_true")
    for f in _CONFIG_FLAGS:
        c.add_argument("--" + f.name.replace("_", "-"), default=None, dest=f.name)
    c.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="score an output directory against a dataset")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gbr-probe", help="brute-force GBR loss surface as CSV")
    g.add_argument("dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--grid-size", type=int, default=9)
    g.add_argument("--mu-range", type=float, nargs=2, default=(-1.0, 1.0))
    g.add_argument("--nu-range", type=float, nargs=2, default=(-1.0, 1.0))
    g.add_argument("--lambda-range", type=float, nargs=2, default=(0.5, 2.0))
    g.set_defaults(func=cmd_gbr_probe)

    k = sub.add_parser("gradcheck", help="autodiff vs central differences on random pipelines")
    k.add_argument("--configs", type=int, default=100)
    k.add_argument("--seed", type=int, default=None)
    k.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                return args.func(args) or 0
        return args.func(args) or 0
    except (PsInvertError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
