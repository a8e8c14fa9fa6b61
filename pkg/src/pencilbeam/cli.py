"""Command-line entry point; every subcommand writes CSV (and PBG1 or a manifest where relevant)."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import harness
from .ballistic import ballistic_point_pairing
from .geom_sphere import north_pole
from .io import dump_json, field_to_pbg1, histogram_to_pbg1
from .kernels import MediumProfile, ScatteringParams
from .measures import PhaseSpaceMeasure
from .pencil_beam import AxisProfiles, GridTooCoarse, SliceGrid, SupportClipped, fundamental_J
from .rte_mc import PointSource, simulate
from .superposition import BudgetInfeasible, simple_approx, write_atoms_csv
from .wasserstein import MetricSpec, w1_kappa, write_w1_csv


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


@click.group()
def main():
    """Pencil-beam transport toolkit."""


@main.command("solve-beam")
@click.option("--d", type=int, default=2, show_default=True)
@click.option("--s", type=float, default=0.75, show_default=True)
@click.option("--sigma", type=float, default=1.0, show_default=True)
@click.option("--lam", type=float, default=0.0, show_default=True)
@click.option("--depths", default="0.5,1,2,4", show_default=True, help="comma-separated depths")
@click.option("--nx", type=int, default=512, show_default=True)
@click.option("--nv", type=int, default=256, show_default=True)
@click.option("--half-x", type=float, default=8.0, show_default=True)
@click.option("--half-v", type=float, default=10.0, show_default=True)
@click.option("--out", type=click.Path(), default="beam", show_default=True, help="output prefix")
def solve_beam(d, s, sigma, lam, depths, nx, nv, half_x, half_v, out):
    """Fundamental solution on a grid: PBG1 slices plus a CSV of slice masses."""
    grid = SliceGrid.from_extent(d - 1, nx, nv, half_x, half_v)
    try:
        field = fundamental_J(_floats(depths), grid, AxisProfiles.constant(sigma, lam), s, d)
    except (GridTooCoarse, SupportClipped) as exc:
        raise click.ClickException(str(exc))
    field_to_pbg1(f"{out}.pbg1", field)
    with open(f"{out}.csv", "w") as fh:
        fh.write("slice,depth,mass,lambda\n")
        for k, sl in enumerate(field.slices):
            fh.write(f"{k},{sl.depth!r},{sl.mass!r},{sl.lam_factor!r}\n")
    click.echo(f"wrote {out}.pbg1 and {out}.csv")


@main.command("ballistic")
@click.option("--d", type=int, default=3, show_default=True)
@click.option("--lam", type=float, default=1.0, show_default=True)
@click.option("--kappa", default="1,2,4", show_default=True)
@click.option("--out", type=click.Path(), default="ballistic.csv", show_default=True)
def ballistic_cmd(d, lam, kappa, out):
    """Pairings of the on-axis point-source ballistic solution with exp(-kappa |x|)."""
    pole = north_pole(d)
    with open(out, "w") as fh:
        fh.write("kappa,pairing\n")
        for k in _floats(kappa):
            val = ballistic_point_pairing(lambda x, th: float(np.exp(-k * np.linalg.norm(x))), lambda x: lam,
                                          np.zeros(d), pole, lam)
            fh.write(f"{k!r},{val!r}\n")
    click.echo(f"wrote {out}")


@main.command("mc-rte")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--g", type=float, required=True)
@click.option("--out", type=click.Path(), default="mc", show_default=True, help="output directory")
def mc_rte(config_path, g, out):
    """One Monte Carlo run on the convergence-study window of a config file."""
    try:
        cfg = harness.StudyConfig.load(config_path)
    except harness.ConfigError as exc:
        raise click.ClickException(str(exc))
    spec = harness.convergence_spec(cfg)
    params = ScatteringParams.narrow_beam(g, cfg.s, cfg.m, cfg.mc_eps, cfg.d)
    res = simulate(PointSource(np.zeros(cfg.d), north_pole(cfg.d)), cfg.medium(), params, cfg.mc_particles, spec,
                   cfg.seed, n_batches=cfg.mc_batches)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    histogram_to_pbg1(outdir / "histogram.pbg1", res)
    res.compressed().to_csv(outdir / "atoms.csv")
    dump_json(outdir / "manifest.json", {"config": asdict(cfg), "g": g, "delta": params.delta,
                                        "outside_mass": res.meta["outside_mass"], "collisions": res.meta["collisions"]})
    click.echo(f"wrote {outdir}")


@main.command("w1")
@click.argument("mu_csv", type=click.Path(exists=True))
@click.argument("nu_csv", type=click.Path(exists=True))
@click.option("--kappa", default="1", show_default=True)
@click.option("--angular", type=click.Choice(["geodesic", "chord"]), default="geodesic", show_default=True)
@click.option("--combine", type=click.Choice(["sum", "l2"]), default="sum", show_default=True)
@click.option("--out", type=click.Path(), default="w1.csv", show_default=True)
def w1_cmd(mu_csv, nu_csv, kappa, angular, combine, out):
    """W1_kappa between two atom lists (CSV: weight, x..., theta...)."""
    mu = PhaseSpaceMeasure.from_csv(mu_csv)
    nu = PhaseSpaceMeasure.from_csv(nu_csv)
    rows = []
    for k in _floats(kappa):
        r = w1_kappa(mu, nu, MetricSpec(kappa=k, angular=angular, combine=combine))
        rows.append({"kappa": k, "value": r.value, "dual_gap": r.dual_gap, "dropped_mass": r.dropped_mass,
                     "metric_choice": f"{combine}:{angular}"})
    write_w1_csv(out, rows)
    click.echo(f"wrote {out}")


@main.command("superpose")
@click.option("--eps", type=float, required=True)
@click.option("--kappa", type=float, default=1.0, show_default=True)
@click.option("--x-half", type=float, default=0.5, show_default=True)
@click.option("--angle", type=float, default=0.4, show_default=True, help="source half-angle about the pole")
@click.option("--d", type=int, default=2, show_default=True)
@click.option("--out", type=click.Path(), default="atoms.csv", show_default=True)
def superpose(eps, kappa, x_half, angle, d, out):
    """Simple-function atoms of a smooth bump source and the reported W1 bound."""
    def bump(x, th):
        r2 = np.sum(x**2, axis=1) / x_half**2
        a = np.arccos(np.clip(th[:, -1], -1, 1)) / angle
        return np.where((r2 < 1) & (a < 1), np.cos(np.pi / 2 * np.sqrt(r2)) ** 2 * np.cos(np.pi / 2 * a) ** 2, 0.0)

    try:
        res = simple_approx(bump, eps, kappa, [-x_half] * d, [x_half] * d, float(np.tan(angle / 2)))
    except BudgetInfeasible as exc:
        raise click.ClickException(str(exc))
    write_atoms_csv(out, res.atoms)
    click.echo(json.dumps({"atoms": len(res.atoms), "l1_error": res.l1_error, "bound": res.bound,
                           "constant": res.constant}))


def _study(config_path, out, which):
    try:
        cfg = harness.StudyConfig() if config_path is None else harness.StudyConfig.load(config_path)
        results, manifest = harness.run_study(cfg, (which,), out)
    except harness.ConfigError as exc:
        raise click.ClickException(str(exc))
    click.echo(json.dumps(results[which].summary, default=str))
    click.echo(f"manifest: {manifest}")


@main.command("scaling-study")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON config or a manifest.json from an earlier run")
@click.option("--out", type=click.Path(), default=None)
def scaling_study(config_path, out):
    """Ballistic vs beam W1_kappa over the (eps, kappa) ladders with a slope fit."""
    _study(config_path, out, "scaling")


@main.command("convergence-study")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON config or a manifest.json from an earlier run")
@click.option("--out", type=click.Path(), default=None)
def convergence_study(config_path, out):
    """Monte Carlo u^g vs the beam approximation along the g ladder."""
    _study(config_path, out, "convergence")


if __name__ == "__main__":
    main()
