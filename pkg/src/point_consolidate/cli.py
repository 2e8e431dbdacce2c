"""Command-line surface: label, train, infer, consolidate, eval, fixture.

Every command is deterministic under a fixed --seed, fails with a nonzero
exit code on bad input, and writes a provenance sidecar next to each output.
A --config TOML/JSON file supplies defaults; explicit flags win.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from .cloud import PointCloud, curvature_proxy, density_proxy, estimate_normals
from .consolidate import ConsolidationRequest, consolidate
from .fixtures import FIXTURE_KINDS, make_fixture
from .io import (
    RunConfig,
    label_colors,
    read_mesh,
    read_point_cloud,
    write_mesh,
    write_point_cloud,
    write_provenance,
)
from .labeling import Criterion, PointLabels, label_cloud
from .metrics import (
    EvalReport,
    density_iqr,
    dist_to_surface,
    f_score,
    normal_error_sharp,
    sample_edges,
)
from .network import NetArchitecture, load_checkpoint, save_checkpoint
from .sampler import SamplerConfig
from .training import TrainConfig, train


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML or JSON config file (flags win)")
    parser.add_argument("--seed", type=int, default=None)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--criterion", choices=["sharp", "sparse", "uniform"])
    parser.add_argument("--labeling", choices=["auto", "threshold", "kmeans"], default="auto")
    parser.add_argument("--p-target", type=float, default=None)
    parser.add_argument("--p-source", type=float, default=None)
    parser.add_argument("--subset-frac", type=float, default=None)
    parser.add_argument("--iters", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)


def _config_from_args(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    flag_map = {
        "criterion": getattr(args, "criterion", None),
        "p_target": getattr(args, "p_target", None),
        "p_source": getattr(args, "p_source", None),
        "subset_fraction": getattr(args, "subset_frac", None),
        "iterations": getattr(args, "iters", None),
        "learning_rate": getattr(args, "lr", None),
        "out_points": getattr(args, "out_points", None),
        "tau": getattr(args, "tau", None),
        "seed": getattr(args, "seed", None),
        "input": getattr(args, "input", None),
        "output": getattr(args, "output", None),
        "checkpoint": getattr(args, "checkpoint", None),
    }
    return config.merged_with_flags(**flag_map)


def _compute_labels(
    cloud: PointCloud, criterion: str, config: RunConfig, mechanism: str
) -> PointLabels | None:
    if criterion == "uniform":
        return None
    if criterion == "sharp":
        normals = estimate_normals(cloud, config.normals_k).normals
        proxy = curvature_proxy(cloud, normals, config.curvature_k)
    else:
        proxy = density_proxy(cloud, config.density_k)
    return label_cloud(proxy, Criterion(criterion), mechanism, seed=config.seed)


def _train_model(cloud: PointCloud, config: RunConfig, mechanism: str):
    criterion = config.resolve_criterion(cloud.n)
    labels = _compute_labels(cloud, criterion, config, mechanism)
    sampler_config = SamplerConfig(
        p_source=config.p_source,
        p_target=config.p_target,
        subset_fraction=config.subset_fraction,
        seed=config.seed,
    )
    train_config = TrainConfig(
        learning_rate=config.learning_rate,
        iterations=config.iterations,
        seed=config.seed,
    )
    params, log = train(cloud, labels, sampler_config, train_config)
    return params, NetArchitecture(), log, criterion


def _consolidate_cloud(cloud: PointCloud, params, arch, config: RunConfig) -> PointCloud:
    sampler_config = SamplerConfig(
        p_source=config.p_source,
        p_target=config.p_target,
        subset_fraction=config.subset_fraction,
        seed=config.seed,
    )
    request = ConsolidationRequest(
        target_point_count=config.out_points,
        subset_size=sampler_config.subset_size(cloud.n),
        criterion=config.resolve_criterion(cloud.n),
        seed=config.seed,
    )
    return consolidate(cloud, params, arch, request)


def _report_out(report: EvalReport, args, config: RunConfig, command: str) -> None:
    text = report.to_json()
    print(text)
    if getattr(args, "output", None):
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
        write_provenance(args.output, command, config.to_dict())


def cmd_fixture(args) -> int:
    config = _config_from_args(args)
    seed = config.seed
    params = {}
    for key in ("n", "band_width", "density_ratio", "sigma_fraction", "n_side", "spacing", "angle_deg"):
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    fixture = make_fixture(args.kind, seed=seed, **params)
    write_point_cloud(fixture.cloud, args.output, fmt=args.format)
    write_provenance(
        args.output, "fixture", config.to_dict(), {"kind": args.kind, "params": params}
    )
    if args.mesh_output:
        if fixture.mesh is None:
            raise ValueError(f"fixture '{args.kind}' has no ground-truth mesh")
        write_mesh(fixture.mesh, args.mesh_output)
    print(f"wrote {fixture.cloud.n} points to {args.output}")
    return 0


def cmd_label(args) -> int:
    config = _config_from_args(args)
    cloud = read_point_cloud(config.input)
    criterion = config.resolve_criterion(cloud.n)
    if criterion == "uniform":
        raise ValueError("labeling requires --criterion sharp or sparse")
    labels = _compute_labels(cloud, criterion, config, args.labeling)
    write_point_cloud(cloud, config.output, fmt="binary", colors=label_colors(labels.positive))
    write_provenance(
        config.output,
        "label",
        config.to_dict(),
        {"positive_count": labels.positive_count, "n": labels.n},
    )
    frac = 100.0 * labels.positive_count / labels.n
    print(f"{labels.positive_count}/{labels.n} points positive ({frac:.1f}%), criterion {criterion}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    cloud = read_point_cloud(config.input)
    params, arch, log, criterion = _train_model(cloud, config, args.labeling)
    save_checkpoint(config.checkpoint, params, arch)
    log.to_csv(str(config.checkpoint) + ".train_log.csv")
    write_provenance(
        config.checkpoint,
        "train",
        config.to_dict(),
        {"criterion": criterion, "final_loss": log.losses[-1], "iterations": len(log)},
    )
    print(
        f"trained {len(log)} iterations (criterion {criterion}); "
        f"loss {log.losses[0]:.3e} -> {log.losses[-1]:.3e}"
    )
    return 0


def cmd_infer(args) -> int:
    config = _config_from_args(args)
    cloud = read_point_cloud(config.input)
    params, arch = load_checkpoint(config.checkpoint)
    output = _consolidate_cloud(cloud, params, arch, config)
    write_point_cloud(output, config.output, fmt="binary")
    write_provenance(config.output, "infer", config.to_dict())
    print(f"wrote {output.n} consolidated points to {config.output}")
    return 0


def cmd_consolidate(args) -> int:
    config = _config_from_args(args)
    cloud = read_point_cloud(config.input)
    params, arch, log, criterion = _train_model(cloud, config, args.labeling)
    if config.checkpoint:
        save_checkpoint(config.checkpoint, params, arch)
        log.to_csv(str(config.checkpoint) + ".train_log.csv")
        write_provenance(config.checkpoint, "consolidate", config.to_dict())
    output = _consolidate_cloud(cloud, params, arch, config)
    write_point_cloud(output, config.output, fmt="binary")
    write_provenance(
        config.output,
        "consolidate",
        config.to_dict(),
        {"criterion": criterion, "final_loss": log.losses[-1]},
    )
    print(f"wrote {output.n} consolidated points to {config.output}")
    return 0


def _resolve_tau(config: RunConfig, mesh) -> float:
    return config.tau if config.tau is not None else 0.01 * mesh.bbox_diagonal


def cmd_eval_fscore(args) -> int:
    config = _config_from_args(args)
    predicted = read_point_cloud(config.input)
    mesh = read_mesh(args.gt_mesh)
    tau = _resolve_tau(config, mesh)
    gt = sample_edges(
        mesh,
        n_samples=args.gt_samples,
        dihedral_threshold_deg=args.dihedral_threshold,
        seed=config.seed,
    )
    precision, recall, score = f_score(predicted, gt, tau)
    report = EvalReport(
        tau=tau,
        precision=precision,
        recall=recall,
        f_score=score,
        params={
            "gt_mesh": args.gt_mesh,
            "gt_samples": args.gt_samples,
            "dihedral_threshold_deg": args.dihedral_threshold,
            "seed": config.seed,
        },
    )
    _report_out(report, args, config, "eval fscore")
    return 0


def cmd_eval_density(args) -> int:
    config = _config_from_args(args)
    cloud = read_point_cloud(config.input)
    report = EvalReport(
        density_iqr=density_iqr(cloud, k=config.density_k),
        params={"k": config.density_k},
    )
    _report_out(report, args, config, "eval density")
    return 0


def cmd_eval_normals(args) -> int:
    config = _config_from_args(args)
    cloud = read_point_cloud(config.input)
    mesh = read_mesh(args.gt_mesh)
    tau = _resolve_tau(config, mesh)
    if cloud.normals is None:
        cloud = cloud.with_normals(estimate_normals(cloud, config.normals_k).normals)
    median = normal_error_sharp(cloud, mesh, tau, args.dihedral_threshold)
    report = EvalReport(
        tau=tau,
        normal_error_median_deg=median,
        params={
            "gt_mesh": args.gt_mesh,
            "normals_k": config.normals_k,
            "dihedral_threshold_deg": args.dihedral_threshold,
        },
    )
    _report_out(report, args, config, "eval normals")
    return 0


def cmd_eval_surface_dist(args) -> int:
    config = _config_from_args(args)
    cloud = read_point_cloud(config.input)
    mesh = read_mesh(args.gt_mesh)
    per_point, mean = dist_to_surface(cloud, mesh)
    report = EvalReport(
        mean_dist_to_surface=mean,
        params={
            "gt_mesh": args.gt_mesh,
            "max_dist": float(per_point.max()),
            "median_dist": float(np.median(per_point)),
        },
    )
    _report_out(report, args, config, "eval surface-dist")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="point-consolidate",
        description="Self-supervised point cloud consolidation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="generate a synthetic test cloud")
    p.add_argument("--kind", choices=FIXTURE_KINDS, required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mesh-output")
    p.add_argument("--format", choices=["binary", "ascii", "xyz"], default="binary")
    p.add_argument("--n", type=int)
    p.add_argument("--band-width", dest="band_width", type=float)
    p.add_argument("--density-ratio", dest="density_ratio", type=float)
    p.add_argument("--sigma-fraction", dest="sigma_fraction", type=float)
    p.add_argument("--n-side", dest="n_side", type=int)
    p.add_argument("--spacing", type=float)
    p.add_argument("--angle-deg", dest="angle_deg", type=float)
    _add_common_flags(p)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("label", help="color a cloud by positive/negative label")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    _add_train_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train a displacement network")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    _add_train_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="consolidate using a trained checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--out-points", dest="out_points", type=int)
    p.add_argument("--subset-frac", dest="subset_frac", type=float)
    _add_common_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("consolidate", help="train and consolidate in one shot")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out-points", dest="out_points", type=int)
    _add_train_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_consolidate)

    p = sub.add_parser("eval", help="evaluation metrics")
    esub = p.add_subparsers(dest="metric", required=True)

    e = esub.add_parser("fscore", help="edge F-score against a GT mesh")
    e.add_argument("--input", required=True)
    e.add_argument("--gt-mesh", required=True)
    e.add_argument("--tau", type=float)
    e.add_argument("--gt-samples", type=int, default=20_000)
    e.add_argument("--dihedral-threshold", type=float, default=120.0)
    e.add_argument("--output")
    _add_common_flags(e)
    e.set_defaults(func=cmd_eval_fscore)

    e = esub.add_parser("density", help="density 25-75 percentile range")
    e.add_argument("--input", required=True)
    e.add_argument("--output")
    _add_common_flags(e)
    e.set_defaults(func=cmd_eval_density)

    e = esub.add_parser("normals", help="median normal error in sharp regions")
    e.add_argument("--input", required=True)
    e.add_argument("--gt-mesh", required=True)
    e.add_argument("--tau", type=float)
    e.add_argument("--dihedral-threshold", type=float, default=120.0)
    e.add_argument("--output")
    _add_common_flags(e)
    e.set_defaults(func=cmd_eval_normals)

    e = esub.add_parser("surface-dist", help="mean point-to-mesh distance")
    e.add_argument("--input", required=True)
    e.add_argument("--gt-mesh", required=True)
    e.add_argument("--output")
    _add_common_flags(e)
    e.set_defaults(func=cmd_eval_surface_dist)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
