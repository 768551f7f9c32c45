"""trailgraph command-line interface.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error. Data goes to
--out files or stdout; diagnostics go to stderr. `--json` turns stdout into a
single machine-readable run report.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import assembly, dataset, io, metrics, nms, synthetic, viz
from .core import (
    ExtractionConfig,
    FormatError,
    PatchLayout,
    PromptPoint,
    Raster,
    RoadGraph,
    ValidationError,
)
from .features import extract_edge_features, pair_candidates
from .head import TrainBatch, init_weights, score_edges, train


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


class RunReport:
    def __init__(self, subcommand: str, config: dict):
        self.subcommand = subcommand
        self.config = config
        self.timings: dict[str, float] = {}
        self.outputs: list[str] = []
        self.results: dict = {}
        self._t0 = time.perf_counter()
        self._mark = self._t0

    def stage(self, name: str) -> None:
        now = time.perf_counter()
        self.timings[name] = round(now - self._mark, 6)
        self._mark = now

    def to_dict(self) -> dict:
        self.timings["total_s"] = round(time.perf_counter() - self._t0, 6)
        return {
            "subcommand": self.subcommand,
            "config": self.config,
            "timings": self.timings,
            "outputs": self.outputs,
            "results": self.results,
        }

    def emit(self, args, human_lines: list[str]) -> None:
        if getattr(args, "json", False):
            print(json.dumps(self.to_dict(), indent=1))
        else:
            for line in human_lines:
                print(line)


def _load_config(args) -> ExtractionConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            base = json.load(f)
    overrides = {
        "nms_radius": getattr(args, "nms_radius", None),
        "pair_radius": getattr(args, "pair_radius", None),
        "mask_threshold": getattr(args, "mask_threshold", None),
        "edge_threshold": getattr(args, "edge_threshold", None),
        "k_max": getattr(args, "k_max", None),
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "kernels", None):
        base["pool_kernels"] = [int(k) for k in args.kernels.split(",")]
    return ExtractionConfig.from_dict(base)


def _read_prompts(path: str) -> list[PromptPoint]:
    with open(path) as f:
        doc = json.load(f)
    return [PromptPoint(float(x), float(y), pol) for x, y, pol in doc["prompts"]]


def _write_prompts(prompts: list[PromptPoint], path: str) -> None:
    with open(path, "w") as f:
        json.dump({"prompts": [[p.x, p.y, p.polarity] for p in prompts]}, f)
        f.write("\n")


def cmd_nms(args) -> RunReport:
    report = RunReport("nms", {"radius": args.radius, "threshold": args.threshold})
    kp = io.read_raster(args.keypoints)
    road = io.read_raster(args.road)
    report.stage("read_s")
    candidates = nms.mask_to_candidates(kp, args.threshold, "keypoint")
    candidates += nms.mask_to_candidates(road, args.threshold, "road")
    vertices = nms.unified_nms(candidates, args.radius)
    report.stage("nms_s")
    graph = RoadGraph.make(vertices, [])
    io.write_graph(graph, args.out)
    report.outputs.append(args.out)
    report.stage("write_s")
    report.results = {"candidates": len(candidates), "vertices": len(vertices)}
    return report


def cmd_bench_nms(args) -> RunReport:
    report = RunReport("bench-nms", {"n": args.n, "seed": args.seed, "radius": args.radius})
    unified_ms, legacy_ms = nms.bench_nms(args.n, args.seed, args.radius)
    report.stage("bench_s")
    report.results = {
        "unified_ms": round(unified_ms, 3),
        "legacy_ms": round(legacy_ms, 3),
        "speedup": round(legacy_ms / unified_ms, 3) if unified_ms > 0 else None,
    }
    return report


def cmd_features(args) -> RunReport:
    config = _load_config(args)
    report = RunReport("features", config.to_dict())
    road = io.read_raster(args.road)
    graph = io.read_graph(args.vertices)
    report.stage("read_s")
    vertices = list(graph.vertices)
    pairs = pair_candidates(vertices, config.pair_radius, config.k_max)
    edges = extract_edge_features(
        road, vertices, pairs, config.pool_kernels, config.pair_radius,
        config.num_samples, config.temperature,
    )
    report.stage("features_s")
    doc = {
        "pairs": [[e.src, e.dst] for e in edges],
        "f_geo": [e.f_geo.tolist() for e in edges],
        "f_path": [e.f_path.tolist() for e in edges],
    }
    with open(args.out, "w") as f:
        json.dump(doc, f)
    report.outputs.append(args.out)
    report.stage("write_s")
    report.results = {"edges": len(edges)}
    return report


def _read_batches(edges_path: str, labels_path: str | None) -> list[TrainBatch]:
    with open(edges_path) as f:
        doc = json.load(f)
    label_doc = None
    if labels_path:
        with open(labels_path) as f:
            label_doc = json.load(f)["labels"]
    batches = []
    for k, b in enumerate(doc["batches"]):
        labels = label_doc[k] if label_doc is not None else b["labels"]
        batches.append(
            TrainBatch(
                np.asarray(b["features"], dtype=np.float64),
                [tuple(g) for g in b["groups"]],
                np.asarray(labels, dtype=np.float64),
            )
        )
    return batches


def cmd_train_head(args) -> RunReport:
    report = RunReport(
        "train-head",
        {"epochs": args.epochs, "lr": args.lr, "seed": args.seed,
         "hidden_dim": args.hidden_dim, "heads": args.heads},
    )
    batches = _read_batches(args.edges, args.labels)
    report.stage("read_s")
    weights = init_weights(args.seed, args.hidden_dim, args.heads)
    weights, curve = train(weights, batches, lr=args.lr, epochs=args.epochs)
    report.stage("train_s")
    io.write_weights(weights, args.out)
    report.outputs.append(args.out)
    if args.curve_out:
        with open(args.curve_out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "mean_bce"])
            for e, v in enumerate(curve, start=1):
                w.writerow([e, f"{v:.8f}"])
        report.outputs.append(args.curve_out)
    if args.figure:
        viz.save_loss_curve(args.figure, curve)
        report.outputs.append(args.figure)
    report.stage("write_s")
    report.results = {
        "batches": len(batches),
        "final_loss": curve[-1] if curve else None,
    }
    return report


def cmd_score(args) -> RunReport:
    config = _load_config(args)
    report = RunReport("score", config.to_dict())
    weights = io.read_weights(args.weights)
    road = io.read_raster(args.road)
    graph = io.read_graph(args.vertices)
    report.stage("read_s")
    vertices = list(graph.vertices)
    pairs = pair_candidates(vertices, config.pair_radius, config.k_max)
    scored = score_edges(weights, road, vertices, pairs, config)
    report.stage("score_s")
    with open(args.out, "w") as f:
        json.dump({"edges": [{"src": e.src, "dst": e.dst, "score": e.score} for e in scored]}, f)
    report.outputs.append(args.out)
    report.stage("write_s")
    report.results = {"scored": len(scored)}
    return report


def cmd_extract(args) -> RunReport:
    config = _load_config(args)
    report = RunReport("extract", config.to_dict())
    road = io.read_raster(args.road)
    kp = io.read_raster(args.keypoints)
    weights = io.read_weights(args.weights)
    report.stage("read_s")
    graph = assembly.extract_graph(road, kp, weights, config)
    report.stage("extract_s")
    io.write_graph(graph, args.out)
    report.outputs.append(args.out)
    if args.figure:
        viz.save_graph_figure(args.figure, graph, background=road, title="extracted graph")
        report.outputs.append(args.figure)
    report.stage("write_s")
    report.results = {"vertices": graph.num_vertices, "edges": graph.num_edges}
    return report


def cmd_extract_tiled(args) -> RunReport:
    config = _load_config(args)
    w, h, patch, stride = (int(v) for v in args.layout)
    report = RunReport("extract-tiled", {**config.to_dict(), "layout": [w, h, patch, stride]})
    layout = PatchLayout(w, h, patch, stride)
    provider = assembly.TileDirectoryProvider(args.tiles, patch=patch)
    weights = io.read_weights(args.weights)
    prompts = _read_prompts(args.prompts) if args.prompts else None
    report.stage("read_s")
    graph = assembly.extract_graph_tiled(
        provider, layout, weights, config,
        prompts=prompts, full_coverage=args.full_coverage or prompts is None,
        threads=args.threads,
    )
    report.stage("extract_s")
    io.write_graph(graph, args.out)
    report.outputs.append(args.out)
    report.stage("write_s")
    report.results = {"vertices": graph.num_vertices, "edges": graph.num_edges}
    return report


def cmd_eval(args) -> RunReport:
    want_apls = args.apls or not (args.apls or args.topo)
    want_topo = args.topo or not (args.apls or args.topo)
    params = {
        "apls": want_apls, "topo": want_topo, "n_pairs": args.n_pairs, "seed": args.seed,
        "snap_radius": args.snap_radius, "match_radius": args.match_radius,
        "interval": args.interval,
    }
    report = RunReport("eval", params)
    gt = io.read_graph(args.gt)
    prop = io.read_graph(args.prop)
    report.stage("read_s")
    results: dict = {}
    if want_apls:
        results["apls"] = metrics.apls(gt, prop, args.n_pairs, args.seed, args.snap_radius)
    if want_topo:
        t = metrics.topo(gt, prop, args.match_radius, args.interval)
        results["topo"] = {
            "precision": t.precision, "recall": t.recall, "f1": t.f1,
            "matched": t.matched, "gt_points": t.gt_total, "prop_points": t.prop_total,
        }
    report.stage("eval_s")
    report.results = results
    if args.json_out:
        with open(args.json_out, "w") as f:
            json.dump({"params": params, "results": results}, f, indent=1)
        report.outputs.append(args.json_out)
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as f:
            w = csv.writer(f)
            header, row = [], []
            if want_apls:
                header.append("apls")
                row.append(f"{results['apls']:.6f}")
            if want_topo:
                header += ["topo_precision", "topo_recall", "topo_f1"]
                row += [f"{results['topo'][k]:.6f}" for k in ("precision", "recall", "f1")]
            w.writerow(header)
            w.writerow(row)
        report.outputs.append(args.csv_out)
    if args.figures_dir:
        figdir = Path(args.figures_dir)
        figdir.mkdir(parents=True, exist_ok=True)
        fig = figdir / "graphs_overlay.png"
        viz.save_graph_figure(fig, prop, reference=gt, title="proposal vs reference")
        report.outputs.append(str(fig))
    report.stage("write_s")
    return report


def cmd_partition(args) -> RunReport:
    params = {
        "width": args.width, "height": args.height, "patch": args.patch,
        "tau_density": args.tau_density, "tau_sim": args.tau_sim,
    }
    report = RunReport("partition", params)
    gt = io.read_graph(args.graph)
    report.stage("read_s")
    selected, decisions = dataset.partition(
        args.width, args.height, gt,
        tau_density=args.tau_density, tau_sim=args.tau_sim,
        patch=args.patch, dense_stride=args.dense_stride,
    )
    report.stage("partition_s")
    manifest = {
        "params": params,
        "selected": [
            {"origin": list(s.origin), "set": s.source_set, "density": s.density,
             "vertices": s.graph.num_vertices, "edges": s.graph.num_edges}
            for s in selected
        ],
        "report": decisions,
    }
    with open(args.manifest, "w") as f:
        json.dump(manifest, f, indent=1)
    report.outputs.append(args.manifest)
    report.stage("write_s")
    report.results = {"selected": len(selected), "candidates": len(decisions)}
    return report


def cmd_simulate_prompts(args) -> RunReport:
    params = {
        "seed": args.seed, "patch_size": args.patch_size, "n_pos": args.n_pos,
        "ratio": args.ratio, "dist_min": args.dist_min, "jitter_sigma": args.jitter_sigma,
    }
    report = RunReport("simulate-prompts", params)
    gt = io.read_graph(args.graph)
    report.stage("read_s")
    prompts = dataset.simulate_prompts(
        gt, args.patch_size, n_pos=args.n_pos, ratio=args.ratio,
        dist_min=args.dist_min, jitter_sigma=args.jitter_sigma, seed=args.seed,
    )
    report.stage("simulate_s")
    _write_prompts(prompts, args.out)
    report.outputs.append(args.out)
    report.stage("write_s")
    report.results = {
        "positives": sum(1 for p in prompts if p.positive),
        "negatives": sum(1 for p in prompts if not p.positive),
    }
    return report


def cmd_synth(args) -> RunReport:
    with open(args.spec) as f:
        spec_doc = json.load(f)
    report = RunReport("synth", {**spec_doc, "count": args.count})
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    batches_doc = {"batches": []}
    for k in range(args.count):
        spec = synthetic.SceneSpec(**{**spec_doc, "seed": int(spec_doc.get("seed", 0)) + k})
        scene = synthetic.make_scene(spec)
        sub = outdir if args.count == 1 else outdir / f"scene_{k:03d}"
        sub.mkdir(exist_ok=True)
        io.write_raster(scene.road, sub / "road.rpm")
        io.write_raster(scene.kp, sub / "kp.rpm")
        io.write_graph(scene.gt, sub / "gt.json")
        report.outputs += [str(sub / "road.rpm"), str(sub / "kp.rpm"), str(sub / "gt.json")]
        if args.emit_edges:
            batch = synthetic.make_edge_dataset(1, spec)[0]
            batches_doc["batches"].append({
                "features": batch.features.tolist(),
                "groups": [list(g) for g in batch.groups],
                "labels": batch.labels.tolist(),
            })
    if args.emit_edges:
        with open(outdir / "train.json", "w") as f:
            json.dump(batches_doc, f)
        report.outputs.append(str(outdir / "train.json"))
    report.stage("synth_s")
    report.results = {"scenes": args.count}
    return report


def cmd_convert(args) -> RunReport:
    report = RunReport("convert", {"in": args.infile, "out": args.out})
    src, dst = Path(args.infile), Path(args.out)
    if src.suffix == ".rpm" and dst.suffix == ".npy":
        np.save(dst, io.read_raster(src).data)
    elif src.suffix == ".npy" and dst.suffix == ".rpm":
        io.write_raster(Raster(np.load(src)), dst)
    elif src.suffix == ".rpm" and dst.suffix == ".png":
        viz.save_mask_figure(dst, io.read_raster(src))
    elif src.suffix == ".json" and dst.suffix == ".csv":
        graph = io.read_graph(src)
        pos = graph.positions()
        with open(dst, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["src", "dst", "x0", "y0", "x1", "y1", "length"])
            for i, j in graph.edges:
                w.writerow([i, j, pos[i, 0], pos[i, 1], pos[j, 0], pos[j, 1],
                            f"{float(np.hypot(*(pos[i] - pos[j]))):.4f}"])
    else:
        raise ValidationError(
            f"unsupported conversion {src.suffix} -> {dst.suffix} "
            "(supported: .rpm->.npy, .npy->.rpm, .rpm->.png, .json->.csv)"
        )
    report.outputs.append(str(dst))
    report.stage("convert_s")
    return report


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    addr = args.addr or os.environ.get("TRAILGRAPH_ADDR", "127.0.0.1:8008")
    host, _, port = addr.rpartition(":")
    app = create_app(default_weights_path=args.weights)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
    return 0


def build_parser() -> CliParser:
    parser = CliParser(prog="trailgraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, seed=False):
        p.add_argument("--json", action="store_true", help="machine-readable run report on stdout")
        if config:
            p.add_argument("--config", help="JSON file mirroring the extraction config")
            p.add_argument("--nms-radius", type=float, dest="nms_radius")
            p.add_argument("--pair-radius", type=float, dest="pair_radius")
            p.add_argument("--mask-threshold", type=float, dest="mask_threshold")
            p.add_argument("--edge-threshold", type=float, dest="edge_threshold")
            p.add_argument("--k-max", type=int, dest="k_max")
            p.add_argument("--kernels", help="comma-separated pooling kernels, e.g. 3,9,15")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("nms", help="extract vertices from keypoint+road masks")
    p.add_argument("--keypoints", required=True)
    p.add_argument("--road", required=True)
    p.add_argument("--radius", type=float, default=8.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("bench-nms", help="time unified vs three-pass NMS")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--radius", type=float, default=8.0)
    common(p, seed=True)
    p.set_defaults(func=cmd_bench_nms)

    p = sub.add_parser("features", help="emit per-edge geometric and path features")
    p.add_argument("--road", required=True)
    p.add_argument("--vertices", required=True)
    p.add_argument("--out", required=True)
    common(p, config=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-head", help="train the edge-scoring head")
    p.add_argument("--edges", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden-dim", type=int, default=256, dest="hidden_dim")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--curve-out", dest="curve_out", help="per-epoch loss CSV")
    p.add_argument("--figure", help="loss-curve PNG")
    common(p, seed=True)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("score", help="score candidate edges with trained weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--road", required=True)
    p.add_argument("--vertices", required=True)
    p.add_argument("--out", required=True)
    common(p, config=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("extract", help="masks to graph, single patch")
    p.add_argument("--road", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--figure", help="overlay figure PNG")
    common(p, config=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("extract-tiled", help="tiled extraction from a tile directory")
    p.add_argument("--tiles", required=True)
    p.add_argument("--layout", nargs=4, metavar=("W", "H", "PATCH", "STRIDE"), required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prompts", help="prompts JSON; omit for full coverage")
    p.add_argument("--full-coverage", action="store_true", dest="full_coverage")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common(p, config=True)
    p.set_defaults(func=cmd_extract_tiled)

    p = sub.add_parser("eval", help="APLS / TOPO metrics between two graphs")
    p.add_argument("--gt", required=True)
    p.add_argument("--prop", required=True)
    p.add_argument("--apls", action="store_true")
    p.add_argument("--topo", action="store_true")
    p.add_argument("--n-pairs", type=int, default=metrics.DEFAULT_N_PAIRS, dest="n_pairs")
    p.add_argument("--snap-radius", type=float, default=metrics.DEFAULT_SNAP_RADIUS, dest="snap_radius")
    p.add_argument("--match-radius", type=float, default=metrics.DEFAULT_MATCH_RADIUS, dest="match_radius")
    p.add_argument("--interval", type=float, default=metrics.DEFAULT_INTERVAL)
    p.add_argument("--json-out", dest="json_out")
    p.add_argument("--csv-out", dest="csv_out")
    p.add_argument("--figures-dir", dest="figures_dir")
    common(p, seed=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("partition", help="generate-filter-select patch curation")
    p.add_argument("--graph", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--patch", type=int, default=1024)
    p.add_argument("--dense-stride", type=int, default=256, dest="dense_stride")
    p.add_argument("--tau-density", type=float, default=1e-4, dest="tau_density")
    p.add_argument("--tau-sim", type=float, default=0.95, dest="tau_sim")
    p.add_argument("--manifest", required=True)
    common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("simulate-prompts", help="simulated clicks from a GT graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=1024, dest="patch_size")
    p.add_argument("--n-pos", type=int, default=10, dest="n_pos")
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--dist-min", type=float, default=50.0, dest="dist_min")
    p.add_argument("--jitter-sigma", type=float, default=3.0, dest="jitter_sigma")
    common(p, seed=True)
    p.set_defaults(func=cmd_simulate_prompts)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--emit-edges", action="store_true", dest="emit_edges",
                   help="also write a train.json edge dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="raster/graph format utilities")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("serve", help="run the annotation service")
    p.add_argument("--addr", help="host:port (default TRAILGRAPH_ADDR or 127.0.0.1:8008)")
    p.add_argument("--weights", help="default weights for auto-run")
    p.set_defaults(func=cmd_serve)

    return parser


def _human_lines(report: RunReport) -> list[str]:
    lines = [f"{report.subcommand}: done"]
    for k, v in report.results.items():
        if isinstance(v, float):
            lines.append(f"  {k} = {v:.4f}")
        elif isinstance(v, dict):
            inner = ", ".join(f"{kk}={vv:.4f}" if isinstance(vv, float) else f"{kk}={vv}"
                              for kk, vv in v.items())
            lines.append(f"  {k}: {inner}")
        else:
            lines.append(f"  {k} = {v}")
    for path in report.outputs:
        lines.append(f"  wrote {path}")
    return lines


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        result = args.func(args)
    except (ValidationError, FormatError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except OSError as e:
        name = getattr(e, "filename", None)
        sys.stderr.write(f"i/o error: {e}" + (f" (path: {name})\n" if name else "\n"))
        return 2
    if isinstance(result, RunReport):
        result.emit(args, _human_lines(result))
        return 0
    return int(result or 0)


if __name__ == "__main__":
    raise SystemExit(main())
