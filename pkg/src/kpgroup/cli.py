"""Command-line interface.  Orchestration only: every subcommand is a thin
composition of library calls, deterministic given identical inputs.

Exit codes: 0 success, 1 validation/usage error, 2 I/O or file-format error.
Set KPG_LOG=DEBUG|INFO|WARNING to control log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import budget as budget_mod
from . import cluster as cluster_mod
from . import decode as decode_mod
from . import dissim as dissim_mod
from . import metrics as metrics_mod
from . import synth as synth_mod
from .errors import FormatError, ValidationError
from .ingest import (
    HEAD_NAMES,
    read_annotations,
    read_manifest,
    read_tensor,
    write_manifest,
    write_tensor,
)
from .schema import (
    Grouping,
    check_grouping,
    load_grouping,
    load_schema,
    save_grouping,
)

log = logging.getLogger("kpgroup")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="kpgroup", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)

    p = sub.add_parser("group",
                       help="cluster keypoint types and write a grouping file")
    p.add_argument("--schema", required=True, help="schema JSON path")
    p.add_argument("--method", required=True,
                   choices=["conv", "offsets", "anti-offsets"],
                   help="dissimilarity source")
    p.add_argument("--head", choices=["reg", "heat"], default="heat",
                   help="which head the labels are for (and, with --method conv, "
                        "the weight layout)")
    p.add_argument("--weights", help="NPY weights, rows per keypoint (conv method)")
    p.add_argument("--bias", help="NPY bias vector to append to weight rows "
                                  "(conv method; excluded by default)")
    p.add_argument("--annotations", help="annotation JSON (offset methods)")
    p.add_argument("--clusters", type=int, required=True,
                   help="cluster count to cut the dendrogram at")
    p.add_argument("--linkage", choices=["average", "complete"], default=None,
                   help="default: average (complete for anti-offsets)")
    p.add_argument("--restrict", action="store_true",
                   help="forbid same-class merges via a sentinel distance")
    p.add_argument("--base", help="existing grouping file; the other head's "
                                  "labels are taken from it instead of identity")
    p.add_argument("--dendrogram", help="also write the merge list as JSON")
    p.add_argument("-o", "--output", required=True, help="output grouping JSON")

    p = sub.add_parser("consensus",
                       help="per-head ARI between two grouping files")
    p.add_argument("grouping_a")
    p.add_argument("grouping_b")

    p = sub.add_parser("analyze",
                       help="validity report, inconsistent pairs, ambiguity matrix")
    p.add_argument("--schema", required=True)
    p.add_argument("--grouping", help="grouping JSON to validate")
    p.add_argument("--mode", choices=["restricted", "unrestricted"],
                   default="unrestricted")
    p.add_argument("--dendro-reg", help="regression dendrogram JSON")
    p.add_argument("--dendro-heat", help="heatmap dendrogram JSON")
    p.add_argument("--counts-reg", help="comma-separated cluster counts")
    p.add_argument("--counts-heat", help="comma-separated cluster counts")
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")

    p = sub.add_parser("budget",
                       help="channel and memory accounting report")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--grouping", help="grouping JSON; supplies cluster counts")
    p.add_argument("--clusters", help="m_reg,m_heat (alternative to --grouping)")
    p.add_argument("--resolution", type=int, default=512,
                   help="input resolution in pixels per side")

    p = sub.add_parser("decode",
                       help="decode detections for every image in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--refine", choices=["base", "rescore"], default="rescore")
    p.add_argument("--sigma", type=float, default=2.0,
                   help="rescoring mask stddev, feature-grid px")
    p.add_argument("--topk", type=int, default=100, help="max detections per image")
    p.add_argument("--center-thresh", type=float, default=0.1,
                   help="min center peak score, range [0, 1]")
    p.add_argument("--kp-thresh", type=float, default=0.1,
                   help="min keypoint peak score (base refinement), range [0, 1]")
    p.add_argument("--jobs", type=int, default=1,
                   help="decode images in N parallel processes")
    p.add_argument("-o", "--output", required=True, help="output detections JSON")

    p = sub.add_parser("synth",
                       help="render scenes into head tensors plus a manifest")
    p.add_argument("--schema", help="schema JSON (not needed with --trap-case)")
    p.add_argument("--grouping", help="grouping JSON (default: identity)")
    p.add_argument("--spec", action="append", default=[],
                   help="scene spec JSON (repeatable)")
    p.add_argument("--trap-case", action="store_true",
                   help="emit the canned closest-peak trap case")
    p.add_argument("--random", type=int, default=0, metavar="N",
                   help="generate N random well-separated scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--outdir", required=True)

    p = sub.add_parser("sweep-sigma",
                       help="pick the best rescoring sigma on labeled scenes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigmas", required=True,
                   help="comma-separated sigma grid, feature-grid px")
    p.add_argument("--topk", type=int, default=100)
    p.add_argument("--center-thresh", type=float, default=0.1)
    p.add_argument("--pck", type=float, default=0.05,
                   help="PCK threshold as a fraction of max box side")

    p = sub.add_parser("init-weights",
                       help="average per-keypoint weight rows into cluster rows")
    p.add_argument("--weights", required=True, help="NPY weights")
    p.add_argument("--grouping", required=True)
    p.add_argument("--head", choices=["reg", "heat"], required=True)
    p.add_argument("-o", "--output", required=True, help="output NPY")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("KPG_LOG", "WARNING"))
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ValidationError("kpgroup: a subcommand is required (see --help)")
        handler = {
            "group": _cmd_group,
            "consensus": _cmd_consensus,
            "analyze": _cmd_analyze,
            "budget": _cmd_budget,
            "decode": _cmd_decode,
            "synth": _cmd_synth,
            "sweep-sigma": _cmd_sweep_sigma,
            "init-weights": _cmd_init_weights,
        }[args.command]
        handler(args)
        return 0
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _cmd_group(args) -> None:
    schema = load_schema(args.schema)
    if args.method == "conv":
        if not args.weights:
            raise ValidationError("--method conv requires --weights")
        weights = read_tensor(args.weights)
        bias = read_tensor(args.bias) if args.bias else None
        matrix = dissim_mod.conv_weight_distance(weights, args.head, schema, bias=bias)
    else:
        if not args.annotations:
            raise ValidationError(f"--method {args.method} requires --annotations")
        annotations = read_annotations(args.annotations, schema)
        means = dissim_mod.mean_offsets(annotations, schema)
        if args.method == "offsets":
            matrix = dissim_mod.offsets_distance(means)
        else:
            matrix = dissim_mod.anti_offsets_distance(means)

    if args.restrict:
        matrix = dissim_mod.apply_restrictions(matrix, schema)

    linkage = args.linkage
    if linkage is None:
        linkage = "complete" if args.method == "anti-offsets" else "average"
    dendro = cluster_mod.agglomerate(matrix, linkage)
    if args.restrict:
        labels = cluster_mod.cut_restricted(dendro, schema, args.clusters)
    else:
        labels = cluster_mod.cut(dendro, args.clusters)

    if args.base:
        base = load_grouping(args.base)
        if base.schema_fingerprint != schema.fingerprint:
            raise ValidationError("--base grouping was built for a different schema")
        other_reg, other_heat = base.reg_labels, base.heat_labels
    else:
        other_reg = other_heat = tuple(range(schema.n))

    if args.head == "reg":
        grouping = cluster_mod.make_grouping(schema, labels, other_heat)
    else:
        grouping = cluster_mod.make_grouping(schema, other_reg, labels)

    save_grouping(grouping, args.output)
    if args.dendrogram:
        cluster_mod.save_dendrogram(dendro, args.dendrogram)
    report = check_grouping(schema, grouping, mode="unrestricted")
    log.info("grouping (%d,%d): %d ambiguous pair(s)",
             grouping.m_reg, grouping.m_heat, report.ambiguous_pairs_total)
    print(f"wrote grouping ({grouping.m_reg},{grouping.m_heat}) to {args.output}")


def _cmd_consensus(args) -> None:
    a = load_grouping(args.grouping_a)
    b = load_grouping(args.grouping_b)
    if a.schema_fingerprint != b.schema_fingerprint:
        raise ValidationError("groupings were built for different schemas")
    ari_reg = metrics_mod.adjusted_rand_index(a.reg_labels, b.reg_labels)
    ari_heat = metrics_mod.adjusted_rand_index(a.heat_labels, b.heat_labels)
    print(f"ARI reg:  {ari_reg:.6f}")
    print(f"ARI heat: {ari_heat:.6f}")


def _cmd_analyze(args) -> None:
    schema = load_schema(args.schema)
    out: dict = {}
    if args.grouping:
        grouping = load_grouping(args.grouping)
        report = check_grouping(schema, grouping, mode=args.mode)
        out["validity"] = report.to_dict()
        ir, reg_pairs = metrics_mod.inconsistent_pairs(
            schema, grouping.reg_labels, "reg")
        ih, heat_pairs = metrics_mod.inconsistent_pairs(
            schema, grouping.heat_labels, "heat")
        out["inconsistent_pairs"] = {
            "reg": ir, "heat": ih,
            "reg_pairs": [list(p) for p in reg_pairs],
            "heat_pairs": [list(p) for p in heat_pairs],
        }
    if args.dendro_reg or args.dendro_heat:
        if not (args.dendro_reg and args.dendro_heat
                and args.counts_reg and args.counts_heat):
            raise ValidationError(
                "ambiguity matrix needs --dendro-reg, --dendro-heat, "
                "--counts-reg and --counts-heat")
        dr = cluster_mod.load_dendrogram(args.dendro_reg)
        dh = cluster_mod.load_dendrogram(args.dendro_heat)
        am = metrics_mod.ambiguity_matrix(
            schema, dr, dh,
            _int_list(args.counts_reg), _int_list(args.counts_heat))
        out["ambiguity_matrix"] = am.to_dict()
        if not args.json:
            print(am.to_text())
            print(f"zero frontier: {list(am.zero_frontier)}")
    if not out:
        raise ValidationError("nothing to analyze: pass --grouping or dendrograms")
    if args.json:
        print(json.dumps(out, indent=2))
    elif "validity" in out:
        v = out["validity"]
        print(f"restricted_ok: {v['restricted_ok']}")
        print(f"ambiguous_pairs_total: {v['ambiguous_pairs_total']}")
        print(f"inconsistent pairs: reg={out['inconsistent_pairs']['reg']} "
              f"heat={out['inconsistent_pairs']['heat']}")


def _cmd_budget(args) -> None:
    if args.grouping:
        grouping = load_grouping(args.grouping)
        m_reg, m_heat = grouping.m_reg, grouping.m_heat
    elif args.clusters:
        parts = _int_list(args.clusters)
        if len(parts) != 2:
            raise ValidationError("--clusters expects m_reg,m_heat")
        m_reg, m_heat = parts
    else:
        raise ValidationError("pass --grouping or --clusters")
    print(budget_mod.budget_report(args.classes, m_reg, m_heat, args.resolution))


def _decode_one(entry_paths, schema, grouping, params):
    heads = decode_mod.load_scene_heads(entry_paths)
    dets = decode_mod.decode_full(
        heads, schema, grouping,
        refine=params["refine"], sigma=params["sigma"],
        top_k=params["topk"], center_threshold=params["center_thresh"],
        kp_threshold=params["kp_thresh"],
    )
    return decode_mod.detections_to_jsonable(dets, stride=params["stride"])


def _cmd_decode(args) -> None:
    manifest = read_manifest(args.manifest)
    schema = load_schema(manifest.schema_path)
    grouping = load_grouping(manifest.grouping_path)
    params = {
        "refine": args.refine, "sigma": args.sigma, "topk": args.topk,
        "center_thresh": args.center_thresh, "kp_thresh": args.kp_thresh,
        "stride": manifest.stride,
    }
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [
                pool.submit(_decode_one, e.head_paths, schema, grouping, params)
                for e in manifest.entries
            ]
            results = [f.result() for f in futures]
    else:
        results = [
            _decode_one(e.head_paths, schema, grouping, params)
            for e in manifest.entries
        ]
    doc = [
        {"image_id": e.image_id, "detections": dets}
        for e, dets in zip(manifest.entries, results)
    ]
    Path(args.output).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"decoded {len(doc)} image(s) to {args.output}")


def _cmd_synth(args) -> None:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    if args.trap_case:
        case = synth_mod.closest_peak_trap_case()
        schema, grouping = case.schema, case.grouping
        specs = [case.spec]
        (outdir / "trap_case_expected.json").write_text(
            json.dumps(case.expected, indent=2) + "\n")
    else:
        if not args.schema:
            raise ValidationError("synth requires --schema (or --trap-case)")
        schema = load_schema(args.schema)
        grouping = (load_grouping(args.grouping) if args.grouping
                    else Grouping.identity(schema))
        specs = [synth_mod.load_scene_spec(p) for p in args.spec]
        if args.random:
            rng = np.random.default_rng(args.seed)
            specs += [
                synth_mod.random_scene(schema, grouping, rng)
                for _ in range(args.random)
            ]
    if not specs:
        raise ValidationError("no scenes: pass --spec, --random N, or --trap-case")

    from .schema import save_schema
    save_schema(schema, outdir / "schema.json")
    save_grouping(grouping, outdir / "grouping.json")

    images = []
    for i, spec in enumerate(specs):
        heads, truth = synth_mod.render(spec, schema, grouping)
        entry = {"id": i}
        for name in HEAD_NAMES:
            fname = f"scene{i:04d}_{name}.npy"
            write_tensor(getattr(heads, name), outdir / fname)
            entry[name] = fname
        synth_mod.save_truth(truth, outdir / f"scene{i:04d}_truth.json")
        entry["truth"] = f"scene{i:04d}_truth.json"
        synth_mod.save_scene_spec(spec, outdir / f"scene{i:04d}_spec.json")
        images.append(entry)

    write_manifest(outdir / "manifest.json", "schema.json", "grouping.json", images)
    print(f"rendered {len(specs)} scene(s) into {outdir}")


def _cmd_sweep_sigma(args) -> None:
    manifest = read_manifest(args.manifest)
    schema = load_schema(manifest.schema_path)
    grouping = load_grouping(manifest.grouping_path)
    scenes = []
    for entry in manifest.entries:
        if entry.truth_path is None:
            raise ValidationError(
                f"image {entry.image_id} has no ground truth; sweep needs labels")
        heads = decode_mod.load_scene_heads(entry.head_paths)
        scenes.append((heads, synth_mod.load_truth(entry.truth_path)))
    grid = [float(s) for s in args.sigmas.split(",") if s]
    best, results = decode_mod.sweep_sigma(
        scenes, schema, grouping, grid,
        top_k=args.topk, center_threshold=args.center_thresh,
        pck_threshold=args.pck,
    )
    for sigma, acc in results:
        print(f"sigma {sigma:g}: PCK@{args.pck:g} = {acc:.4f}")
    print(f"best sigma: {best:g}")


def _cmd_init_weights(args) -> None:
    weights = read_tensor(args.weights)
    grouping = load_grouping(args.grouping)
    labels = grouping.reg_labels if args.head == "reg" else grouping.heat_labels
    _, rows = cluster_mod.average_weights(weights, labels, args.head)
    write_tensor(rows.astype(weights.dtype), args.output)
    print(f"wrote {rows.shape[0]}x{rows.shape[1]} grouped weights to {args.output}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from exc


if __name__ == "__main__":
    sys.exit(main())
