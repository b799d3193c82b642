"""
Command line entry point: ``segensemble {fuse,metrics,rank,synth,tta}``.

Exit codes: 0 ok, 1 generic failure, 2 missing input, 3 geometry mismatch,
4 invalid spec, 5 invalid transform. Every flag can also be set through an
environment variable named ``SEGENS_<FLAG>`` (for example ``SEGENS_THREADS``);
an explicit flag wins over the environment.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile

from . import __version__
from .ensemble import FUSION_MODES, load_manifest, run_ensemble
from .errors import InputMissingError, InvalidSpecError, SegEnsembleError
from .metrics import (
    DENOMINATORS,
    correction_effort,
    dsc_per_class,
    load_groups,
    report_csv,
    summarise,
)
from .selection import (
    MODES,
    SelectionPolicy,
    correlation_summary,
    load_candidates,
    ranking_records,
)
from .synth import STRUCTURES, NoiseSpec, default_noise_grid, run_effort_experiment
from .tta import FillPolicy, apply, apply_probability, invert, load_spec, valid_mask
from .volume_io import (
    LabelMap,
    is_probability_volume,
    read_label_map,
    read_probability_map,
    read_volume,
    write_probability_map,
    write_volume,
)

log = logging.getLogger("segensemble")

ENV_PREFIX = "SEGENS_"
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    # usage errors share the generic exit code; 2 is reserved for missing input
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _env(name: str, default=None, convert=str):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return default
    try:
        return convert(raw)
    except ValueError:
        raise SystemExit(f"segensemble: error: bad value {raw!r} for {ENV_PREFIX}{name.upper()}")


def _env_flag(name: str) -> bool:
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"), "")
    return raw.lower() in ("1", "true", "yes", "on")


class _Staging:
    """Collect outputs in a hidden temp dir and move them into place on success."""

    def __init__(self, output_dir: str):
        os.makedirs(output_dir, exist_ok=True)
        self.output_dir = output_dir
        self.tmp = tempfile.mkdtemp(prefix=".segensemble-", dir=output_dir)
        self.names = []

    def path(self, name: str) -> str:
        self.names.append(name)
        return os.path.join(self.tmp, name)

    def write_text(self, name: str, text: str) -> None:
        with open(self.path(name), "w") as f:
            f.write(text)

    def write_json(self, name: str, obj) -> None:
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def commit(self) -> None:
        for name in self.names:
            os.replace(os.path.join(self.tmp, name), os.path.join(self.output_dir, name))
        shutil.rmtree(self.tmp, ignore_errors=True)

    def discard(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--output-dir", default=_env("output-dir", "."),
                        help="directory for all outputs (created if missing; default: .)")
    parser.add_argument("--threads", type=int, default=_env("threads", os.cpu_count() or 1, int),
                        help="worker threads (default: available cores); results do not "
                             "depend on this")
    parser.add_argument("--log", choices=list(LOG_LEVELS), default=_env("log", "warn"),
                        help="log level on standard error (default: warn)")
    parser.add_argument("--figures", action="store_true", default=_env_flag("figures"),
                        help="also render PNG figures next to the JSON output")
    parser.add_argument("--csv", action="store_true", default=_env_flag("csv"),
                        help="also write a CSV table next to the JSON output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segensemble", description=__doc__.splitlines()[1].strip(),
                     formatter_class=argparse.RawDescriptionHelpFormatter,
                     epilog="exit codes: 0 ok, 1 generic, 2 input missing, 3 geometry "
                            "mismatch, 4 invalid spec, 5 invalid transform")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fuse", help="fuse ensemble members and map their disagreement")
    p.add_argument("--manifest", "--inputs", dest="manifest", default=_env("manifest"),
                   required=_env("manifest") is None,
                   help="JSON manifest listing member prediction files and transforms")
    p.add_argument("--num-classes", type=int, default=_env("num-classes", None, int),
                   help="class count L (default: taken from the members)")
    p.add_argument("--fusion", choices=FUSION_MODES, default=_env("fusion", "majority"),
                   help="majority vote or argmax of the mean probability")
    p.add_argument("--exclude-background", action="store_true",
                   default=_env_flag("exclude-background"),
                   help="leave label 0 out of the uncertainty average")
    p.add_argument("--ddof", type=int, choices=(0, 1), default=_env("ddof", 0, int),
                   help="0 for population variance (default), 1 for sample variance")
    p.add_argument("--scan-id", default=None, help="scan id for the report (default: "
                                                   "manifest file stem)")
    _common(p)

    p = sub.add_parser("metrics", help="DSC per class and group, and correction effort")
    p.add_argument("--pred", required=True, help="predicted label map")
    p.add_argument("--gt", required=True, help="reference label map")
    p.add_argument("--groups", default=_env("groups"),
                   help="JSON object mapping group names to label lists")
    p.add_argument("--num-classes", type=int, default=_env("num-classes", None, int),
                   help="class count L (default: inferred from both volumes)")
    p.add_argument("--include-background", action="store_true",
                   default=_env_flag("include-background"),
                   help="score label 0 as a class too")
    p.add_argument("--denominator", choices=DENOMINATORS, default=_env("denominator", "total"),
                   help="normalisation for the correction percentage")
    p.add_argument("--scan-id", default=None, help="scan id (default: prediction file stem)")
    _common(p)

    p = sub.add_parser("rank", help="rank scans by uncertainty and pick a budget")
    p.add_argument("--reports", "--inputs", dest="reports", default=_env("reports"),
                   required=_env("reports") is None,
                   help="directory of report.json files or one JSON array of reports")
    p.add_argument("--mode", choices=MODES, default=_env("mode", "lowest"),
                   help="select the lowest (default) or highest uncertainty first")
    p.add_argument("--budget", type=int, default=_env("budget", None, int),
                   help="number of scans to select")
    p.add_argument("--cost-cap", type=float, default=_env("cost-cap", None, float),
                   help="total annotation cost cap (needs annotation_cost in reports)")
    p.add_argument("--correlation", action="store_true",
                   help="also write correlation.json relating uncertainty to "
                        "correction_percentage where reports carry it")
    _common(p)

    p = sub.add_parser("synth", help="synthetic uncertainty vs correction-effort experiment")
    p.add_argument("--num-scans", type=int, default=_env("num-scans", 20, int),
                   help="synthetic scans (at least 10; default: 20)")
    p.add_argument("--members", type=int, default=_env("members", 6, int),
                   help="ensemble members per scan (default: 6)")
    p.add_argument("--dims", type=int, nargs="+", default=[64],
                   help="phantom size, one value for a cube or three values")
    p.add_argument("--num-classes", type=int, default=_env("num-classes", 5, int),
                   help="phantom class count L including background (default: 5)")
    p.add_argument("--structure", choices=STRUCTURES, default=_env("structure", STRUCTURES[0]),
                   help="phantom layout")
    p.add_argument("--eps-min", type=float, default=_env("eps-min", 0.01, float),
                   help="lowest global flip probability")
    p.add_argument("--eps-max", type=float, default=_env("eps-max", 0.2, float),
                   help="highest global flip probability")
    p.add_argument("--beta", type=float, default=_env("beta", 0.05, float),
                   help="boundary flip probability for every scan")
    p.add_argument("--noise-grid", default=None,
                   help="JSON file with a list of {boundary_flip_prob, global_flip_prob}; "
                        "overrides --eps-min/--eps-max/--beta")
    p.add_argument("--seed", type=int, default=_env("seed", 0, int),
                   help="master seed; fixes phantoms and member noise")
    _common(p)

    p = sub.add_parser("tta", help="apply a test-time transform (or its inverse) to a volume")
    p.add_argument("--spec", required=True, help="transform as inline JSON or a JSON file")
    p.add_argument("--input", required=True, help="volume to transform")
    p.add_argument("--invert", action="store_true", help="apply the inverse transform")
    p.add_argument("--interp", choices=("nearest", "trilinear"), default=None,
                   help="interpolation (default: nearest for labels, trilinear otherwise)")
    p.add_argument("--fill-label", type=int, default=_env("fill-label", 0, int),
                   help="label written where the transform leaves the volume")
    p.add_argument("--fill-intensity", type=float, default=_env("fill-intensity", -1024.0, float),
                   help="intensity written where the transform leaves the volume")
    p.add_argument("--name", default="transformed.nii.gz", help="output file name")
    p.add_argument("--valid-mask", action="store_true",
                   help="also write valid_mask.nii.gz marking voxels inside the field of view")
    _common(p)
    return parser


def _stem(path: str) -> str:
    name = os.path.basename(path)
    for ext in (".nii.gz", ".nii", ".json"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return name


def cmd_fuse(args, out: _Staging) -> None:
    sources = load_manifest(args.manifest)
    scan_id = args.scan_id or _stem(args.manifest)
    fused, umap, report = run_ensemble(
        sources, fusion=args.fusion, num_classes=args.num_classes,
        exclude_background=args.exclude_background, ddof=args.ddof, scan_id=scan_id,
        threads=args.threads, spool_dir=out.tmp)
    write_volume(fused, out.path("fused.nii.gz"))
    write_volume(umap, out.path("uncertainty.nii.gz"))
    report.fused_prediction_path = "fused.nii.gz"
    out.write_json("report.json", report.to_dict())
    if args.figures:
        from .plotting import plot_slices
        plot_slices(fused, umap, out.path("slices.png"))
    log.info("%s: mean uncertainty %.6g over %d members", scan_id, report.mean_uncertainty,
             report.ensemble_size)


def cmd_metrics(args, out: _Staging) -> None:
    for path in (args.pred, args.gt):
        if not os.path.exists(path):
            raise InputMissingError(f"no such file: {path}")
    pred = read_label_map(args.pred, args.num_classes)
    gt = read_label_map(args.gt, args.num_classes)
    scan_id = args.scan_id or _stem(args.pred)
    report = dsc_per_class(pred, gt, scan_id, args.include_background, args.threads)
    groups = load_groups(args.groups) if args.groups else None
    summaries = summarise(report, groups)
    effort = correction_effort(pred, gt, args.denominator, scan_id)
    doc = report.to_dict()
    doc["correction"] = effort.to_dict()
    out.write_json("metrics.json", doc)
    if args.csv:
        out.write_text("metrics.csv", report_csv(report))
    if args.figures:
        from .plotting import plot_groups
        plot_groups(summaries, out.path("groups.png"))
    for name, g in summaries.items():
        log.info("%s %s: %s", scan_id, name, g.table_entry() if g else "no classes")


def cmd_rank(args, out: _Staging) -> None:
    if args.budget is None and args.cost_cap is None:
        raise InvalidSpecError("rank needs --budget or --cost-cap")
    candidates = load_candidates(args.reports)
    policy = SelectionPolicy(args.mode, args.budget, args.cost_cap)
    records = ranking_records(candidates, policy)
    out.write_json("ranking.json", {"mode": args.mode, "budget": args.budget,
                                    "cost_cap": args.cost_cap, "scans": records})
    if args.csv:
        lines = ["scan_id,mean_uncertainty,rank,selected"]
        lines += [f"{r['scan_id']},{r['mean_uncertainty']!r},{r['rank']},{int(r['selected'])}"
                  for r in records]
        out.write_text("ranking.csv", "\n".join(lines) + "\n")
    if args.correlation:
        paired = [c for c in candidates if c.correction_percentage is not None]
        summary = correlation_summary([c.mean_uncertainty for c in paired],
                                      [c.correction_percentage for c in paired])
        out.write_json("correlation.json", summary)
    if args.figures:
        from .plotting import plot_ranking
        plot_ranking(records, out.path("ranking.png"))


def _noise_grid(args) -> list:
    if args.noise_grid is None:
        return default_noise_grid(args.num_scans, args.eps_min, args.eps_max, args.beta)
    if not os.path.exists(args.noise_grid):
        raise InputMissingError(f"no such noise grid file: {args.noise_grid}")
    with open(args.noise_grid) as f:
        try:
            items = json.load(f)
            return [NoiseSpec(float(i.get("boundary_flip_prob", 0)),
                              float(i.get("global_flip_prob", 0))) for i in items]
        except (ValueError, TypeError, AttributeError) as exc:
            raise InvalidSpecError(f"{args.noise_grid}: not a list of noise specs") from exc


def cmd_synth(args, out: _Staging) -> None:
    if len(args.dims) not in (1, 3):
        raise InvalidSpecError("--dims takes one or three values")
    dims = tuple(args.dims * 3 if len(args.dims) == 1 else args.dims)
    record = run_effort_experiment(args.num_scans, _noise_grid(args), args.members, args.seed,
                                   dims, args.num_classes, args.structure, args.threads)
    out.write_json("experiment.json", record.to_dict())
    out.write_text("experiment.csv", record.to_csv())
    if args.figures:
        from .plotting import plot_effort
        plot_effort(record.scans, out.path("effort.png"), record.summary)
    s = record.summary
    if s["undefined_correlation"]:
        log.warning("correlation undefined: %s", s.get("reason"))
    else:
        log.info("spearman %.3f, pearson %.3f over %d scans", s["spearman"], s["pearson"], s["n"])


def cmd_tta(args, out: _Staging) -> None:
    spec = load_spec(args.spec)
    if args.invert:
        spec = invert(spec)
    if not os.path.exists(args.input):
        raise InputMissingError(f"no such file: {args.input}")
    fill = FillPolicy(args.fill_label, args.fill_intensity)
    if is_probability_volume(args.input):
        pmap = read_probability_map(args.input)
        write_probability_map(apply_probability(spec, pmap, fill), out.path(args.name))
        dims = pmap.dims
    else:
        grid = read_volume(args.input)
        if grid.kind == "label":
            grid = read_label_map(args.input)
        interp = args.interp or ("nearest" if isinstance(grid, LabelMap) else "trilinear")
        write_volume(apply(spec, grid, interp, fill), out.path(args.name))
        dims = grid.dims
    if args.valid_mask:
        write_volume(valid_mask(spec, dims), out.path("valid_mask.nii.gz"))


COMMANDS = {"fuse": cmd_fuse, "metrics": cmd_metrics, "rank": cmd_rank, "synth": cmd_synth,
            "tta": cmd_tta}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, int):
            return exc.code
        print(exc.code, file=sys.stderr)
        return 1
    logging.basicConfig(level=LOG_LEVELS[args.log], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.threads < 1:
        print("segensemble: error: --threads must be at least 1", file=sys.stderr)
        return 1
    out = _Staging(args.output_dir)
    try:
        COMMANDS[args.command](args, out)
    except SegEnsembleError as exc:
        out.discard()
        print(f"segensemble {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        out.discard()
        print(f"segensemble {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        out.discard()
        print(f"segensemble {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        out.discard()
        raise
    out.commit()
    return 0


if __name__ == "__main__":
    sys.exit(main())
