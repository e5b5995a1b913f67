"""Command-line experiment runner.

    coldisturb SUBCOMMAND [--config PATH] [--preset NAME] [--out DIR] [--seed N] [--threads N]

Subcommands: characterize, reverse-subarrays, mitigate, analytics, ecc.
Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import re
import sys
import tempfile
from importlib import resources
from pathlib import Path

import jsonschema

from . import __version__
from .analytics import (EnergyParams, count_refresh_ops, drfm_latency, prvr_vs_fixed_rate,
                        prvr_vs_fixed_rate_counted, refresh_ops_reduction, weak_fraction_for_reduction,
                        normalized_refresh_ops)
from .array import DataPattern, DramGeometry, ProfileDistribution, build_array
from .characterize import (METRICS, ExperimentSpec, access_stream, prepare, profile_disturbance,
                           profile_retention, reverse_engineer_subarrays, run_experiment, run_sweep)
from .ecc import chunk_histogram, get_code, miscorrection_rate, overhead
from .engine import Cause
from .errors import ColdisturbError, ConfigurationError
from .mitigation import (PeriodicPolicy, PrvrPolicy, RaidrPolicy, classify_weak_rows, verify_policy)
from .rng import derive_seed
from .timing import MS, Temperature, TimingParams

SCHEMA_VERSION = 1
SUBCOMMANDS = ("characterize", "reverse-subarrays", "mitigate", "analytics", "ecc")
REFERENCE_TARGETS = {"throughput_reduction": 0.705, "energy_reduction": 0.738}


class ConfigError(Exception):
    """Invalid configuration; message already carries the source location."""


# ---------------------------------------------------------------- config
def _schema() -> dict:
    return json.loads(resources.files("coldisturb").joinpath("schema.json").read_text())


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("coldisturb").joinpath("presets").iterdir()
                  if p.name.endswith(".json"))


def _line_of(text: str, path, extra_key: str | None = None) -> int:
    """Best-effort line number of a JSON path inside ``text``."""
    pos = 0
    keys = [p for p in path if isinstance(p, str)]
    if extra_key:
        keys.append(extra_key)
    for key in keys:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            break
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _parse(text: str, source: str) -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be an object")
    return data


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def load_config(config: str | None, preset: str | None, seed: int | None) -> dict:
    """Preset, overlaid by the config file, overlaid by --seed; schema-validated."""
    sources: list[tuple[str, str]] = []
    cfg: dict = {}
    if preset is not None:
        res = resources.files("coldisturb").joinpath("presets", f"{preset}.json")
        if not res.is_file():
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(preset_names())}")
        text = res.read_text()
        sources.append((f"preset:{preset}", text))
        cfg = _parse(text, f"preset:{preset}")
    if config is not None:
        try:
            text = Path(config).read_text()
        except OSError as exc:
            raise ConfigError(f"{config}: cannot read: {exc.strerror}") from None
        sources.insert(0, (config, text))
        cfg = _merge(cfg, _parse(text, config))
    if not sources:
        raise ConfigError("give --config and/or --preset")
    if seed is not None:
        cfg["seed"] = seed
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        extra = None
        m = re.search(r"'([^']+)' (?:was|were) unexpected", err.message)
        if m:
            extra = m.group(1)
        source, text = sources[0]
        where = "/".join(map(str, err.absolute_path)) or "<root>"
        line = _line_of(text, list(err.absolute_path), extra)
        raise ConfigError(f"{source}:{line}: {where}: {err.message}")
    cfg.setdefault("seed", 0)
    cfg.setdefault("schema_version", SCHEMA_VERSION)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------- builders
def geometry_of(cfg: dict) -> DramGeometry:
    g = dict(cfg["geometry"])
    if "subarray_sizes" in g:
        g["subarray_sizes"] = tuple(g["subarray_sizes"])
    return DramGeometry(**g)


def timings_of(cfg: dict) -> TimingParams:
    return TimingParams(**cfg.get("timings", {}))


def temperature_of(cfg: dict, celsius: float | None = None) -> Temperature:
    t = cfg.get("temperature", {})
    return Temperature.preset(t.get("profile", "flat"), t.get("celsius", 85.0) if celsius is None else celsius)


def array_factory(cfg: dict):
    geometry = geometry_of(cfg)
    dist = ProfileDistribution.from_dict(cfg.get("profile", {}))
    seed = derive_seed(cfg["seed"], "array")
    template = build_array(geometry, dist, seed)
    return template.copy


def experiment_of(cfg: dict, section: dict) -> ExperimentSpec:
    e = dict(section.get("experiment", {}))
    for key in ("pattern", "victim_pattern"):
        if key in e:
            e[key] = DataPattern.parse(e[key])
    return ExperimentSpec(timings=timings_of(cfg), temperature=temperature_of(cfg), **e)


# ---------------------------------------------------------------- output
def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def write_atomic(path: Path, data: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: Path, comment: str, header: list[str], rows) -> Path:
    """CSV with one leading '#' comment line describing the quantity, then a header row."""
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    write_atomic(path, buf.getvalue())
    return path


def write_manifest(out: Path, subcommand: str, cfg: dict, outputs: list[Path]) -> Path:
    manifest = {
        "tool": "coldisturb",
        "version": __version__,
        "schema_version": SCHEMA_VERSION,
        "subcommand": subcommand,
        "seed": cfg["seed"],
        "config_sha256": config_hash(cfg),
        "config": cfg,
        "outputs": sorted(p.name for p in outputs),
    }
    path = out / f"{subcommand}.manifest.json"
    write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- subcommands
def cmd_characterize(cfg: dict, out: Path, threads: int) -> list[Path]:
    sec = cfg.get("characterize", {})
    base = experiment_of(cfg, sec)
    grid = sec.get("grid", {"t_agg_on": [base.timings.t_agg_on]})
    metrics = sec.get("metrics", list(METRICS))
    rows = run_sweep(array_factory(cfg), base, grid, metrics,
                     temperature_profile=cfg.get("temperature", {}).get("profile", "flat"),
                     threads=threads, retention_repeats=sec.get("retention_repeats", 50),
                     exclusion_radius=sec.get("exclusion_radius", 8))
    header = list(rows[0]) if rows else sorted(grid)
    comment = ("Time to first column-disturb bitflip (s, blank: none within 512 ms), blast radius (rows) "
               "and fraction of cells with bitflips, for the aggressor subarray and its neighbors")
    return [write_csv(out / "characterize.csv", comment, header, ([r[h] for h in header] for r in rows))]


def cmd_reverse_subarrays(cfg: dict, out: Path, threads: int) -> list[Path]:
    sec = cfg.get("reverse_subarrays", {})
    array = array_factory(cfg)()
    rows = []
    for bank in range(array.banks):
        found = reverse_engineer_subarrays(array, bank, exhaustive=sec.get("exhaustive", False))
        truth = array.geometry.boundaries
        for i, (lo, hi) in enumerate(found):
            rows.append((bank, i, lo, hi, int(i < len(truth) and truth[i] == (lo, hi))))
    comment = "Subarray boundaries recovered by RowClone copy probes (inclusive row ranges)"
    return [write_csv(out / "subarrays.csv", comment,
                      ["bank", "subarray", "first_row", "last_row", "matches_construction"], rows)]


def _failure_profile(template, spec: ExperimentSpec, window: float, mode: str, repeats: int):
    ret = profile_retention(template, window, spec.temperature, repeats=repeats)
    if mode == "retention":
        return ret.min_retention
    return profile_disturbance(template, spec, window, retention=ret).min_retention


def cmd_mitigate(cfg: dict, out: Path, threads: int) -> list[Path]:
    sec = cfg.get("mitigate", {})
    spec = experiment_of(cfg, sec)
    make = array_factory(cfg)
    template = make()
    duration = sec.get("duration", 0.1)
    timings = spec.timings
    rsec = sec.get("raidr", {})
    t_weak, t_strong = rsec.get("t_weak", 64 * MS), rsec.get("t_strong", 256 * MS)
    repeats = rsec.get("retention_repeats", 5)
    weak_profile = _failure_profile(template, spec, t_strong, rsec.get("profiling", "column-disturb"), repeats)
    psec = sec.get("prvr", {})
    t_first = psec.get("t_first")
    if t_first is None:
        # time to first failure under sustained aggression, measured on a copy
        measured = profile_disturbance(template, spec, max(duration, t_strong)).min_retention.min()
        t_first = float(measured) if math.isfinite(measured) else duration
    policies = [PeriodicPolicy(w) for w in sec.get("periodic_windows", [8 * MS, 32 * MS])]
    policies.append(PrvrPolicy(t_first, psec.get("n_victims"), psec.get("trigger_fraction", 0.5),
                               psec.get("base_window", timings.t_refw)))
    for variant in ("bitmap", "bloom"):
        weak = classify_weak_rows(weak_profile, t_strong, variant,
                                  bloom_seed=derive_seed(cfg["seed"], "bloom") & 0xFFFFFFFF)
        policies.append(RaidrPolicy(weak, t_weak, t_strong))
    rows = []
    for policy in policies:
        array = make()
        agg_rows = prepare(array, spec)
        stream = access_stream(array, spec, agg_rows, duration=duration)
        rep = verify_policy(array, stream, policy, duration, timings, spec.temperature)
        causes = {c: len(rep.flips.by_cause(c)) for c in Cause}
        rows.append((rep.policy, len(rep.flips), causes[Cause.COLUMN_DISTURB], causes[Cause.RETENTION],
                     causes[Cause.HAMMER], rep.conflicts, rep.ref_all, rep.ref_row, rep.row_refreshes))
    comment = (f"Bitflips and refresh overhead per refresh policy under {duration!r} s of aggression "
               f"(PRVR t_first {t_first!r} s; RAIDR t_weak {t_weak!r} s, t_strong {t_strong!r} s)")
    header = ["policy", "flips", "column_disturb", "retention", "hammer", "merge_conflicts",
              "ref_all", "ref_row", "row_refreshes"]
    return [write_csv(out / "mitigation.csv", comment, header, rows)]


def cmd_analytics(cfg: dict, out: Path, threads: int) -> list[Path]:
    sec = cfg.get("analytics", {})
    timings = timings_of(cfg)
    fractions = sec.get("fractions", [i / 10 for i in range(11)])
    t_strongs = sec.get("t_strong", [128 * MS, 256 * MS, 512 * MS, 1024 * MS])
    t_weak = sec.get("t_weak", 64 * MS)
    n_rows = sec.get("discrete_rows", 8192)
    grid = [(f, t, normalized_refresh_ops(f, t, t_weak), count_refresh_ops(f, t, t_weak, n_rows))
            for f in fractions for t in t_strongs]
    paths = [write_csv(out / "refresh_ops.csv",
                       "Number of DRAM row refresh operations needed, normalized to refreshing every row each t_weak",
                       ["weak_fraction", "t_strong_s", "normalized_ops", "discrete_ops"], grid)]
    p = sec.get("prvr", {})
    kw = dict(n_victims=p.get("n_victims", 3072), t_first=p.get("t_first", 8 * MS),
              default_window=p.get("default_window", 32 * MS), fast_window=p.get("fast_window", 8 * MS),
              timings=timings, banks=p.get("banks", 32), rows_per_bank=p.get("rows_per_bank", 131072),
              energy=EnergyParams(**p.get("energy", {})))
    closed = prvr_vs_fixed_rate(**kw)
    counted = prvr_vs_fixed_rate_counted(duration=p.get("count_duration", 1.0), **kw)
    rows = [(name, value, getattr(counted, name), REFERENCE_TARGETS.get(name, "")) for name, value in closed.as_rows()]
    rows.append(("prvr_pass_latency_s", drfm_latency(rows=kw["n_victims"], t_row_refresh=timings.t_row_refresh),
                 "", ""))
    rows.append(("drfm_latency_pm2_s", drfm_latency(2), "", ""))
    rows.append(("drfm_latency_pm4_s", drfm_latency(4), "", ""))
    target = sec.get("reduction_target", 0.431)
    f_star = weak_fraction_for_reduction(target, 128 * MS, 1024 * MS, t_weak)
    rows.append(("weak_fraction_for_reduction", f_star, "", ""))
    rows.append(("reduction_at_that_fraction", refresh_ops_reduction(f_star, 128 * MS, 1024 * MS, t_weak), "",
                 target))
    paths.append(write_csv(out / "refresh_costs.csv",
                           "Refresh throughput loss and energy: PRVR on the default refresh rate versus a faster "
                           "fixed rate, closed form and command counting",
                           ["quantity", "closed_form", "counted", "target"], rows))
    return paths


def cmd_ecc(cfg: dict, out: Path, threads: int) -> list[Path]:
    sec = cfg.get("ecc", {})
    mode = sec.get("mode", "exhaustive")
    seed = derive_seed(cfg["seed"], "ecc")
    rows = []
    for name in sec.get("codes", ["sec(136,128)", "secded(72,64)", "hamming(7,4)"]):
        code = get_code(name)
        for w in sec.get("weights", [1, 2]):
            r = miscorrection_rate(code, w, mode, sec.get("trials", 10_000), seed)
            rows.append((code.name, code.n, code.k, overhead(code), w, mode, "" if r.seed is None else r.seed,
                         r.patterns, r.miscorrected, r.detected, r.rate, r.stderr))
    header = ["code", "n", "k", "overhead", "weight", "mode", "seed", "patterns", "miscorrected",
              "detected_uncorrectable", "rate", "stderr"]
    paths = [write_csv(out / "miscorrection.csv",
                       "Fraction of error patterns of each weight that syndrome decoding miscorrects",
                       header, rows)]
    if "histogram" in sec:
        h = sec["histogram"]
        spec = experiment_of(cfg, h)
        array = array_factory(cfg)()
        report, _ = run_experiment(array, spec, duration=h.get("duration"))
        hist = chunk_histogram(report.by_cause(Cause.COLUMN_DISTURB), h.get("chunk_bits", 64))
        hrows = [("15+" if k == 15 else k, v) for k, v in hist.counts.items()]
        paths.append(write_csv(out / "chunk_histogram.csv",
                               f"Distribution of {hist.chunk_bits}-bit data chunks by column-disturb bitflip count",
                               ["flips_per_chunk", "chunks"], hrows))
    return paths


COMMANDS = {
    "characterize": cmd_characterize,
    "reverse-subarrays": cmd_reverse_subarrays,
    "mitigate": cmd_mitigate,
    "analytics": cmd_analytics,
    "ecc": cmd_ecc,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coldisturb", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--preset", help="bundled configuration; --config keys override it")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="master seed, overrides the config")
        p.add_argument("--threads", type=int, default=1, help="parallel sweep points (default: 1)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = load_config(args.config, args.preset, args.seed)
        out = Path(args.out)
        outputs = COMMANDS[args.command](cfg, out, args.threads)
        write_manifest(out, args.command, cfg, outputs)
    except (ConfigError, ConfigurationError) as exc:
        print(f"coldisturb: config error: {exc}", file=sys.stderr)
        return 2
    except (ColdisturbError, ValueError, OSError) as exc:
        print(f"coldisturb: error: {exc}", file=sys.stderr)
        return 3
    for p in outputs:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
