"""Command-line front end: simulate, fit, summarize, graph.

Configuration comes from (lowest to highest precedence) dataclass defaults,
an optional JSON file with sections ``model``, ``run``, ``spatial``,
``ingest`` and ``simulate``, and command-line flags. The resolved tree is
stored in every manifest.

Exit codes: 0 ok, 2 input error, 3 config error, 4 sampler failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lagfcr import __version__, inference, kernels, model, spatial
from lagfcr.basisgen import Grid
from lagfcr.errors import ConfigError, InputError, LagFCRError

MANIFEST = "manifest.json"
OUTPUT_ROOT_ENV = "LAGFCR_OUTPUT_ROOT"


@dataclass(frozen=True)
class SpatialConfig:
    k: int = 10
    quantile: float = 0.5
    resolution: float | None = None  # sample points per unit length
    workers: int = 1


@dataclass(frozen=True)
class IngestConfig:
    min_positives: int = 5
    id_property: str = "site_id"
    allow_geographic: bool = False
    start_date: str | None = None  # widen the grid beyond the observed dates
    end_date: str | None = None


@dataclass(frozen=True)
class SimulateConfig:
    n: int = 10
    M: int = 300
    lag: int = 8
    seed: int = 0
    truth: str = "scenario"  # or "prior"
    x_every: int = 7
    y_every: int = 1
    y_terminal_missing: float = 0.3
    withhold_y_sites: tuple = ()
    sigma_y: float = 0.02
    sigma_x: float = 0.25
    start_date: str = "2020-08-03"


SECTIONS = {
    "model": model.Hyperparams,
    "run": inference.RunConfig,
    "spatial": SpatialConfig,
    "ingest": IngestConfig,
    "simulate": SimulateConfig,
}
COMMAND_SECTIONS = {
    "simulate": ("simulate", "model"),
    "fit": ("model", "run", "spatial", "ingest"),
    "summarize": (),
    "graph": ("spatial", "ingest"),
}


# ---------------------------------------------------------------------------
# configuration


def _flag(section, name, taken=()):
    # a field name shared by two sections gets the section as prefix
    flag = f"--{name.replace('_', '-')}"
    return f"--{section}-{name.replace('_', '-')}" if flag in taken else flag


def _dest(section, name):
    return f"{section}__{name}"


def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_section_flags(parser, section, taken):
    cls = SECTIONS[section]
    group = parser.add_argument_group(section)
    for f in dataclasses.fields(cls):
        default = f.default
        kw = dict(dest=_dest(section, f.name), default=None)
        if isinstance(default, bool):
            kw.update(type=_parse_bool, metavar="BOOL")
        elif isinstance(default, tuple):
            kw.update(nargs="*")
        elif isinstance(default, int):
            kw.update(type=int)
        elif isinstance(default, float):
            kw.update(type=float)
        elif default is None:
            kw.update(type=float if f.name == "resolution" else (int if f.name in ("P", "J") else str))
        else:
            kw.update(type=str)
        flag = _flag(section, f.name, taken)
        taken.add(flag)
        group.add_argument(flag, **kw)


def _coerce(cls, section, values: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", field=section)
    out = {}
    for key, val in values.items():
        default = names[key].default
        if isinstance(default, tuple) and isinstance(val, list):
            val = tuple(val)
        out[key] = val
    try:
        return cls(**out)
    except LagFCRError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field=section) from None


def resolve_config(args, sections) -> dict:
    """Merge file config and flags into dataclass instances per section."""
    tree = {}
    if getattr(args, "config", None):
        try:
            tree = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise InputError("config file not found", path=args.config) from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(tree, dict):
            raise ConfigError("config root must be an object")
        extra = set(tree) - set(SECTIONS)
        if extra:
            raise ConfigError(f"unknown sections {sorted(extra)}")
    out = {}
    for section in sections:
        values = dict(tree.get(section, {}))
        for f in dataclasses.fields(SECTIONS[section]):
            v = getattr(args, _dest(section, f.name), None)
            if v is not None:
                values[f.name] = v
        for key, val in values.items():
            if not isinstance(key, str):
                raise ConfigError("keys must be strings", field=section)
        out[section] = _coerce(SECTIONS[section], section, values)
    if "model" in out:
        out["model"].validate()
    return out


def config_tree(cfg: dict) -> dict:
    return {k: dataclasses.asdict(v) for k, v in cfg.items()}


# ---------------------------------------------------------------------------
# files


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _parse_date(text, path, row):
    try:
        return dt.date.fromisoformat(text.strip())
    except (ValueError, AttributeError):
        raise InputError(f"unparseable date {text!r}", path=path, row=row) from None


def _read_rows(path, required, kind):
    path = Path(path)
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise InputError(f"{kind} file not found", path=path) from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(enumerate(reader, start=2))
    if not header:
        return [], header
    missing = [c for c in required if c not in header]
    if missing:
        raise InputError(f"missing columns {missing}", path=path)
    return rows, header


def _number(text, path, row, col):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise InputError(f"column {col!r}: not a number ({text!r})", path=path, row=row) from None
    if not np.isfinite(v):
        raise InputError(f"column {col!r}: non-finite value", path=path, row=row)
    return v


def _read_y(path, rules: IngestConfig):
    """({site: {date: value}}, every date seen) after the minimum-positives rule.

    Rows without a usable value are missing days; their dates still widen the grid.
    """
    rows, header = _read_rows(path, ("site_id", "date"), "y")
    if header and "value" not in header and not {"positives", "tests"} <= set(header):
        raise InputError("need a 'value' column or 'positives' and 'tests' columns", path=path)
    out, seen = {}, set()
    for row, rec in rows:
        site = rec["site_id"].strip()
        date = _parse_date(rec["date"], path, row)
        seen.add(date)
        out.setdefault(site, {})
        pos_txt = (rec.get("positives") or "").strip()
        if pos_txt:
            pos = _number(pos_txt, path, row, "positives")
            if pos < rules.min_positives:
                continue  # too few positives: treated as missing
        val_txt = (rec.get("value") or "").strip()
        if val_txt:
            val = _number(val_txt, path, row, "value")
        elif pos_txt and (rec.get("tests") or "").strip():
            tests = _number(rec["tests"], path, row, "tests")
            if tests <= 0:
                raise InputError("tests must be positive", path=path, row=row)
            val = pos / tests
        else:
            continue
        if not 0.0 <= val <= 1.0:
            raise InputError(f"positivity rate {val} outside [0, 1]", path=path, row=row)
        site_rows = out[site]
        if date in site_rows:
            raise InputError(f"duplicate observation for site {site} on {date}", path=path, row=row)
        site_rows[date] = val
    return out, seen


def _read_x(path):
    rows, header = _read_rows(path, ("site_id", "date", "value"), "x")
    out = {}
    for row, rec in rows:
        site = rec["site_id"].strip()
        date = _parse_date(rec["date"], path, row)
        val = _number(rec["value"], path, row, "value")
        site_rows = out.setdefault(site, {})
        if date in site_rows:
            raise InputError(f"duplicate observation for site {site} on {date}", path=path, row=row)
        site_rows[date] = val
    return out


def ingest(y_csv, x_csv, geo, rules: IngestConfig = IngestConfig(), lag_max: int = 21) -> model.Dataset:
    """Observation CSVs plus GeoJSON regions into a validated Dataset.

    Sites follow the feature order of the geometry file. The day grid runs
    from the earliest to the latest date seen in either file (optionally
    widened by ``rules.start_date``/``end_date``), with ``lag_max`` extra
    days on the left.
    """
    regions = spatial.read_geojson(geo, rules.id_property, rules.allow_geographic)
    ids = [r.id for r in regions]
    ys, y_dates = _read_y(y_csv, rules)
    xs = _read_x(x_csv)
    for name, table, path in (("y", ys, y_csv), ("x", xs, x_csv)):
        orphans = sorted(set(table) - set(ids))
        if orphans:
            raise InputError(f"{name} observations for sites missing from the geometry: {orphans}",
                             path=path, details={"orphans": orphans})
    dates = [*y_dates, *(d for site in xs.values() for d in site)]
    if not dates:
        raise InputError("no observations", path=x_csv)
    start, end = min(dates), max(dates)
    if rules.start_date:
        start = min(start, _parse_date(rules.start_date, "config", None))
    if rules.end_date:
        end = max(end, _parse_date(rules.end_date, "config", None))
    M = (end - start).days + 1
    grid = Grid.regular(M, lag_max)

    def series(table, sid):
        obs = table.get(sid, {})
        idx = np.array([(d - start).days for d in obs], dtype=np.int64)
        return model.SiteSeries(idx, np.array(list(obs.values()), dtype=float))

    return model.Dataset(grid, ids, [series(ys, s) for s in ids], [series(xs, s) for s in ids],
                         regions, start_date=start.isoformat())


def grid_dates(start_date: str, M: int, extension: int = 0):
    start = dt.date.fromisoformat(start_date)
    return [(start + dt.timedelta(days=int(k))).isoformat() for k in range(-extension, M)]


def write_dataset(out, data: model.Dataset):
    dates = grid_dates(data.start_date, len(data.grid))
    yrows, xrows = [], []
    for sid, ys, xs in zip(data.sites, data.y_series, data.x_series):
        # every day gets a y row (blank when missing) so the grid span survives ingest
        yv = dict(zip(ys.index.tolist(), ys.values))
        yrows += [(sid, d, _fmt(yv[t]) if t in yv else "") for t, d in enumerate(dates)]
        xrows += [(sid, dates[t], _fmt(v)) for t, v in zip(xs.index, xs.values)]
    _write_csv(out / "y.csv", ("site_id", "date", "value"), yrows)
    _write_csv(out / "x.csv", ("site_id", "date", "value"), xrows)
    spatial.write_geojson(out / "geo.geojson", data.regions)


# ---------------------------------------------------------------------------
# summaries


def _curve_rows(band, dates):
    return [(d, _fmt(band["mean"][t]), _fmt(band["q2.5"][t]), _fmt(band["q50"][t]), _fmt(band["q97.5"][t]))
            for t, d in enumerate(dates)]


CURVE_HEADER = ("time", "mean", "q2.5", "q50", "q97.5")


def write_summaries(out: Path, outputs, meta: dict, hp: model.Hyperparams, bins: int = 20) -> list:
    """All summary files of a fit; returns their paths (relative to ``out``)."""
    out = Path(out)
    written = []

    def rel(p):
        written.append(str(Path(p).relative_to(out)))

    M, D = meta["M"], meta["extension"]
    sites = meta["sites"]
    grid = Grid.regular(M, D)
    bases = model.build_bases(grid, hp)
    probs = inference.pooled_lag_probs(outputs)
    p = out / "lag_posterior.csv"
    _write_csv(p, ("lag", "probability"), [(k, _fmt(v)) for k, v in enumerate(probs)])
    rel(p)

    summary = {"draws": int(sum(o.n_draws for o in outputs)), "chains": [o.chain for o in outputs]}
    if summary["draws"]:
        hpd = inference.hpd_discrete(probs, 0.95)
        summary.update(mode=int(np.argmax(probs)), hpd95=hpd, hpd95_interval=inference.hpd_interval(hpd))
    p = out / "lag_summary.json"
    p.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    rel(p)

    rows = []
    for o in outputs:
        for name, e in sorted(o.diagnostics.items()):
            rows.append((o.chain, name, _fmt(e.value), int(e.degenerate)))
    p = out / "ess.csv"
    _write_csv(p, ("chain", "parameter", "ess", "degenerate"), rows)
    rel(p)

    if not summary["draws"]:
        return written
    curves = inference.summarize_curves(outputs, bases, D)
    obs_dates = grid_dates(meta["start_date"], M)
    ext_dates = grid_dates(meta["start_date"], M, D)
    cdir = out / "curves"
    for name, dates in (("gamma", obs_dates), ("mu", ext_dates)):
        p = cdir / f"{name}.csv"
        _write_csv(p, CURVE_HEADER, _curve_rows(curves[name], dates))
        rel(p)
    for i, sid in enumerate(sites):
        p = cdir / f"X_{sid}.csv"
        _write_csv(p, CURVE_HEADER, _curve_rows(curves["X"][i], ext_dates))
        rel(p)
        p = cdir / f"fitted_y_{sid}.csv"
        _write_csv(p, CURVE_HEADER, _curve_rows(curves["fitted_y"][i], obs_dates))
        rel(p)

    counts, medges, gedges = inference.mu_gamma_density(curves, D, bins)
    rows = [(_fmt(medges[a]), _fmt(medges[a + 1]), _fmt(gedges[b]), _fmt(gedges[b + 1]), int(counts[a, b]))
            for a in range(counts.shape[0]) for b in range(counts.shape[1])]
    p = out / "mu_gamma_density.csv"
    _write_csv(p, ("mu_low", "mu_high", "gamma_low", "gamma_high", "count"), rows)
    rel(p)
    return written


# ---------------------------------------------------------------------------
# commands


def _output_dir(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest(out, command, cfg_tree, inputs, outputs, seed, timings, extra=None):
    doc = {
        "tool": "lagfcr",
        "version": __version__,
        "command": command,
        "config": cfg_tree,
        "inputs": {k: {"path": str(Path(v).resolve()), "sha256": sha256(v)} for k, v in inputs.items()},
        "outputs": {f: sha256(out / f) for f in sorted(outputs)},
        "seed": seed,
        "kernel_backend": kernels.BACKEND,
        "timings": timings,
        **(extra or {}),
    }
    (out / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def cmd_simulate(args):
    cfg = resolve_config(args, COMMAND_SECTIONS["simulate"])
    sim: SimulateConfig = cfg["simulate"]
    try:
        dt.date.fromisoformat(sim.start_date)
    except ValueError:
        raise ConfigError(f"not an ISO date: {sim.start_date!r}", field="simulate.start_date") from None
    hp = cfg["model"].resolve(sim.M)
    schedule = model.Schedule(sim.x_every, sim.y_every, sim.y_terminal_missing, tuple(sim.withhold_y_sites))
    if sim.truth == "scenario":
        truth = model.Scenario(lag=sim.lag, sigma_y=sim.sigma_y, sigma_x=sim.sigma_x)
    elif sim.truth == "prior":
        truth = "prior"
    else:
        raise ConfigError("must be 'scenario' or 'prior'", field="simulate.truth")
    t0 = time.perf_counter()
    try:
        data, state = model.simulate(hp, sim.n, sim.M, truth=truth, schedule=schedule, seed=sim.seed)
    except ValueError as exc:
        if isinstance(exc, LagFCRError):
            raise
        raise ConfigError(str(exc), field="simulate") from None
    data.start_date = sim.start_date
    out = _output_dir(args.out)
    write_dataset(out, data)
    model.save_state(out / "truth.bundle", state, {
        "sites": data.sites, "M": len(data.grid), "extension": data.grid.extension,
        "start_date": sim.start_date, "lag": int(state.lag), "hp": hp.to_dict(),
    })
    files = ["y.csv", "x.csv", "geo.geojson", "truth.bundle"]
    _manifest(out, "simulate", config_tree(cfg), {}, files, sim.seed,
              {"total_seconds": time.perf_counter() - t0})
    return 0


def build_graph(regions, sp: SpatialConfig, jitter_rel: float):
    n = len(regions)
    k = sp.k
    if n < 2:
        raise InputError("need at least two sites for a spatial graph")
    if k >= n:
        warnings.warn(f"k={k} >= number of sites {n}; using k={n - 1}", stacklevel=2)
        k = n - 1
    return spatial.knn_weights(regions, k=k, quantile=sp.quantile, resolution=sp.resolution,
                               jitter_rel=jitter_rel, workers=sp.workers)


def _fit_inputs(args, manifest=None):
    if manifest is not None:
        ins = manifest["inputs"]
        for name, rec in ins.items():
            if not Path(rec["path"]).exists():
                raise InputError(f"{name} input from manifest not found", path=rec["path"])
            if sha256(rec["path"]) != rec["sha256"]:
                raise InputError(f"{name} input changed since the manifest was written", path=rec["path"])
        return {k: v["path"] for k, v in ins.items()}
    missing = [f for f in ("y", "x", "geo") if getattr(args, f) is None]
    if missing:
        raise ConfigError(f"missing inputs {['--' + m for m in missing]} (or pass --manifest)")
    return {"y": args.y, "x": args.x, "geo": args.geo}


def cmd_fit(args):
    manifest = None
    if args.manifest:
        try:
            manifest = json.loads(Path(args.manifest).read_text())
        except FileNotFoundError:
            raise InputError("manifest not found", path=args.manifest) from None
        except json.JSONDecodeError as exc:
            raise InputError(f"invalid manifest ({exc})", path=args.manifest) from None
        if manifest.get("command") != "fit":
            raise ConfigError("manifest is not from a fit run")
        cfg = {s: _coerce(SECTIONS[s], s, manifest["config"][s]) for s in COMMAND_SECTIONS["fit"]}
        cfg["model"].validate()
    else:
        cfg = resolve_config(args, COMMAND_SECTIONS["fit"])
    inputs = _fit_inputs(args, manifest)
    hp0: model.Hyperparams = cfg["model"]
    run_cfg: inference.RunConfig = cfg["run"]
    out = _output_dir(args.out)
    timings = {}

    t0 = time.perf_counter()
    data = ingest(inputs["y"], inputs["x"], inputs["geo"], cfg["ingest"], hp0.lag_max)
    hp = hp0.resolve(len(data.grid))
    timings["ingest_seconds"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        graph = build_graph(data.regions, cfg["spatial"], hp.jitter)
    notes = [str(w.message) for w in caught]
    timings["graph_seconds"] = time.perf_counter() - t0

    meta = {"sites": data.sites, "M": len(data.grid), "extension": data.grid.extension,
            "start_date": data.start_date}
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    t0 = time.perf_counter()
    outputs = inference.run(data, hp, run_cfg, graph, checkpoint_dir=ckdir, extra={"meta": meta})
    timings["sampling_seconds"] = time.perf_counter() - t0
    timings["chain_seconds"] = {str(o.chain): o.seconds for o in outputs}

    t0 = time.perf_counter()
    files = write_summaries(out, outputs, meta, hp)
    files += [str(inference.checkpoint_path(ckdir, o.chain).relative_to(out)) for o in outputs]
    timings["summary_seconds"] = time.perf_counter() - t0
    cfg_tree = config_tree(cfg)
    cfg_tree["model"] = hp.to_dict()
    _manifest(out, "fit", cfg_tree, inputs, files, run_cfg.seed, timings,
              {"warnings": notes, "meta": meta})
    return 0


def cmd_summarize(args):
    if not args.checkpoints:
        raise InputError("no checkpoint files given")
    outputs, metas, hps, paths = [], [], [], {}
    for path in args.checkpoints:
        header, _, _, _ = inference.load_checkpoint(path)
        if "meta" not in header:
            raise InputError("checkpoint lacks grid metadata", path=path)
        outputs.append(inference.output_from_checkpoint(path))
        paths[outputs[-1].chain] = path
        metas.append(header["meta"])
        hps.append(header["hp"])
    if any(m != metas[0] for m in metas) or any(h != hps[0] for h in hps):
        raise InputError("checkpoints come from different datasets or model settings")
    chains = [o.chain for o in outputs]
    if len(paths) != len(chains):
        raise InputError(f"duplicate chain indices {sorted(chains)}")
    outputs.sort(key=lambda o: o.chain)
    hp = model.Hyperparams.from_dict(hps[0])
    out = _output_dir(args.out)
    t0 = time.perf_counter()
    files = write_summaries(out, outputs, metas[0], hp)
    _manifest(out, "summarize", {"model": hps[0]}, {f"checkpoint{c}": p for c, p in sorted(paths.items())},
              files, None, {"summary_seconds": time.perf_counter() - t0}, {"meta": metas[0]})
    return 0


def cmd_graph(args):
    cfg = resolve_config(args, COMMAND_SECTIONS["graph"])
    rules: IngestConfig = cfg["ingest"]
    regions = spatial.read_geojson(args.geo, rules.id_property, rules.allow_geographic)
    t0 = time.perf_counter()
    graph = build_graph(regions, cfg["spatial"], args.jitter)
    out = _output_dir(args.out)
    ids = [r.id for r in regions]
    spatial.write_matrix_csv(out / "D.csv", graph.D, ids)
    spatial.write_matrix_csv(out / "Q.csv", graph.Q, ids)
    spatial.write_matrix_csv(out / "distances.csv", graph.distances, ids)
    _manifest(out, "graph", config_tree(cfg), {"geo": args.geo}, ["D.csv", "Q.csv", "distances.csv"],
              None, {"total_seconds": time.perf_counter() - t0}, {"connected": graph.connected})
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="lagfcr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lagfcr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic dataset and its ground truth")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    taken = {"--out", "--config"}
    for sec in COMMAND_SECTIONS["simulate"]:
        _add_section_flags(s, sec, taken)

    f = sub.add_parser("fit", help="run the sampler and write posterior summaries")
    f.add_argument("--y")
    f.add_argument("--x")
    f.add_argument("--geo")
    f.add_argument("--out", required=True)
    f.add_argument("--config")
    f.add_argument("--manifest", help="rerun with the config and inputs of an earlier fit")
    taken = {"--y", "--x", "--geo", "--out", "--config", "--manifest"}
    for sec in COMMAND_SECTIONS["fit"]:
        _add_section_flags(f, sec, taken)

    m = sub.add_parser("summarize", help="rebuild summaries from checkpoints")
    m.add_argument("checkpoints", nargs="*")
    m.add_argument("--out", required=True)

    g = sub.add_parser("graph", help="write the neighbour matrix D and precision Q")
    g.add_argument("--geo", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--jitter", type=float, default=model.Hyperparams.jitter)
    taken = {"--geo", "--out", "--config", "--jitter"}
    for sec in COMMAND_SECTIONS["graph"]:
        _add_section_flags(g, sec, taken)
    return p


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "summarize": cmd_summarize, "graph": cmd_graph}


def _report(exc, out):
    doc = {"error": getattr(exc, "code", "internal"), "message": str(exc)}
    for attr in ("path", "row", "field"):
        v = getattr(exc, attr, None)
        if v is not None:
            doc[attr] = str(v) if attr == "path" else v
    details = getattr(exc, "details", None)
    if details:
        doc["details"] = details
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    if out:
        try:
            d = Path(out)
            root = os.environ.get(OUTPUT_ROOT_ENV)
            if root and not d.is_absolute():
                d = Path(root) / d
            d.mkdir(parents=True, exist_ok=True)
            (d / "error.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        except OSError:
            pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except LagFCRError as exc:
        _report(exc, getattr(args, "out", None))
        return exc.exit_code
    except (OSError, ValueError) as exc:
        _report(InputError(str(exc)), getattr(args, "out", None))
        return 2


if __name__ == "__main__":
    sys.exit(main())
