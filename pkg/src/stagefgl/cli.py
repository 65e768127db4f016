"""Command-line entry point: ``stagefgl gen|train|diagnose|report|dump``.

Exit codes: 0 success, 2 config schema violation, 3 I/O or corrupt file,
4 training divergence, 5 config-hash mismatch between artifacts.  Errors go
to stderr as ``ERROR <code> <path>: <message>``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import diagnostics as diag
from . import fedsim
from . import graphdata as gd
from .binio import decode_arrays
from .errors import DivergenceError, ParseError
from .protocol import deserialize
from .semantics import decode_bank
from .server import decode_server

EXIT_OK, EXIT_SCHEMA, EXIT_IO, EXIT_DIVERGENCE, EXIT_HASH = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, path: str, message: str):
        super().__init__(message)
        self.code = code
        self.path = path
        self.message = message


def _settings(args) -> cfgmod.Settings:
    overrides = list(args.set or [])
    if getattr(args, "method", None):
        overrides.append(f"run.method={args.method}")
    if getattr(args, "rounds", None) is not None:
        overrides.append(f"run.rounds={args.rounds}")
    return cfgmod.load(args.config, overrides)


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, str(path), exc.strerror or str(exc)) from None


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_IO, str(path), exc.strerror or str(exc)) from None


def _load_data(path):
    try:
        data, h = gd.decode_with_hash(_read(path))
    except ParseError as exc:
        raise CliError(EXIT_IO, str(path), str(exc)) from None
    if not isinstance(data, gd.FederatedGraph):
        raise CliError(EXIT_IO, str(path), "graph file carries no client partition")
    return data, h


def cmd_gen(args) -> int:
    st = _settings(args)
    cfg = st.run
    seed = cfg.seeds[0]
    fed = fedsim.build_federated(cfg, seed)
    out = Path(args.out)
    target = out / "graph.mag" if out.suffix != ".mag" else out
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        gd.save(fed, target, fedsim.data_hash(cfg, seed))
    except OSError as exc:
        raise CliError(EXIT_IO, str(target), exc.strerror or str(exc)) from None
    print(f"wrote {target}")
    print(f"clients {fed.client_count} sizes {fed.partition.sizes().tolist()} "
          f"balance {fed.partition.balance_ratio():.3f} cut {fed.partition.cut_size}")
    print(f"data_hash {fedsim.data_hash(cfg, seed)}")
    return EXIT_OK


def cmd_train(args) -> int:
    st = _settings(args)
    cfg = st.run
    data = data_id = None
    if args.data:
        data, data_id = _load_data(args.data)
        if data.client_count != cfg.clients:
            raise CliError(EXIT_HASH, args.data, "graph file client count differs from config")
    out = Path(args.out)
    try:
        summary = fedsim.run_experiment(cfg, out, jobs=args.jobs, data=data, data_id=data_id,
                                        checkpoints=True)
    except DivergenceError as exc:
        raise CliError(EXIT_DIVERGENCE, f"client {exc.client}", str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, str(out), exc.strerror or str(exc)) from None
    _write(out / "config.json", json.dumps(cfgmod.to_document(st), indent=2, sort_keys=True) + "\n")
    print(f"{cfg.method} {summary['metric']} {summary['mean']:.4f} +- {summary['std']:.4f}")
    return EXIT_OK


def _latest_checkpoint(path: Path) -> Path:
    if (path / "clients.clt").exists():
        return path
    found = sorted(path.rglob("clients.clt"))
    if not found:
        raise CliError(EXIT_IO, str(path), "no checkpoint found")
    return found[-1].parent


def _open_checkpoint(path, data_path):
    ck = _latest_checkpoint(Path(path))
    try:
        meta = fedsim.checkpoint_meta(ck)
    except (OSError, ParseError) as exc:
        raise CliError(EXIT_IO, str(ck), str(exc)) from None
    try:
        st = cfgmod.from_dict(_document_from_config(meta["config"]), env={})
    except cfgmod.ConfigError as exc:
        raise CliError(EXIT_SCHEMA, f"{ck}:{exc.path}", exc.message) from None
    data = None
    if data_path is not None:
        data, h = _load_data(data_path)
        if h != meta["data_hash"]:
            raise CliError(EXIT_HASH, str(data_path),
                           f"data hash {h or '<none>'} does not match checkpoint {meta['data_hash']}")
    elif meta["data_hash"] != fedsim.data_hash(st.run, meta["seed"]):
        raise CliError(EXIT_HASH, str(ck), "checkpoint was trained on an external graph file; pass --data")
    try:
        sim = fedsim.Simulation.load(ck, st.run, data)
    except ParseError as exc:
        raise CliError(EXIT_IO, str(ck), str(exc)) from None
    return sim, st, ck


def _document_from_config(d: dict) -> dict:
    """Rebuild a sectioned document from a RunConfig dict echo."""
    doc = {}
    for section, keys in cfgmod.SCHEMA.items():
        for key, (target, name) in keys.items():
            if target == "run":
                doc.setdefault(section, {})[key] = d[name]
            elif target == "synth":
                doc.setdefault(section, {})[key] = d["synth"][name]
    return doc


def cmd_diagnose(args) -> int:
    sim, st, ck = _open_checkpoint(args.checkpoint, args.data)
    top_n, n_cent = st.diag["top_n"], st.diag["n_cent"]
    rep = fedsim.collect_diagnostics(sim, top_n, n_cent)
    h = st.config_hash
    out = Path(args.out)
    drift = {"config_hash": h, "round": sim.round,
             "layers": [r.to_dict() for r in rep["drift"]], "growth": _jsonify(rep["growth"])}
    purity = {"config_hash": h, "round": sim.round, "top_n": top_n,
              "entries": diag.purity_to_dict(rep["purity"]),
              "mean_purity": diag.mean_purity(rep["purity"])}
    calib = {"config_hash": h, "round": sim.round,
             "layers": [c.to_dict() for c in rep["calibration"]]}
    energy = {"config_hash": h, "round": sim.round,
              "clients": {str(k): v for k, v in rep["energy"].items()}}
    _write(out / "drift.json", diag.dumps(drift) + "\n")
    _write(out / "purity.json", diag.dumps(purity) + "\n")
    _write(out / "calibration.json", diag.dumps(calib) + "\n")
    _write(out / "energy.json", diag.dumps(energy) + "\n")
    if args.baseline:
        base, _, bck = _open_checkpoint(args.baseline, args.data)
        before = fedsim.collect_diagnostics(base, top_n, n_cent)["purity"]
        pd = diag.purity_delta_to_dict(diag.purity_delta(before, rep["purity"]))
        pd.update(config_hash=h, baseline=str(bck))
        _write(out / "purity_delta.json", diag.dumps(pd) + "\n")
    print(f"diagnostics for {ck} written to {out}")
    return EXIT_OK


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def report_rows(summaries):
    """Per-seed rows plus one ``mean +- std`` row per (method, task)."""
    rows, groups = [], {}
    for s in summaries:
        key = (s["method"], s["task"])
        for seed, v in sorted(s["per_seed"].items(), key=lambda kv: int(kv[0])):
            rows.append({"method": s["method"], "task": s["task"], "metric": s["metric"],
                         "seed": seed, "value": v["test"], "std": "",
                         "config_hash": s["config_hash"]})
            groups.setdefault(key, []).append(v["test"])
    for (method, task), vals in groups.items():
        vals = np.array(vals, dtype=np.float64)
        metric = "accuracy" if task == "node_classification" else "auc"
        rows.append({"method": method, "task": task, "metric": metric, "seed": "mean",
                     "value": float(vals.mean()), "std": float(vals.std()), "config_hash": ""})
    return rows


def cmd_report(args) -> int:
    summaries = []
    for d in args.runs:
        p = Path(d) / "summary.json"
        try:
            summaries.append(json.loads(_read(p).decode("utf-8")))
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_IO, str(p), f"invalid JSON: {exc}") from None
    tasks = {s["task"] for s in summaries}
    if len(tasks) > 1:
        print("warning: runs cover different tasks; rows are kept separate", file=sys.stderr)
    buf = io.StringIO()
    fields = ("method", "task", "metric", "seed", "value", "std", "config_hash")
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in report_rows(summaries):
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    if args.out:
        _write(Path(args.out), buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def describe(buf: bytes) -> dict:
    """Summary of any container this package writes, chosen by magic."""
    magic = bytes(buf[:4])
    if magic == b"MAG1":
        data, h = gd.decode_with_hash(buf)
        g = data.graph if isinstance(data, gd.FederatedGraph) else data
        out = {"kind": "graph", "nodes": g.node_count, "edges": g.edge_count,
               "classes": g.class_count, "dims": list(map(int, g.dims)), "data_hash": h}
        if isinstance(data, gd.FederatedGraph):
            out["client_sizes"] = data.partition.sizes().tolist()
            out["cut"] = int(data.partition.cut_size)
        return out
    if magic == b"ANB1":
        bank = decode_bank(buf)
        return {"kind": "anchor_bank", "M": bank.M, "d_p": bank.d_p, "sha256": bank.digest()}
    if magic == b"SRV1":
        s = decode_server(buf)
        return {"kind": "server", "round": s.round, "config_hash": s.config_hash,
                "anchors": list(s.gap.H.shape), "controller_params": s.controller.parameter_count,
                "shared_entries": 0 if s.shared is None else len(s.shared)}
    if magic == b"CLT1":
        arrays, meta = decode_arrays(b"CLT1", buf)
        m = json.loads(meta)
        return {"kind": "clients", "round": m["round"], "seed": m["seed"],
                "config_hash": m["config_hash"], "data_hash": m["data_hash"],
                "entries": len(arrays)}
    if magic == b"STG1":
        msg = deserialize(buf)
        if hasattr(msg, "means"):
            return {"kind": "upload", "round": msg.round, "client": msg.client,
                    "active": int(msg.active.size), "sketch": msg.sketch.tolist(), "g": msg.g}
        return {"kind": "broadcast", "round": msg.round, "prototypes": list(msg.prototypes.shape),
                "controller": int(msg.controller.size), "config_hash": msg.config_hash}
    raise ParseError(f"unknown magic {magic!r}", 0)


def cmd_dump(args) -> int:
    p = Path(args.file)
    if p.is_dir():
        p = _latest_checkpoint(p) / "clients.clt"
    try:
        info = describe(_read(p))
    except ParseError as exc:
        raise CliError(EXIT_IO, str(p), str(exc)) from None
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stagefgl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (sections data, partition, ...)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", required=True)

    p = sub.add_parser("gen", help="generate, partition and perturb a graph file")
    common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="run every configured seed")
    common(p)
    p.add_argument("--data", help="graph file written by gen")
    p.add_argument("--method", choices=fedsim.METHODS)
    p.add_argument("--rounds", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("diagnose", help="drift, purity, calibration and energy reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--baseline", help="second checkpoint; emits purity_delta.json")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("report", help="merge run summaries into one CSV table")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("dump", help="describe a binary artifact")
    p.add_argument("file")
    p.set_defaults(fn=cmd_dump)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CliError as exc:
        code, path, msg = exc.code, exc.path, exc.message
    except cfgmod.ConfigError as exc:
        code, path, msg = EXIT_SCHEMA, exc.path, exc.message
    except OSError as exc:
        code, path, msg = EXIT_IO, str(exc.filename or "-"), exc.strerror or str(exc)
    print(f"ERROR {code} {path}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
