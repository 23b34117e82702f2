"""Command line entry points: run, serve, inspect, export."""

import argparse
import json
import sys

from .pipeline import PipelineConfig, RunStatus, run_pipeline
from .snapshot import load_snapshot


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="concept-probe")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the pipeline and persist a snapshot")
    run_p.add_argument("--config", required=True, help="pipeline config JSON file")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--out", default="snapshots", help="snapshot output root")

    serve_p = sub.add_parser("serve", help="serve a snapshot over HTTP")
    serve_p.add_argument("--snapshot", required=True, help="snapshot directory")
    serve_p.add_argument("--addr", default="127.0.0.1:8000", help="host:port to bind")
    serve_p.add_argument("--static", default=None, help="optional static frontend directory")

    inspect_p = sub.add_parser("inspect", help="summarize a snapshot")
    inspect_p.add_argument("--snapshot", required=True)
    inspect_p.add_argument("--class", dest="class_k", type=int, default=None)

    export_p = sub.add_parser("export", help="export a snapshot to a single document")
    export_p.add_argument("--snapshot", required=True)
    export_p.add_argument("--format", choices=["json"], default="json")
    export_p.add_argument("--out", default="-", help="output file, '-' for stdout")

    args = parser.parse_args(argv)
    if args.command == "run":
        return _run(args)
    if args.command == "serve":
        return _serve(args)
    if args.command == "inspect":
        return _inspect(args)
    return _export(args)


def _run(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if args.seed is not None:
        doc["seed"] = args.seed
    config = PipelineConfig.from_dict(doc)
    status = RunStatus(run_id="cli")
    snapshot = run_pipeline(config, args.out, status)
    for warning in status.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"{args.out}/{snapshot.snapshot_id}")
    return 0


def _serve(args) -> int:
    import uvicorn

    from .service import ServingState, create_app

    host, _, port = args.addr.rpartition(":")
    state = ServingState(args.snapshot)
    app = create_app(state)
    if args.static:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=args.static, html=True), name="frontend")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
    return 0


def _inspect(args) -> int:
    snapshot = load_snapshot(args.snapshot)
    doc = snapshot.manifest
    print(f"snapshot {doc['snapshot_id']}")
    print(f"created  {doc['created_at']}")
    print(f"layer    {doc['layer']}, seed {doc['config']['seed']}")
    names = doc["dataset"]["class_names"]
    print(f"classes  {len(names)}: {', '.join(names)}")
    print(f"concepts {len(doc['concepts'])} retained, {len(doc['discarded_concepts'])} discarded")
    print(f"clusters {len(doc['clusters'])} (k={doc['silhouette']['selected_k']})")
    for concept in doc["concepts"]:
        if args.class_k is not None and concept["class_k"] != args.class_k:
            continue
        stats = concept["tcav"]
        print(
            f"  {concept['concept_id']:<30} class {names[concept['class_k']]:<10}"
            f" size {concept['size']:>5}  score {stats['mean_score']:.3f}"
            f"  p {stats['p_value']:.3g}  cluster {concept['cluster_id']}"
        )
    if doc["warnings"]:
        print(f"warnings ({len(doc['warnings'])}):")
        for warning in doc["warnings"]:
            print(f"  {warning}")
    return 0


def _export(args) -> int:
    snapshot = load_snapshot(args.snapshot)
    doc = dict(snapshot.manifest)
    doc["tensors"] = {
        name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
        for name, arr in snapshot.tensors.items()
    }
    payload = json.dumps(doc, indent=1, sort_keys=True)
    if args.out == "-":
        print(payload)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
