#!/usr/bin/env python3
"""
RTS-DOA command line.

    simulate     --config C --seed S --out DIR
    train        --config C --data DIR --out CKPT
    eval         --ckpt CKPT --data DIR --json OUT
    infer        --ckpt CKPT --mix WAV --anchor WAV [--server URL]
    baseline     --method srp-phat --data DIR --json OUT
    serve        --ckpt CKPT [--host H --port P]
    make-corpus  --out DIR --speakers N --utterances K --seed S
    count-params --config C
    gradcheck
"""
import argparse
import json
import os
import sys

import requests
from dotenv import load_dotenv

from config import load_config
from run_log import status

# Load environment variables
load_dotenv()


def _metrics_out(report, json_path):
    if json_path:
        report.save(json_path)
        status(f"Metrics written to {json_path}", "success")
    print(report.to_json())


def cmd_simulate(args):
    from dataset import synthesize_dataset

    config = load_config(args.config)
    manifests = synthesize_dataset(config, seed=args.seed, out_dir=args.out, workers=args.workers, quiet=args.quiet)
    total = sum(len(entries) for entries in manifests.values())
    status(f"Synthesized {total} scenes into {args.out}", "success")


def cmd_train(args):
    from trainer import train

    config = load_config(args.config)
    result = train(config, args.data, args.out, quiet=args.quiet)
    status(f"Trained {result.epochs_run} epochs; best dev loss {result.best_dev_loss:.4f}", "success")


def cmd_eval(args):
    from trainer import evaluate

    config = load_config(args.config) if args.config else None
    report = evaluate(args.ckpt, args.data, split=args.split, config=config, pooled=args.pooled or None, quiet=args.quiet)
    _metrics_out(report, args.json)


def remote_infer(server, mix_path, anchor_path, timeout=300):
    """POST the WAV files to a running service; returns frame records"""
    with open(mix_path, "rb") as mix, open(anchor_path, "rb") as anchor:
        response = requests.post(
            f"{server.rstrip('/')}/infer", files={"mix": mix, "anchor": anchor}, timeout=timeout
        )
    payload = response.json()
    if response.status_code != 200:
        raise RuntimeError(f"server returned {response.status_code}: {payload.get('error', payload)}")
    return [(f["time_s"], f["class"], f["angle"]) for f in payload["frames"]]


def cmd_infer(args):
    from trainer import format_records, infer

    if args.server:
        records = remote_infer(args.server, args.mix, args.anchor)
        if args.out:
            with open(args.out, "w") as handle:
                handle.write(format_records(records) + "\n")
    else:
        if not args.ckpt:
            raise ValueError("infer needs --ckpt or --server")
        config = load_config(args.config) if args.config else None
        records = infer(args.ckpt, args.mix, args.anchor, config=config, out_path=args.out)
    print(format_records(records))


def cmd_baseline(args):
    from trainer import evaluate_baseline

    config = load_config(args.config)
    report = evaluate_baseline(args.method, args.data, config, split=args.split, pooled=args.pooled, quiet=args.quiet)
    _metrics_out(report, args.json)


def cmd_serve(args):
    if args.ckpt:
        os.environ["RTSDOA_CHECKPOINT"] = args.ckpt
    if args.config:
        os.environ["RTSDOA_CONFIG"] = args.config
    import app

    app.model_manager = app.get_model_manager(reload=True)
    status(f"Starting server on {args.host}:{args.port}", "progress")
    app.app.run(host=args.host, port=args.port)


def cmd_make_corpus(args):
    from corpus import make_synthetic_corpus

    pool = make_synthetic_corpus(
        args.out, args.speakers, args.utterances, args.seed, args.min_duration, args.max_duration
    )
    status(f"Wrote {len(pool)} utterances from {len(pool.speakers)} speakers and {len(pool.noise)} noise clips", "success")


def cmd_count_params(args):
    from model import count_macs, count_parameters

    config = load_config(args.config)
    params = count_parameters(config.model)
    macs = count_macs(config.model)
    print(json.dumps({"parameters": params, "parameters_m": round(params / 1e6, 3), "macs_per_second": macs, "gmacs_per_second": round(macs / 1e9, 3)}, indent=2))


def cmd_gradcheck(args):
    from trainer import gradient_check

    report = gradient_check(tolerance=args.tolerance, seed=args.seed)
    for name, error in sorted(report.errors.items()):
        print(f"{'✅' if error < report.tolerance else '❌'} {name}: {error:.2e}")
    if not report.passed:
        raise ValueError(f"gradient check failed for {len(report.failing())} parameters (max error {report.max_error:.2e})")
    status(f"Gradient check passed (max relative error {report.max_error:.2e})", "success")


def build_parser():
    parser = argparse.ArgumentParser(prog="rtsdoa", description="Target-speaker DOA estimation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scene dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the network")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json")
    p.add_argument("--config")
    p.add_argument("--split", default="test")
    p.add_argument("--pooled", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="per-frame DOA stream for one mixture")
    p.add_argument("--ckpt")
    p.add_argument("--mix", required=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--server", help="URL of a running `serve` instance")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("baseline", help="score a classical baseline")
    p.add_argument("--method", default="srp-phat", choices=["srp-phat", "oracle", "silence"])
    p.add_argument("--data", required=True)
    p.add_argument("--json")
    p.add_argument("--config")
    p.add_argument("--split", default="test")
    p.add_argument("--pooled", action="store_true")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("serve", help="HTTP inference service")
    p.add_argument("--ckpt")
    p.add_argument("--config")
    p.add_argument("--host", default=os.getenv("FLASK_HOST", "0.0.0.0"))
    p.add_argument("--port", type=int, default=int(os.getenv("FLASK_PORT", "5000")))
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("make-corpus", help="write a synthetic speaker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=12)
    p.add_argument("--utterances", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-duration", type=float, default=3.0)
    p.add_argument("--max-duration", type=float, default=6.0)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("count-params", help="parameter and MAC counts")
    p.add_argument("--config")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of the miniature model")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    for action in sub.choices.values():
        action.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError, requests.RequestException) as e:
        status(f"{args.command} failed: {e}", "error")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
