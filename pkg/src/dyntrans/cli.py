"""Command line: ``python -m dyntrans <command> ...``.

Commands print machine-readable JSON on stdout and a short human summary
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .collaborative import MODES
from .config import ExperimentConfig, load_config
from .data import gen_corpus, read_dataset, write_dataset
from .decoding import CostClock, SwitchPlan, dynamic_switch_decode, simulate_burst, stream_decode
from .experiment import init_run, run_training
from .metrics import corpus_wer, latency_report, to_json
from .model import DetModel, export_pruned

log = logging.getLogger("dyntrans")


# -- helpers ------------------------------------------------------------------------

def _experiment_from_ckpt(ck: Checkpoint) -> ExperimentConfig:
    return ExperimentConfig.from_dict(ck.config["experiment"])


def _ckpt_config(cfg: ExperimentConfig, model: DetModel, **run) -> dict:
    return {"experiment": cfg.to_dict(), "model": model.cfg.to_dict(), "run": run}


def parse_encoder_spec(spec: str, model: DetModel):
    """``full``, ``enc:<i>``, ``pruned:<plan>`` or ``switch:<K_ms>,<small>,<full>``.

    Encoder ids on the command line are 1-based (1 is the full encoder).
    Returns ``("single", encoder, label)`` or ``("switch", K_ms, begin, rest)``
    with 0-based ids.
    """
    if spec == "full":
        return "single", model.encoder(0), "enc1"
    kind, _, arg = spec.partition(":")
    if kind == "enc":
        i = int(arg) - 1
        return "single", model.encoder(i), f"enc{i + 1}"
    if kind == "pruned":
        return "single", model.pruned(arg), f"pruned:{arg}"
    if kind == "switch":
        try:
            k_ms, small, full = arg.split(",")
            k_ms, small, full = float(k_ms), int(small) - 1, int(full) - 1
        except ValueError:
            raise ValueError(f"malformed switch spec {spec!r}; want switch:<K_ms>,<small>,<full>") from None
        for i in (small, full):
            if not 0 <= i < model.num_encoders:
                raise ValueError(f"encoder id {i + 1} outside 1..{model.num_encoders}")
        return "switch", k_ms, small, full
    raise ValueError(f"unknown encoder spec {spec!r}")


def decode_utterances(model: DetModel, utts, spec: str, burst_ms: float = 0.0, clock: CostClock | None = None,
                      cache_policy: str = "carry_shared", max_symbols: int = 4):
    parsed = parse_encoder_spec(spec, model)
    ecfg = model.ecfg
    traces = []
    for u in utts:
        T = u.num_frames
        B = min(T, int(burst_ms // ecfg.frame_ms))
        arrival = simulate_burst(T, B, ecfg.frame_ms)
        if parsed[0] == "single":
            _, enc, label = parsed
            tr = stream_decode(u.features, enc, model.predictor, model.joiner, arrival, utt_id=u.id,
                               encoder_id=label, clock=clock, max_symbols=max_symbols)
        else:
            _, k_ms, small, full = parsed
            plan = SwitchPlan.from_ms(k_ms, ecfg.frame_ms, ecfg.segment_frames, small, full, cache_policy)
            plan = plan.for_length(T, ecfg.segment_frames)
            tr = dynamic_switch_decode(u.features, model, plan, arrival, utt_id=u.id, clock=clock,
                                       max_symbols=max_symbols)
        traces.append(tr)
    return traces


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    n = cfg.data.num_utterances if args.num is None else args.num
    utts = gen_corpus(args.seed, n, cfg.data.gen, prefix=f"s{args.seed}_")
    write_dataset(args.out, utts)
    frames = sum(u.num_frames for u in utts)
    print(to_json({"path": str(args.out), "utterances": n, "frames": frames, "seed": args.seed}))
    print(f"wrote {n} utterances ({frames} frames) to {args.out}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    utts = read_dataset(args.data)
    if not utts:
        raise SystemExit("training set is empty")
    if args.resume:
        ck = load_checkpoint(args.resume)
        cfg = _experiment_from_ckpt(ck)
        run_meta = ck.config["run"]
        if run_meta["mode"] != args.mode:
            raise SystemExit(f"checkpoint was trained in mode {run_meta['mode']}")
        seed = run_meta["seed"]
        run = init_run(cfg, args.mode, seed, ck.config["model"]["depths"])
        run.model = ck.build_model()
        run.state, run.rng = ck.state, ck.rng
    else:
        cfg = load_config(args.config)
        seed = args.seed
        run = init_run(cfg, args.mode, seed)
    if args.steps is not None:
        cfg.train.steps = args.steps
    loss_cfg = cfg.loss_config(args.mode)
    run_training(run, cfg, utts, loss_cfg, data_seed=seed, log_every=args.log_every)
    save_checkpoint(args.out, run.model, _ckpt_config(cfg, run.model, mode=args.mode, seed=seed),
                    run.state, run.rng)
    last = run.history[-1] if run.history else {}
    print(to_json({"checkpoint": str(args.out), "step": run.state.step, "last": last}))
    print(f"trained to step {run.state.step}; saved {args.out}", file=sys.stderr)
    return 0


def cmd_decode(args) -> int:
    model = load_checkpoint(args.ckpt).build_model()
    utts = read_dataset(args.data)
    traces = decode_utterances(model, utts, args.encoder, args.burst_ms, CostClock(args.clock),
                               args.cache_policy, args.max_symbols)
    with open(args.out, "w") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_dict(), sort_keys=True) + "\n")
    print(to_json({"out": str(args.out), "utterances": len(traces)}))
    print(f"decoded {len(traces)} utterances -> {args.out}", file=sys.stderr)
    return 0


def cmd_evaluate(args) -> int:
    refs = {u.id: u.tokens for u in read_dataset(args.ref)}
    hyps = {}
    for line in Path(args.hyp).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            hyps[rec["utt_id"]] = rec["tokens"]
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise SystemExit(f"{len(missing)} reference utterances have no hypothesis (e.g. {missing[0]})")
    rep = corpus_wer((refs[k], hyps[k]) for k in sorted(refs))
    print(to_json(rep.to_dict()))
    print(f"WER {100 * rep.wer:.2f}%  (S={rep.substitutions} D={rep.deletions} I={rep.insertions} "
          f"N={rep.ref_len})", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    model = load_checkpoint(args.ckpt).build_model()
    utts = read_dataset(args.data)
    traces = decode_utterances(model, utts, args.encoder, args.burst_ms, CostClock(args.clock),
                               args.cache_policy)
    rep = latency_report(traces)
    out = {"encoder": args.encoder, "burst_ms": args.burst_ms, "clock": args.clock, **rep.to_dict()}
    out["flops_per_utt"] = [tr.total_flops for tr in traces]
    print(to_json(out))
    s = rep.summary()
    print(f"RTF mean {s['rtf']['mean']:.3f} p99 {s['rtf']['p99']:.3f} | "
          f"SPL mean {s['spl_ms']['mean']:.1f} ms p99 {s['spl_ms']['p99']:.1f} ms | "
          f"MACs {s['total_flops']}", file=sys.stderr)
    return 0


def cmd_export(args) -> int:
    ck = load_checkpoint(args.ckpt)
    model = ck.build_model()
    out = export_pruned(model, args.plan)
    cfg = ck.config.get("experiment")
    save_checkpoint(args.out, out, {"experiment": cfg, "model": out.cfg.to_dict(),
                                    "run": {**ck.config.get("run", {}), "exported_plan": args.plan}})
    print(to_json({"out": str(args.out), "depth": out.cfg.depths[0],
                   "encoder_params": out.encoder_param_count()}))
    print(f"exported {out.cfg.depths[0]}-layer encoder -> {args.out}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m dyntrans", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic DETD dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num", type=int, help="override data.num_utterances")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and write a DETC checkpoint")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=MODES, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, help="total update count (overrides train.steps)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    enc_help = "full | enc:<i> | pruned:<plan> | switch:<K_ms>,<small>,<full> (ids 1-based)"
    d = sub.add_parser("decode", help="streaming greedy decode to JSON lines")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--encoder", default="full", help=enc_help)
    d.add_argument("--out", required=True)
    d.add_argument("--burst-ms", type=float, default=0.0)
    d.add_argument("--clock", choices=("model", "wall"), default="model")
    d.add_argument("--cache-policy", choices=("carry_shared", "reset_all"), default="carry_shared")
    d.add_argument("--max-symbols", type=int, default=4)
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("evaluate", help="corpus WER of a decode against references")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="latency (RTF, SPL proxy) and MAC counts")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--burst-ms", type=float, default=0.0)
    b.add_argument("--encoder", default="full", help=enc_help)
    b.add_argument("--clock", choices=("model", "wall"), default="model")
    b.add_argument("--cache-policy", choices=("carry_shared", "reset_all"), default="carry_shared")
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("export", help="write a standalone pruned checkpoint")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--plan", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
