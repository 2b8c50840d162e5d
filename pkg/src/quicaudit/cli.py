"""Command line entry points.

Subcommands: probe, sweep, classify, mock-serve, chains, compress,
backscatter, campaign. Exit codes: 0 success, 1 runtime error,
2 partial failures (campaign), 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import backscatter as bs
from . import campaign as camp
from . import compression as comp
from . import mockserver
from . import probe as probe_mod
from .certs import (
    TrustStore,
    detect_cross_signed,
    detect_included_anchor,
    parse_chain,
    parent_chain_group,
    write_cert_csv,
    write_chain_csv,
    write_parent_chain_csv,
)
from .classify import LimitPolicy, classify_handshake, coalescence_report, payload_decomposition
from .errors import FramesUnavailableError, QuicAuditError
from .records import write_records_csv
from .trace import read_traces, trace_to_jsonl, write_traces


def parse_duration(text: str) -> float:
    """'30m', '45s', '1h', '0' -> seconds."""
    text = text.strip().lower()
    units = {"s": 1.0, "m": 60.0, "h": 3600.0}
    if text and text[-1] in units:
        return float(text[:-1]) * units[text[-1]]
    return float(text)


def _parse_target(text: str, default_port: int = 443) -> probe_mod.ProbeTarget:
    host, _, port = text.partition(":")
    return probe_mod.ProbeTarget(host=host, port=int(port) if port else default_port,
                                 domain=host)


def _cmd_probe(args) -> int:
    cfg = probe_mod.ProbeConfig(
        target=_parse_target(args.target),
        initial_size=args.initial_size,
        mode=probe_mod.ProbeMode.NO_ACK if args.mode == "no-ack" else probe_mod.ProbeMode.COMPLETE,
        timeout=args.timeout,
        observation_window=args.window,
        retry_enabled=not args.no_retry,
    )
    trace = probe_mod.probe_once(cfg)
    if args.out:
        write_traces([trace], args.out)
    else:
        for line in trace_to_jsonl(trace):
            print(line)
    try:
        result = classify_handshake(trace)
        print(f"# outcome={trace.outcome.value} class={result.klass.value} "
              f"factor={result.amplification_factor:.2f}", file=sys.stderr)
    except QuicAuditError as exc:
        print(f"# outcome={trace.outcome.value} not classified: {exc}", file=sys.stderr)
    return 0


def _cmd_sweep(args) -> int:
    sizes = range(args.size_from, args.size_to + 1, args.step)
    results = probe_mod.sweep(
        _parse_target(args.target),
        sizes=sizes,
        spacing=parse_duration(args.spacing),
        mode=probe_mod.ProbeMode.NO_ACK if args.mode == "no-ack" else probe_mod.ProbeMode.COMPLETE,
        timeout=args.timeout,
        observation_window=args.window,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records_csv([r.record for r in results], out_dir / "sweep.csv")
    write_traces([r.trace for r in results if r.trace is not None],
                 out_dir / "traces.jsonl")
    print(f"{len(results)} probes -> {out_dir}/sweep.csv")
    return 0


def _cmd_classify(args) -> int:
    policy = LimitPolicy[args.policy]
    failures = 0
    for trace in read_traces(args.infile):
        try:
            r = classify_handshake(trace, policy)
            line = (f"class={r.klass.value} factor={r.amplification_factor:.3f} "
                    f"server={r.pre_validation_server_bytes} "
                    f"client={r.pre_validation_client_bytes} "
                    f"flights={r.client_flights} exceeded={r.limit_exceeded} "
                    f"multi_rtt={r.multi_rtt_flag}")
            if args.decompose:
                try:
                    d = payload_decomposition(trace)
                    line += (f" tls={d.tls_bytes} headers={d.quic_header_bytes} "
                             f"padding={d.padding_bytes} ack={d.ack_overhead_bytes}")
                except FramesUnavailableError:
                    line += " (no frame visibility)"
            if args.coalescence:
                c = coalescence_report(trace)
                line += f" pkts/dgram={c.packets_per_datagram} separate_ack={c.separate_ack_flight}"
            print(line)
        except QuicAuditError as exc:
            failures += 1
            print(f"not classifiable: {exc}")
    return 1 if failures else 0


def _cmd_mock_serve(args) -> int:
    if args.spec_json:
        spec = mockserver.BehaviorSpec.from_json(Path(args.spec_json).read_text())
    else:
        spec = mockserver.preset(args.preset, chain_len=args.chain_bytes)
    server = mockserver.MockQuicServer(spec, port=args.port)
    host, port = server.address
    print(f"serving behavior {args.preset or args.spec_json!r} on {host}:{port}")
    try:
        server.serve()
        server._thread.join()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


def _load_chains(paths: list[str]):
    chains = []
    for text in paths:
        p = Path(text)
        files = sorted(p.rglob("*")) if p.is_dir() else [p]
        for f in files:
            if f.is_file() and f.suffix.lower() in (".pem", ".crt", ".der", ".bin"):
                chains.append(parse_chain(f.read_bytes(), domain=f.stem))
    if not chains:
        raise QuicAuditError(f"no certificate files under {paths}")
    return chains


def _cmd_chains(args) -> int:
    chains = _load_chains(args.inputs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_cert_csv(chains, out_dir / "certs.csv")
    write_chain_csv(chains, out_dir / "chains.csv")
    write_parent_chain_csv(parent_chain_group(chains), out_dir / "parent_chains.csv")
    print(f"{len(chains)} chains -> {out_dir}/certs.csv, chains.csv, parent_chains.csv")
    store = None
    if args.store:
        store = TrustStore.from_dir(args.store)
    elif args.bundled_store:
        store = TrustStore.bundled()
    for chain in chains:
        for f in detect_included_anchor(chain):
            print(f"{chain.domain}: delivered trust anchor {f.subject_cn!r} "
                  f"({f.byte_savings} bytes wasted)")
        if store is not None:
            for f in detect_cross_signed(chain, store):
                print(f"{chain.domain}: {f.recommendation}")
    return 0


def _cmd_compress(args) -> int:
    chains = _load_chains(args.inputs)
    algorithms = [comp.Algorithm(a) for a in args.algorithms.split(",")]
    budgets = tuple(int(b) for b in args.budgets.split(","))
    summaries, outcomes = comp.compression_report(
        chains, budgets=budgets, overhead=args.overhead, algorithms=algorithms)
    comp.write_compression_csv(outcomes, args.out, budgets=budgets)
    for s in summaries:
        fits = " ".join(f"3x{b}:{frac:.1%}" for b, frac in s.fit_fractions.items())
        print(f"{s.algorithm.value}: n={s.count} median_ratio={s.ratio_median:.1%} "
              f"mean={s.ratio_mean:.1%} fit[{fits}]")
    return 0


def _cmd_backscatter(args) -> int:
    records = bs.read_backscatter(args.infile)
    prefixes = bs.PrefixMap.from_csv(args.prefixes) if args.prefixes else None
    sessions = bs.sessionize(records, prefixes, gap_timeout=args.gap_timeout)
    dists = bs.amplification_distribution(sessions, assumed_initial=args.assumed_initial)
    bs.write_distribution_csv(dists, args.out)
    for d in dists:
        print(f"{d.provider}: sessions={d.session_count} "
              f"factor median={d.factor_median:.1f} max={d.factor_max:.1f} "
              f"duration median={d.duration_median_s:.0f}s max={d.duration_max_s:.0f}s")
    return 0


def _cmd_campaign(args) -> int:
    try:
        config = camp.PipelineConfig(
            stages=tuple(args.stages.split(",")),
            initial_size=args.initial_size,
            spacing=parse_duration(args.spacing),
            probe_timeout=args.timeout,
            resolver=args.resolver,
            concurrency=args.concurrency,
            quic_port=args.quic_port,
        )
        domains = camp.read_domain_list(args.domains)
    except (ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    result = camp.run_campaign(domains, config, args.out_dir)
    paths = camp.export(result.records, args.out_dir)
    print(f"{len(result.records)} records, {result.partial_failures} failures "
          f"-> {paths['csv']}")
    return 2 if result.partial_failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quicaudit",
                                     description="QUIC handshake and certificate auditing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probe", help="one handshake probe")
    p.add_argument("--target", required=True, help="host[:port]")
    p.add_argument("--initial-size", type=int, default=1200)
    p.add_argument("--mode", choices=["complete", "no-ack"], default="complete")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--window", type=float, default=probe_mod.DEFAULT_OBSERVATION_WINDOW)
    p.add_argument("--no-retry", action="store_true")
    p.add_argument("--out", help="trace JSONL path (default: stdout)")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("sweep", help="probe across an Initial-size grid")
    p.add_argument("--target", required=True)
    p.add_argument("--from", dest="size_from", type=int, default=1200)
    p.add_argument("--to", dest="size_to", type=int, default=1472)
    p.add_argument("--step", type=int, default=10)
    p.add_argument("--spacing", default="30m", help="pause between probes (e.g. 30m, 0)")
    p.add_argument("--mode", choices=["complete", "no-ack"], default="complete")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--window", type=float, default=probe_mod.DEFAULT_OBSERVATION_WINDOW)
    p.add_argument("--out-dir", default="sweep-out")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("classify", help="classify traces from JSONL")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--policy", choices=[m.name for m in LimitPolicy],
                   default="DATA_3X_RFC9000")
    p.add_argument("--decompose", action="store_true")
    p.add_argument("--coalescence", action="store_true")
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("mock-serve", help="run a behavior endpoint")
    p.add_argument("--preset", choices=["cloudflare", "meta", "retry", "compliant",
                                        "stall", "capped", "amplifier", "tunneled"],
                   default="compliant")
    p.add_argument("--chain-bytes", type=int, default=None)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--spec-json", help="load a BehaviorSpec from JSON instead")
    p.set_defaults(func=_cmd_mock_serve)

    p = sub.add_parser("chains", help="analyze certificate chains")
    p.add_argument("inputs", nargs="+", help="PEM/DER files or directories")
    p.add_argument("--out-dir", default="chain-out")
    p.add_argument("--store", help="trust store directory for cross-sign checks")
    p.add_argument("--bundled-store", action="store_true",
                   help="use the bundled minimal trust store")
    p.set_defaults(func=_cmd_chains)

    p = sub.add_parser("compress", help="compression fit report")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--algorithms", default="zlib,brotli,zstd")
    p.add_argument("--budgets", default="1200,1357")
    p.add_argument("--overhead", type=int, default=comp.DEFAULT_HANDSHAKE_OVERHEAD)
    p.add_argument("--out", default="compression.csv")
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("backscatter", help="sessionize telescope records")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--prefixes", help="CSV prefix,provider")
    p.add_argument("--assumed-initial", type=int, default=1362)
    p.add_argument("--gap-timeout", type=float, default=bs.SESSION_GAP_TIMEOUT)
    p.add_argument("--out", default="backscatter.csv")
    p.set_defaults(func=_cmd_backscatter)

    p = sub.add_parser("campaign", help="run the scan pipeline over a domain list")
    p.add_argument("--domains", required=True, help="CSV: rank,domain")
    p.add_argument("--stages", default="dns,https,quic")
    p.add_argument("--initial-size", type=int, default=1362)
    p.add_argument("--spacing", default="30m")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--resolver", help=f"resolver host[:port] (or ${camp.RESOLVER_ENV_VAR})")
    p.add_argument("--concurrency", type=int, default=camp.DEFAULT_CONCURRENCY)
    p.add_argument("--quic-port", type=int, default=443)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_campaign)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except QuicAuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
