"""Command-line entry point.

Exit codes: 0 success, 1 bad input (one-line diagnosis on stderr),
2 a verification that ran and failed.
"""

from __future__ import annotations

import argparse
import logging
import random
import statistics
import sys
import time
from pathlib import Path

from . import model, netsim
from .crypto import KeyPair, SuiteId
from .identity import (
    CertificateError,
    ClockPolicy,
    Identifier,
    Locator,
    decode_certificate,
    generate_certificate,
    verify,
)
from .model import Scenario

EXIT_OK, EXIT_INPUT, EXIT_VERIFY = 0, 1, 2


class UsageError(Exception):
    pass


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _locator(text: str) -> Locator:
    try:
        return Locator.parse(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an IP address: {text!r}") from None


def _identifier(text: str) -> Identifier:
    try:
        return Identifier.parse(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an identifier: {text!r}") from None


def _suite(text: str) -> SuiteId:
    try:
        return SuiteId.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def cmd_keygen(args) -> int:
    kp = KeyPair.generate(args.bits, seed=args.seed)
    Path(args.out).write_bytes(kp.to_bytes())
    print(f"wrote {args.bits}-bit key pair to {args.out}")
    return EXIT_OK


def cmd_cert_make(args) -> int:
    try:
        kp = KeyPair.from_bytes(_read(args.key))
    except ValueError as exc:
        raise UsageError(f"bad key file: {exc}") from None
    now = int(args.now if args.now is not None else time.time())
    cert, id_src = generate_certificate(
        kp, args.loc_src, args.loc_dst, args.id_dst, args.duration, now, args.suite
    )
    Path(args.out).write_bytes(cert.encoded)
    print(id_src)
    return EXIT_OK


def cmd_cert_verify(args) -> int:
    try:
        cert = decode_certificate(_read(args.cert))
    except CertificateError as exc:
        print(f"reject: malformed certificate ({exc})")
        return EXIT_VERIFY
    own = set(args.own_id) if args.own_id else {cert.id_dst}
    now = args.now if args.now is not None else time.time()
    policy = ClockPolicy(args.clock_error, args.max_duration)
    verdict = verify(cert, args.id_src, own, now, policy)
    print("accept" if verdict else f"reject: {verdict.value}")
    return EXIT_OK if verdict else EXIT_VERIFY


def cmd_puzzle_bench(args) -> int:
    from .puzzle import PuzzleIssuer, birthday_trials, expected_trials, solve

    rng = random.Random(args.seed)
    issuer = PuzzleIssuer(keygen=lambda: rng.randbytes(32))
    print("k_bm,runs,mean_trials,model_2^(k-1),birthday_2^(k/2),mean_ms")
    for k in args.kbm:
        trials, elapsed = [], 0.0
        for _ in range(args.runs):
            a = Identifier.from_tag(rng.getrandbits(121))
            b = Identifier.from_tag(rng.getrandbits(121))
            ch = issuer.issue(a, b, k, args.l, 0.0)
            t = time.perf_counter()
            trials.append(solve(ch, a, b).trials)
            elapsed += time.perf_counter() - t
        print(
            f"{k},{args.runs},{statistics.fmean(trials):.1f},{expected_trials(k):g},"
            f"{birthday_trials(k):g},{1000 * elapsed / args.runs:.3f}"
        )
    return EXIT_OK


def cmd_model(args) -> int:
    overrides = {k: v for k, v in (("r_a", args.r_a), ("a_f", args.a_f), ("r", args.r), ("r_shap", args.r_shap)) if v is not None}
    params = model.preset(args.preset, **overrides)
    paths = model.write_model_outputs(Path(args.out), params, args.preset)
    for s in Scenario:
        print(f"scenario {s.value} ({s.name}): R_v = {model.victim_bandwidth(params, s) / 1e6:.2f} Mbps")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_sim(args) -> int:
    overrides = {"scenario": args.scenario, "seed": args.seed, "duration": args.duration, "r_a": args.r_a}
    try:
        if args.config:
            cfg = netsim.load_config(args.config, **overrides)
        else:
            cfg = netsim.config_from_mapping({k: v for k, v in overrides.items() if v is not None})
    except (netsim.ConfigError, OSError) as exc:
        raise UsageError(str(exc)) from None
    metrics = netsim.run(cfg, keep_labels=args.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics.to_csv())
    if args.labels:
        (out / "labels.csv").write_text(metrics.labels_csv())
    print(
        f"scenario {cfg.scenario.value}: victim_rx_bps={metrics.victim_rx_bps:.0f} "
        f"model={cfg.expected_victim_bps():.0f} fp={metrics.victim_false_positive} "
        f"fn={metrics.victim_false_negative}"
    )
    return EXIT_OK


def cmd_demo_serve(args) -> int:
    from .endpoint import PuzzlePolicy, Server, ServerConfig
    from .transport import UdpServer

    config = ServerConfig(
        locator=args.locator,
        puzzle_policy=PuzzlePolicy.NEVER if args.no_puzzles else PuzzlePolicy.ALWAYS,
        k_bm=args.kbm,
        suite=args.suite,
        responder=lambda payload: b"ok:" + payload,
    )
    server = Server(config, now=time.time())
    udp = UdpServer(server, args.port)
    print(f"serving {server.id} on {args.locator}:{udp.port}", flush=True)
    if args.id_file:
        Path(args.id_file).write_text(f"{server.id}\n")
    udp.start()
    try:
        if args.seconds:
            time.sleep(args.seconds)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        udp.stop()
    print(f"delivered {server.counters['deliver'] + server.counters['reply']} request(s)")
    return EXIT_OK


def cmd_demo_send(args) -> int:
    from .endpoint import ClientState
    from .transport import udp_exchange

    kp = KeyPair.from_bytes(_read(args.key)) if args.key else KeyPair.generate()
    try:
        session = udp_exchange(
            kp, args.locator, args.server_id, args.server_locator, args.payload.encode(),
            port=args.port, timeout=args.timeout,
        )
    except TimeoutError as exc:
        print(f"failed: {exc}")
        return EXIT_VERIFY
    if session.state is not ClientState.ESTABLISHED:
        print(f"failed: {session.failure}")
        return EXIT_VERIFY
    print(f"established as {session.id_src} after {session.trials} trials; reply {session.replies[-1]!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eip", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("keygen", help="write an RSA key pair file")
    s.add_argument("--out", required=True)
    s.add_argument("--bits", type=int, default=1024)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("cert-make", help="issue a certificate and print the source identifier")
    s.add_argument("--key", required=True)
    s.add_argument("--loc-src", type=_locator, required=True)
    s.add_argument("--loc-dst", type=_locator, required=True)
    s.add_argument("--id-dst", type=_identifier, required=True)
    s.add_argument("--duration", type=int, default=1800)
    s.add_argument("--now", type=int)
    s.add_argument("--suite", type=_suite, default=SuiteId.HMAC_SHA3_256)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cert_make)

    s = sub.add_parser("cert-verify", help="run the receiver checks on a certificate file")
    s.add_argument("--cert", required=True)
    s.add_argument("--id-src", type=_identifier, required=True)
    s.add_argument("--own-id", type=_identifier, action="append")
    s.add_argument("--now", type=float)
    s.add_argument("--clock-error", type=int, default=5)
    s.add_argument("--max-duration", type=int, default=4 * 3600)
    s.set_defaults(func=cmd_cert_verify)

    s = sub.add_parser("puzzle-bench", help="mean solver trials per difficulty")
    s.add_argument("--kbm", type=int, nargs="+", default=[8, 12, 16])
    s.add_argument("--runs", type=int, default=200)
    s.add_argument("--l", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_puzzle_bench)

    s = sub.add_parser("model", help="write table2/fig2/fig3 CSVs")
    s.add_argument("--preset", choices=sorted(model.PRESETS), default="paper-text")
    s.add_argument("--out", default=".")
    s.add_argument("--r-a", type=float)
    s.add_argument("--a-f", type=float)
    s.add_argument("--r", type=float)
    s.add_argument("--r-shap", type=float)
    s.set_defaults(func=cmd_model)

    s = sub.add_parser("sim", help="run the attack simulation")
    s.add_argument("--config")
    s.add_argument("--scenario", type=Scenario.parse)
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--r-a", type=float)
    s.add_argument("--labels", action="store_true", help="also dump ground-truth labels")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_sim)

    s = sub.add_parser("demo-serve", help="run a UDP EIP server")
    s.add_argument("--locator", type=_locator, default=Locator.parse("127.0.0.1"))
    s.add_argument("--port", type=int, default=4342)
    s.add_argument("--kbm", type=int, default=12)
    s.add_argument("--suite", type=_suite, default=SuiteId.HMAC_SHA3_256)
    s.add_argument("--no-puzzles", action="store_true")
    s.add_argument("--id-file")
    s.add_argument("--seconds", type=float, default=0.0)
    s.set_defaults(func=cmd_demo_serve)

    s = sub.add_parser("demo-send", help="send one request to a UDP EIP server")
    s.add_argument("--locator", type=_locator, default=Locator.parse("127.0.0.2"))
    s.add_argument("--server-locator", type=_locator, default=Locator.parse("127.0.0.1"))
    s.add_argument("--server-id", type=_identifier, required=True)
    s.add_argument("--port", type=int, default=4342)
    s.add_argument("--key")
    s.add_argument("--payload", default="hello")
    s.add_argument("--timeout", type=float, default=5.0)
    s.set_defaults(func=cmd_demo_send)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
