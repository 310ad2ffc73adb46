"""Command-line entry point: ``ims-dsl <subcommand>``.

Subcommands::

    run-core        serve the simulated core over UDP (plus XCAP over HTTP)
    run-scenario    execute an .ims script
    trace-collect   accept trace streams and write a session file
    trace-render    turn a session file into a Mermaid sequence diagram

Exit codes: 0 success, 1 unexpected error, 2 bad configuration or
unreadable input, 3 address bind failure, 4 script syntax error,
5 script runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
from pathlib import Path

from .config import ConfigError, ProvisioningConfig
from .errors import AddressInUse, ScriptRuntimeError, ScriptSyntaxError, UnknownBinding
from .transport import split_address

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BIND = 3
EXIT_SYNTAX = 4
EXIT_RUNTIME = 5

DEFAULT_CORE = "127.0.0.1:5060"
DEFAULT_COLLECTOR = "127.0.0.1:5070"


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _load_config(args) -> ProvisioningConfig:
    path = args.config or os.environ.get("IMS_DSL_CONFIG")
    if not path:
        raise _Exit(EXIT_CONFIG, "no provisioning config: pass --config or set IMS_DSL_CONFIG")
    try:
        config = ProvisioningConfig.load(path)
    except ConfigError as exc:
        raise _Exit(EXIT_CONFIG, f"bad config: {exc}") from None
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    return config


def _stop_on_term() -> None:
    def handler(signum, frame):
        raise KeyboardInterrupt
    signal.signal(signal.SIGTERM, handler)


def _print(line: str) -> None:
    print(line, flush=True)


def cmd_run_core(args) -> int:
    from .core import ImsCore
    from .loop import EventLoop
    from .transport import UdpNetwork
    from .xcap import XcapServer

    config = _load_config(args)
    if args.transport != "udp":
        raise _Exit(EXIT_CONFIG, "run-core serves over UDP; use --transport udp")
    loop = EventLoop("real")
    network = UdpNetwork(loop)
    try:
        core = ImsCore(loop, network, config, address=args.core or DEFAULT_CORE)
    except AddressInUse as exc:
        raise _Exit(EXIT_BIND, f"cannot bind core: {exc}") from None
    host, port = split_address(core.endpoint)
    try:
        xcap = XcapServer((host, port), core)
    except OSError as exc:
        core.close()
        raise _Exit(EXIT_BIND, f"cannot bind XCAP on {host}:{port}: {exc}") from None
    xcap.start()
    core.on_route = _print
    _print(f"core listening on {core.endpoint}")
    _stop_on_term()
    try:
        loop.run_forever()
    except KeyboardInterrupt:
        pass
    finally:
        xcap.shutdown()
        xcap.server_close()
        core.close()
    return EXIT_OK


def cmd_run_scenario(args) -> int:
    from .dsl import Ims
    from .interpreter import Environment, execute, parse_script
    from .trace import Tracer, emit_diagram, group

    config = _load_config(args)
    try:
        text = Path(args.script).read_text(encoding="utf-8")
    except OSError as exc:
        raise _Exit(EXIT_CONFIG, f"cannot read script: {exc}") from None
    try:
        script = parse_script(text)
    except ScriptSyntaxError as exc:
        raise _Exit(EXIT_SYNTAX, f"{args.script}: syntax error: {exc}") from None

    if args.transport == "udp":
        import time
        tracer = Tracer(enabled=args.trace, clock=time.time)
        ims = Ims.over_udp(config, args.core or DEFAULT_CORE, tracer=tracer)
    else:
        ims = Ims.simulated(config, trace=args.trace)
        tracer = ims.tracer
    if args.collector and args.trace:
        tracer.connect(*split_address(args.collector))

    try:
        env = execute(script, Environment(ims))
        ims.settle()
        _print("scenario complete")
        for line in env.log:
            _print(line)
        if args.linger:
            _stop_on_term()
            try:
                ims.run_for(args.linger)
            except KeyboardInterrupt:
                pass
    except (ScriptRuntimeError, UnknownBinding) as exc:
        raise _Exit(EXIT_RUNTIME, f"{args.script}: {exc}") from None
    finally:
        tracer.flush()
        tracer.close()
        ims.close()
    if args.diagram:
        Path(args.diagram).write_text(emit_diagram(group(tracer.events)), encoding="utf-8")
    return EXIT_OK


def cmd_trace_collect(args) -> int:
    from .trace import CollectorServer

    address = args.collector or DEFAULT_COLLECTOR
    try:
        server = CollectorServer(split_address(address), args.output)
    except OSError as exc:
        raise _Exit(EXIT_BIND, f"cannot bind collector on {address}: {exc}") from None
    host, port = server.server_address[:2]
    _print(f"collector listening on {host}:{port}")
    _stop_on_term()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_trace_render(args) -> int:
    from .trace import collect, dump_group, emit_diagram, group, load_session

    try:
        streams, offsets = load_session(args.session)
        events = collect(streams, offsets)
    except (OSError, ValueError, KeyError) as exc:
        raise _Exit(EXIT_CONFIG, f"cannot read session {args.session}: {exc}") from None
    except Exception as exc:  # HandshakeMissing and friends
        raise _Exit(EXIT_CONFIG, f"invalid session {args.session}: {exc}") from None
    groups = group(events)
    if args.dump:
        try:
            text = dump_group(groups, args.dump)
        except KeyError:
            raise _Exit(EXIT_CONFIG, f"no group with key {args.dump!r}") from None
    else:
        participants = args.participants.split(",") if args.participants else None
        text = emit_diagram(groups, participants)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="provisioning JSON (falls back to $IMS_DSL_CONFIG)")
    common.add_argument("--core", help=f"core address host:port (default {DEFAULT_CORE})")
    common.add_argument("--collector", help="trace collector address host:port")
    common.add_argument("--trace", type=_on_off, default=True, metavar="on|off")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ims-dsl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-core", parents=[common], help="serve the simulated core")
    p.add_argument("--transport", choices=["in-memory", "udp"], default="udp")
    p.set_defaults(func=cmd_run_core)

    p = sub.add_parser("run-scenario", parents=[common], help="execute an .ims script")
    p.add_argument("script")
    p.add_argument("--transport", choices=["in-memory", "udp"], default="in-memory")
    p.add_argument("--linger", type=float, default=0.0,
                   help="keep serving handlers for this many seconds after the script ends")
    p.add_argument("--diagram", help="write the local trace as Mermaid to this file")
    p.set_defaults(func=cmd_run_scenario)

    p = sub.add_parser("trace-collect", parents=[common], help="run the trace collector")
    p.add_argument("--output", default="session.trace.jsonl", help="session file to append to")
    p.set_defaults(func=cmd_trace_collect)

    p = sub.add_parser("trace-render", parents=[common], help="render a session file")
    p.add_argument("session")
    p.add_argument("--dump", metavar="KEY", help="print the raw messages of one group")
    p.add_argument("--participants", help="comma-separated participant order")
    p.add_argument("--output", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_trace_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except _Exit as exc:
        print(f"ims-dsl: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
