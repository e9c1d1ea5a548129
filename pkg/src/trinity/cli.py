"""Command-line entry point: ``trinity <subcommand> ...``.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import socket
import sys

from .config import ConfigError, load_config
from .data_model import compile_dictionary, load_schema_file, schema_to_doc
from .errors import TrinityError

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _read_input(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


class Client:
    """Blocking NDJSON client; one request in flight at a time."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")
        self._ids = 0

    def call(self, verb: str, body: dict | None = None) -> dict:
        self._ids += 1
        return self.send({"id": self._ids, "verb": verb, "body": body or {}})

    def send(self, msg) -> dict:
        self.sock.sendall((json.dumps(msg, separators=(",", ":")) + "\n").encode())
        line = self.rfile.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        return json.loads(line)

    def send_raw(self, line: str) -> dict:
        self.sock.sendall((line.rstrip("\n") + "\n").encode())
        reply = self.rfile.readline()
        if not reply:
            raise ConnectionError("server closed the connection")
        return json.loads(reply)

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()


def _connect(args) -> Client:
    cfg = load_config(args.config)
    host, port = cfg.host, cfg.port
    if args.addr:
        h, _, p = args.addr.rpartition(":")
        try:
            host, port = h or host, int(p)
        except ValueError:
            raise UsageError(f"bad address {args.addr!r}") from None
    return Client(host, port)


# -- subcommands ---------------------------------------------------------------------


def cmd_serve(args) -> int:
    from .service import Server, Service

    cfg = load_config(args.config)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    service = Service(cfg)
    server = Server(service)
    logging.getLogger("trinity").info("listening on %s (durability=%s, data_dir=%s)",
                                      cfg.listen, cfg.durability, cfg.data_dir)
    print(f"listening {cfg.listen}", flush=True)
    try:
        server.serve()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_client_exec(args) -> int:
    text = _read_input(args.file)
    client = _connect(args)
    failed = False
    try:
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            reply = client.send_raw(line)
            failed |= not reply.get("ok", False)
            print(json.dumps(reply, separators=(",", ":")))
    finally:
        client.close()
    return EXIT_ERROR if failed else EXIT_OK


def cmd_schema_apply(args) -> int:
    schemas = load_schema_file(_read_input(args.file))
    d = compile_dictionary(schemas)
    if args.check:
        for name in sorted(d.entities):
            print(f"{name}: {d.binding(name).value}")
        return EXIT_OK
    client = _connect(args)
    try:
        reply = client.call("schema.apply", {"schemas": [schema_to_doc(s) for s in schemas]})
    finally:
        client.close()
    if not reply["ok"]:
        print(f"{reply['error']['code']}: {reply['error']['message']}", file=sys.stderr)
        return EXIT_ERROR
    print(f"dictionary version {reply['body']['version']}: {', '.join(reply['body']['entities'])}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .sim import load_scenario, run_scenario, to_text

    try:
        scenario = load_scenario(args.scenario)
    except OSError as exc:
        raise UsageError(f"cannot read {args.scenario}: {exc.strerror}") from None
    trace, results = run_scenario(scenario, args.seed)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(to_text(trace))
    print(f"events={len(trace)} seed={scenario.with_seed(args.seed).seed}")
    for r in results.values():
        print(r)
    return EXIT_OK if all(r.ok for r in results.values()) else EXIT_ERROR


def cmd_bench(args) -> int:
    from .bench import run_workload

    workload = args.workload
    if workload.startswith("@"):
        workload = _read_input(workload[1:]).strip()
    report = run_workload(workload)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_admin(args) -> int:
    client = _connect(args)
    try:
        reply = client.call(f"admin.{args.what}")
    finally:
        client.close()
    if not reply["ok"]:
        print(f"{reply['error']['code']}: {reply['error']['message']}", file=sys.stderr)
        return EXIT_ERROR
    for line in reply["body"].get("text", []):
        print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trinity", description="Polyglot persistence middleware and simulator.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def remote(sp):
        sp.add_argument("--config", help="config file (for the listen address)")
        sp.add_argument("--addr", help="host:port, overriding the config")

    sp = sub.add_parser("serve", help="run the NDJSON server")
    sp.add_argument("--config", help="config file")
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("client", help="talk to a running server")
    csub = sp.add_subparsers(dest="client_cmd", parser_class=_Parser)
    csub.required = True
    ce = csub.add_parser("exec", help="send NDJSON requests from a file or - for stdin")
    ce.add_argument("file")
    remote(ce)
    ce.set_defaults(fn=cmd_client_exec)

    sp = sub.add_parser("schema", help="schema management")
    ssub = sp.add_subparsers(dest="schema_cmd", parser_class=_Parser)
    ssub.required = True
    sa = ssub.add_parser("apply", help="apply an NDJSON schema file")
    sa.add_argument("file")
    sa.add_argument("--check", action="store_true", help="validate locally without a server")
    remote(sa)
    sa.set_defaults(fn=cmd_schema_apply)

    sp = sub.add_parser("simulate", help="run a scenario in the deterministic simulator")
    sp.add_argument("scenario")
    sp.add_argument("--seed", type=lambda s: int(s, 0))
    sp.add_argument("--trace", help="write the trace here")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("bench", help="run a desk-scale benchmark")
    sp.add_argument("--workload", required=True, help="kind[:k=v,...] or @file")
    sp.add_argument("--report", help="write the JSON report here")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("admin", help="inspect a running server")
    sp.add_argument("what", choices=("shards", "replsets", "cache", "autoscale", "lag"))
    remote(sp)
    sp.set_defaults(fn=cmd_admin)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"trinity: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrinityError, OSError, ValueError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(f"trinity: {code}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
