"""Command-line entry points: pnc-sim, emsp-as, emsp-rs, ev, ua, cp."""

from __future__ import annotations

import argparse
import getpass
import json
import logging
import os
import sys
import threading
from dataclasses import dataclass
from datetime import timedelta
from pathlib import Path
from typing import Any, Sequence

from .authserver import AuthorizationServer, UserRecord
from .chargepoint import ChargePoint
from .core.httpwire import HttpRequest, HttpResponse, json_response
from .core.model import AuthorizationDetails, UserCode, details_from_list, parse_timestamp
from .core.runtime import SeededRandomSource, SystemClock
from .hosting import FileJournal, ThreadScheduler, http_ble_link, http_transport, serve
from .pairing import PairingError, PairingOffer, SecureSession
from .pki import CertificateAuthority, KeyHandle, SerialCounter, SoftHSM, load_certificate, save_certificate
from .resourceserver import ResourceServer, ResourceServerConfig
from .useragent import ApprovalPolicy, ProvisionTicket, UaError, UserAgent, Verdict
from .vehicle import ElectricVehicle, EmspDescriptor

log = logging.getLogger("pncoauth")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


def _load_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# -- pnc-sim -----------------------------------------------------------------


def sim_main(argv: Sequence[str] | None = None) -> int:
    from .sim import PRESETS, Scenario, ScenarioError, load_scenario, run_scenario

    parser = argparse.ArgumentParser(prog="pnc-sim", description="Deterministic protocol simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--scenario", required=True, help="built-in name or JSON scenario file")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--check", choices=["all", "none"], default="none")
    run.add_argument("--mutation", action="append", default=[], help="as_no_single_use or ev_no_chain_validation")
    run.add_argument("--trace", help="write the trace as JSON Lines to this file")
    run.add_argument("-v", "--verbose", action="store_true")
    sweep = sub.add_parser("sweep", help="run many seeded randomized scenarios")
    sweep.add_argument("--runs", type=int, default=100)
    sweep.add_argument("--presets", default="mitm_pairing,session_swap,token_replay")
    sweep.add_argument("--mutation", action="append", default=[])
    sweep.add_argument("--first-seed", type=int, default=0)
    args = parser.parse_args(argv)

    if args.command == "run":
        _setup_logging(args.verbose)
        try:
            scenario = load_scenario(args.scenario, args.seed)
        except (KeyError, ValueError, OSError) as exc:
            parser.error(f"cannot load scenario {args.scenario!r}: {exc}")
        scenario.mutations = sorted(set(scenario.mutations) | set(args.mutation))
        try:
            result = run_scenario(scenario)
        except ScenarioError as exc:
            if args.trace:
                exc.trace.save(args.trace)
            print(json.dumps({"error": str(exc)}), file=sys.stderr)
            return 2
        if args.trace:
            result.trace.save(args.trace)
        summary = result.summary()
        summary["wall_seconds"] = round(result.wall_seconds, 4)
        print(json.dumps(summary, indent=2, sort_keys=True))
        if args.check == "all" and not result.ok:
            return 1
        return 0

    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    for preset in presets:
        if preset not in PRESETS:
            parser.error(f"unknown preset {preset!r}")
    failures = counterexamples = 0
    for i in range(args.runs):
        seed = args.first_seed + i
        preset = presets[i % len(presets)]
        result = run_scenario(Scenario("sweep", seed, adversary=preset, randomize=True, mutations=list(args.mutation)))
        counterexamples += len(result.oracle.counterexamples)
        if not result.ok:
            failures += 1
    print(json.dumps({"runs": args.runs, "failed": failures, "counterexamples": counterexamples}, sort_keys=True))
    return 0 if failures == 0 else 1


# -- EMSP servers --------------------------------------------------------------


@dataclass
class EmspDeployment:
    """Key material and CA hierarchy for one EMSP, rebuilt from its config file.

    Keys are derived from ``hsm_seed`` so that the AS and RS processes agree
    on them without exporting private keys. That is a demo arrangement; a
    production deployment keeps the keys in a real HSM.
    """

    emsp_id: str
    hsm: SoftHSM
    root: CertificateAuthority
    issuing: CertificateAuthority
    as_key: KeyHandle

    @classmethod
    def from_config(cls, cfg: dict[str, Any]) -> "EmspDeployment":
        emsp_id = cfg["emsp_id"]
        if "hsm_seed" not in cfg:
            raise SystemExit("config needs hsm_seed so that emsp-as and emsp-rs derive the same keys")
        alg = cfg.get("key_alg", "ed25519")
        epoch = parse_timestamp(cfg.get("ca_epoch", "2025-01-01T00:00:00Z"))
        hsm = SoftHSM(SeededRandomSource(f"emsp-hsm/{cfg['hsm_seed']}"), emsp_id)
        root = CertificateAuthority.create_root(f"{emsp_id}-root", hsm, epoch, epoch + timedelta(days=3650), alg)
        issuing = root.create_subordinate(
            f"{emsp_id}-contract-ca", hsm, epoch, epoch + timedelta(days=1825), alg,
            serials=SerialCounter(cfg.get("serial_file")),
        )
        as_key = hsm.generate_keypair(alg)
        return cls(emsp_id, hsm, root, issuing, as_key)


def _users(cfg: dict[str, Any]) -> list[UserRecord]:
    out = []
    for entry in cfg.get("users", []):
        if "verifier" in entry:
            out.append(UserRecord.from_dict(entry))
        else:
            out.append(UserRecord.create(entry["user_id"], entry["password"], entry.get("display_name", "")))
    return out


def as_main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="emsp-as", description="EMSP authorization server")
    parser.add_argument("--config", required=True)
    parser.add_argument("--listen", default="127.0.0.1:8080")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    cfg = _load_json(args.config)
    emsp = EmspDeployment.from_config(cfg)
    server = AuthorizationServer(
        emsp.emsp_id,
        emsp.hsm,
        emsp.as_key,
        clients=cfg.get("clients", []),
        verification_uri=cfg.get("verification_uri", f"http://{args.listen}/verify"),
        users=_users(cfg),
        expires_in=int(cfg.get("expires_in", 600)),
        interval=int(cfg.get("interval", 5)),
        token_lifetime=int(cfg.get("token_lifetime", 300)),
        journal=FileJournal(cfg["journal"]) if cfg.get("journal") else None,
    )
    print(f"emsp-as {emsp.emsp_id} listening on {args.listen}", flush=True)
    serve(server.handle, args.listen)
    return 0


def rs_main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="emsp-rs", description="EMSP contract certificate service")
    parser.add_argument("--config", required=True)
    parser.add_argument("--listen", default="127.0.0.1:8081")
    parser.add_argument("--export-root", help="write the EMSP trust root (.pncc) and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    cfg = _load_json(args.config)
    emsp = EmspDeployment.from_config(cfg)
    if args.export_root:
        print(save_certificate(args.export_root, emsp.root.certificate))
        return 0
    server = ResourceServer(ResourceServerConfig(emsp.emsp_id, emsp.emsp_id, emsp.as_key.public_key), emsp.issuing)
    print(f"emsp-rs {emsp.emsp_id} listening on {args.listen}", flush=True)
    serve(server.handle, args.listen)
    return 0


# -- vehicle -------------------------------------------------------------------


def ev_main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ev", description="Vehicle provisioning client")
    parser.add_argument("--config", required=True)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    cfg = _load_json(args.config)
    base_dir = Path(args.config).resolve().parent
    directory, roots = [], {}
    for entry in cfg["emsps"]:
        directory.append(EmspDescriptor(entry["emsp_id"], entry.get("display_name", entry["emsp_id"]), entry["as_base"], entry["rs_base"]))
        roots[entry["emsp_id"]] = load_certificate(base_dir / entry["trust_root"])
    lock = threading.RLock()
    ev = ElectricVehicle(
        cfg["ev_id"],
        cfg["client_id"],
        directory,
        hsm=SoftHSM(label=cfg["ev_id"]),
        transport=http_transport,
        trust_roots=roots,
        scheduler=ThreadScheduler(lock),
        display=lambda text: print(f"[display] {text}", flush=True),
        key_alg=cfg.get("key_alg", "ed25519"),
    )
    listen = cfg.get("listen", "127.0.0.1:8090")

    def handle(request: HttpRequest) -> HttpResponse:
        if (request.method, request.path) != ("POST", "/ble"):
            return json_response(404, {"error": "not_found"})
        with lock:
            answer = ev.handle_ble(request.body)
        return HttpResponse(200, [("Content-Type", "application/octet-stream")], answer)

    with lock:
        ev.offer_pairing(address=listen)
    serve(handle, listen)
    return 0


# -- user agent ----------------------------------------------------------------


def _load_state(path: Path) -> dict[str, Any]:
    return json.loads(path.read_text()) if path.exists() else {}


def _save_state(path: Path, state: dict[str, Any]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(state, indent=2, sort_keys=True))
    os.chmod(tmp, 0o600)
    tmp.replace(path)


def _agent(state: dict[str, Any], args: argparse.Namespace, **kwargs: Any) -> UserAgent:
    ev = getattr(args, "ev", None) or state.get("ev")
    ua = UserAgent("ua", transport=http_transport, link=http_ble_link(ev) if ev else None, **kwargs)
    if "session" in state:
        ua.session = SecureSession.from_dict(state["session"])
    return ua


def ua_main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ua", description="Driver's user agent")
    parser.add_argument("--state", default="ua-state.json", help="where pairing and provisioning state is kept")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    pair = sub.add_parser("pair")
    pair.add_argument("--qr", required=True, help="connect URL from the vehicle's QR code, or a file holding it")
    pair.add_argument("--ev", required=True, help="vehicle link address, e.g. http://127.0.0.1:8090")
    prov = sub.add_parser("provision")
    prov.add_argument("--emsp", required=True)
    prov.add_argument("--details", required=True, help="JSON file with the authorization details")
    approve = sub.add_parser("approve")
    mode = approve.add_mutually_exclusive_group(required=True)
    mode.add_argument("--policy", help="scripted approval policy (JSON)")
    mode.add_argument("--interactive", action="store_true")
    approve.add_argument("--user", default=os.environ.get("PNC_UA_USER", ""))
    approve.add_argument("--password", default=os.environ.get("PNC_UA_PASSWORD"))
    approve.add_argument("--user-code", help="code from the verification link; defaults to the one the vehicle returned")
    approve.add_argument("--ev-code", help="code shown on the vehicle display")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    state_path = Path(args.state)
    state = _load_state(state_path)

    try:
        if args.command == "pair":
            qr = args.qr if args.qr.startswith("https://") else Path(args.qr).read_text().strip()
            ua = _agent(state, args)
            session = ua.pair(PairingOffer.from_qr(qr, address=args.ev))
            _save_state(state_path, {"ev": args.ev, "session": session.to_dict()})
            print("paired")
            return 0

        if args.command == "provision":
            ua = _agent(state, args)
            try:
                details = details_from_list(_load_json(args.details))
            except ValueError:
                details = AuthorizationDetails.from_wire(_load_json(args.details))
            try:
                emsps = ua.fetch_emsps()
                ticket = ua.configure_and_submit(args.emsp, details)
            finally:
                if ua.session is not None:
                    state["session"] = ua.session.to_dict()
                    _save_state(state_path, state)
            state.update(
                emsps=[e.to_wire() for e in emsps],
                expected_details=details.to_wire(),
                ticket={
                    "emsp_id": ticket.emsp_id,
                    "user_code": ticket.user_code.display,
                    "verification_uri": ticket.verification_uri,
                    "verification_uri_complete": ticket.verification_uri_complete,
                },
            )
            _save_state(state_path, state)
            print(f"user code: {ticket.user_code.display}")
            print(f"verify at: {ticket.verification_uri_complete or ticket.verification_uri}")
            return 0

        ticket_obj = state.get("ticket")
        if not ticket_obj:
            parser.error("run 'ua provision' first")
        password = args.password if args.password is not None else getpass.getpass("EMSP password: ")
        ua = _agent(state, args, user_id=args.user or input("EMSP user id: "), password=password)
        ua.expected_details = AuthorizationDetails.from_wire(state["expected_details"])
        ticket = ProvisionTicket(ticket_obj["emsp_id"], UserCode(ticket_obj["user_code"]), ticket_obj["verification_uri"], ticket_obj["verification_uri_complete"])
        as_base = next(e["as_base"] for e in state["emsps"] if e["emsp_id"] == ticket.emsp_id)
        ev_code = args.ev_code
        if ev_code is None and args.interactive:
            ev_code = input("Code shown on the vehicle: ")
        if ev_code is None:
            response = ua._ev_call(HttpRequest("GET", "/status"))
            ev_code = response.json().get("user_code")
            state["session"] = ua.session.to_dict() if ua.session else state.get("session")
            _save_state(state_path, state)
        policy = ApprovalPolicy.from_file(args.policy) if args.policy else None
        review = ua.verify_and_decide(as_base, args.user_code or ticket.user_code, ev_code, policy, interactive=args.interactive)
        print(review.verdict.value + ("" if not review.reasons else ": " + "; ".join(review.reasons)))
        return 0 if review.verdict is Verdict.GRANT else 2
    except (UaError, PairingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# -- charge point ----------------------------------------------------------------


def cp_main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cp", description="Charge point Plug and Charge verifier")
    parser.add_argument("--trust-root", required=True, action="append", help="EMSP root certificate (.pncc); repeatable")
    parser.add_argument("--listen", default="127.0.0.1:8095")
    parser.add_argument("--id", default="cp-1")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    cp = ChargePoint(args.id, [load_certificate(p) for p in args.trust_root], clock=SystemClock())
    print(f"cp {args.id} listening on {args.listen}", flush=True)
    serve(cp.handle, args.listen)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(sim_main())
